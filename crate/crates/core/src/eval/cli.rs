use std::collections::HashMap;
use std::ffi::OsString;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use super::{
    decode_baseline, decode_decoupled, mer, per, to_mixed_units, DecodeOptions, EvalReport, Hypothesis, MixedUnitSeq,
    PerReport, Scoring,
};
use crate::data::{build_corpus, Corpus, Lexicon, MixTag, SynthConfig, TextPair, Utterance};
use crate::error::{Error, Result};
use crate::model::checkpoint::{META_A2P_DIGEST, META_KIND, META_STAGE, META_STEP};
use crate::model::{Ablation, BaselineModel, Checkpoint, DecoupledModel, ModelConfig};
use crate::nn::ParamStore;
use crate::train::{
    average_checkpoints, joint_finetune, pretrain_a2p, pretrain_p2t, train_baseline, DevSet, Hyperparams, MetricsLog,
    Stage, StageReport,
};

const KIND_DECOUPLED: &str = "decoupled";
const KIND_BASELINE: &str = "baseline";
const RESOLVED: &str = "resolved.toml";

#[derive(Parser, Debug)]
#[command(name = "dasr", version, about = "Decoupled code-switching recognizer on a synthetic bilingual corpus")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone, Default)]
struct ConfigArgs {
    /// Flat TOML file with model and training keys.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override one config key, e.g. `--set lr_scale=0.3`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args, Debug, Clone)]
struct TrainArgs {
    #[command(flatten)]
    cfg: ConfigArgs,
    /// Corpus directory written by `gen-data`.
    #[arg(long)]
    data: PathBuf,
    /// Output directory for the checkpoint, metrics and resolved config.
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    epochs: Option<usize>,
    /// Skip dev evaluation during training.
    #[arg(long)]
    no_dev: bool,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate the synthetic corpus.
    GenData {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// CTC pretraining of the audio-to-phoneme network.
    TrainA2p {
        #[command(flatten)]
        train: TrainArgs,
        /// Comma-separated training mixes: cs, alpha, beta.
        #[arg(long, default_value = "cs,alpha,beta")]
        mixes: String,
    },
    /// Text-only pretraining of the phoneme-to-text network.
    TrainP2t {
        #[command(flatten)]
        train: TrainArgs,
        /// Checkpoint to start from (usually the A2P checkpoint).
        #[arg(long)]
        init: Option<PathBuf>,
        /// Train on the text corpus only, without the paired transcripts.
        #[arg(long)]
        text_only: bool,
    },
    /// Joint fine-tuning on paired data with online candidates.
    TrainJoint {
        #[command(flatten)]
        train: TrainArgs,
        #[arg(long)]
        init: PathBuf,
        #[arg(long, default_value = "full")]
        ablation: Ablation,
        #[arg(long)]
        unfreeze_a2p: bool,
        #[arg(long)]
        n_candidates: Option<usize>,
    },
    /// End-to-end training of the single-network baseline.
    TrainBaseline {
        #[command(flatten)]
        train: TrainArgs,
    },
    /// Average the parameters of the last k checkpoints given.
    AvgCkpt {
        #[arg(long)]
        last: usize,
        #[arg(long)]
        out: PathBuf,
        #[arg(required = true)]
        checkpoints: Vec<PathBuf>,
    },
    /// Decode a split and write a hypothesis manifest.
    Decode {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long, default_value = "test")]
        split: String,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        beam: Option<usize>,
        #[arg(long)]
        n_candidates: Option<usize>,
        #[arg(long, default_value = "full")]
        ablation: Ablation,
        #[arg(long)]
        scoring: Option<Scoring>,
    },
    /// Score a hypothesis manifest against a reference manifest.
    Eval {
        /// Corpus directory, for the vocabulary.
        #[arg(long)]
        data: PathBuf,
        #[arg(long = "ref")]
        reference: PathBuf,
        #[arg(long = "hyp")]
        hypothesis: PathBuf,
        /// Leave word boundaries out of the phoneme error rate.
        #[arg(long)]
        per_no_wb: bool,
        /// Write the report as JSON here as well.
        #[arg(long)]
        json: Option<PathBuf>,
    },
    /// Fine-tune and score the full model and both single-branch variants.
    Ablate {
        #[command(flatten)]
        train: TrainArgs,
        /// P2T-pretrained checkpoint.
        #[arg(long)]
        init: PathBuf,
        #[arg(long)]
        beam: Option<usize>,
    },
}

/// Parses `args` (program name first), runs the command and returns the
/// process exit code.
pub fn run_cli<I, S>(args: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = e.exit_code();
            let _ = e.print();
            return code;
        }
    };
    match run(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            1
        }
    }
}

fn run(cmd: Command) -> Result<()> {
    match cmd {
        Command::GenData { cfg, out } => gen_data(&cfg, &out),
        Command::TrainA2p { train, mixes } => train_a2p(&train, &mixes),
        Command::TrainP2t { train, init, text_only } => train_p2t(&train, init.as_deref(), text_only),
        Command::TrainJoint {
            train,
            init,
            ablation,
            unfreeze_a2p,
            n_candidates,
        } => train_joint(&train, &init, ablation, unfreeze_a2p, n_candidates),
        Command::TrainBaseline { train } => train_base(&train),
        Command::AvgCkpt { last, out, checkpoints } => avg_ckpt(last, &out, &checkpoints),
        Command::Decode {
            data,
            ckpt,
            split,
            out,
            beam,
            n_candidates,
            ablation,
            scoring,
        } => decode(&data, &ckpt, &split, &out, beam, n_candidates, ablation, scoring),
        Command::Eval {
            data,
            reference,
            hypothesis,
            per_no_wb,
            json,
        } => eval(&data, &reference, &hypothesis, per_no_wb, json.as_deref()),
        Command::Ablate { train, init, beam } => ablate(&train, &init, beam),
    }
}

// ---------------------------------------------------------------------------
// Configuration

/// Flat key table from the config file plus `--set` overrides.
fn load_table(args: &ConfigArgs) -> Result<toml::Table> {
    let mut table = match &args.config {
        Some(path) => {
            let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
            toml::from_str::<toml::Table>(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?
        }
        None => toml::Table::new(),
    };
    for kv in &args.set {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("`--set {kv}`: expected KEY=VALUE")))?;
        let (k, v) = (k.trim(), v.trim());
        let value = match toml::from_str::<toml::Table>(&format!("v = {v}")) {
            Ok(mut t) => t.remove("v").expect("parsed key"),
            Err(_) => toml::Value::String(v.to_string()),
        };
        table.insert(k.to_string(), value);
    }
    if let Some(seed) = args.seed {
        table.insert("seed".into(), toml::Value::Integer(seed as i64));
    }
    Ok(table)
}

/// Moves the keys `base` knows about out of `table` and overlays them.
fn take_section<T: Serialize + DeserializeOwned>(base: &T, table: &mut toml::Table) -> Result<(T, Vec<String>)> {
    let mut merged = toml::Table::try_from(base).map_err(|e| Error::Config(e.to_string()))?;
    let keys: Vec<String> = merged.keys().filter(|k| table.contains_key(*k)).cloned().collect();
    for k in &keys {
        merged.insert(k.clone(), table.remove(k).expect("key present"));
    }
    let value = toml::Value::Table(merged)
        .try_into()
        .map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
    Ok((value, keys))
}

fn reject_leftovers(table: &toml::Table) -> Result<()> {
    match table.keys().next() {
        Some(k) => Err(Error::Config(format!("unknown config key `{k}`"))),
        None => Ok(()),
    }
}

struct RunConfig {
    model: ModelConfig,
    hp: Hyperparams,
    model_keys: Vec<String>,
}

fn run_config(args: &ConfigArgs) -> Result<RunConfig> {
    let mut table = load_table(args)?;
    let base = match table.remove("preset") {
        Some(toml::Value::String(name)) => ModelConfig::preset(&name)?,
        Some(other) => return Err(Error::Config(format!("preset must be a string, got {other}"))),
        None => ModelConfig::desk(),
    };
    let (model, model_keys) = take_section(&base, &mut table)?;
    let (hp, _) = take_section(&Hyperparams::default(), &mut table)?;
    reject_leftovers(&table)?;
    hp.validate()?;
    Ok(RunConfig { model, hp, model_keys })
}

/// Sizes that come from the corpus rather than the config.
fn fit_to_corpus(model: &mut ModelConfig, corpus: &SynthConfig) {
    let sizes = [
        ("target_vocab", &mut model.target_vocab, corpus.target_vocab()),
        ("phoneme_vocab", &mut model.phoneme_vocab, corpus.phoneme_vocab()),
        ("d_feat", &mut model.d_feat, corpus.d_feat),
    ];
    for (name, slot, want) in sizes {
        if *slot != want {
            log::debug!("{name}: {} -> {want} (from corpus)", *slot);
            *slot = want;
        }
    }
}

/// Model configuration stored in `ckpt`; config-file model keys must agree.
fn model_from_checkpoint(ckpt: &Checkpoint, rc: &RunConfig) -> Result<ModelConfig> {
    let stored = ckpt.config()?;
    let given = toml::Table::try_from(&rc.model).map_err(|e| Error::Config(e.to_string()))?;
    let have = toml::Table::try_from(&stored).map_err(|e| Error::Config(e.to_string()))?;
    for k in &rc.model_keys {
        if given.get(k) != have.get(k) {
            return Err(Error::Config(format!(
                "model key `{k}` conflicts with the checkpoint ({} vs {})",
                given[k], have[k]
            )));
        }
    }
    Ok(stored)
}

fn write_resolved(out: &Path, command: &str, sections: &[toml::Table]) -> Result<()> {
    let mut all = toml::Table::new();
    for s in sections {
        all.extend(s.clone());
    }
    let body = toml::to_string(&all).map_err(|e| Error::Config(e.to_string()))?;
    let path = out.join(RESOLVED);
    std::fs::write(&path, format!("# dasr {command}\n{body}")).map_err(|e| Error::io(&path, e))
}

fn table_of<T: Serialize>(v: &T) -> Result<toml::Table> {
    toml::Table::try_from(v).map_err(|e| Error::Config(e.to_string()))
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn load_lexicon(data: &Path) -> Result<Lexicon> {
    let path = data.join("corpus.toml");
    let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let cfg: SynthConfig = toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
    Lexicon::generate(&cfg)
}

fn set_epochs(hp: &mut Hyperparams, stage: Stage, epochs: Option<usize>) {
    let Some(n) = epochs else { return };
    match stage {
        Stage::A2pPretrain => hp.epochs_a2p = n,
        Stage::P2tPretrain => hp.epochs_p2t = n,
        Stage::Joint => hp.epochs_joint = n,
        Stage::Baseline => hp.epochs_baseline = n,
    }
}

// ---------------------------------------------------------------------------
// Commands

fn gen_data(args: &ConfigArgs, out: &Path) -> Result<()> {
    let mut table = load_table(args)?;
    let (cfg, _) = take_section(&SynthConfig::default(), &mut table)?;
    reject_leftovers(&table)?;
    cfg.validate()?;
    let corpus = build_corpus(&cfg)?;
    corpus.write(out)?;
    write_resolved(out, "gen-data", &[table_of(&cfg)?])?;
    println!(
        "wrote {}: {} train, {} dev, {} test utterances, {} text pairs",
        out.display(),
        corpus.train.len(),
        corpus.dev.len(),
        corpus.test.len(),
        corpus.text.len()
    );
    Ok(())
}

struct Session {
    corpus: Corpus,
    rc: RunConfig,
    log: MetricsLog,
}

fn open_session(args: &TrainArgs, stage: Stage) -> Result<Session> {
    let mut rc = run_config(&args.cfg)?;
    set_epochs(&mut rc.hp, stage, args.epochs);
    let corpus = Corpus::load(&args.data)?;
    fit_to_corpus(&mut rc.model, &corpus.config);
    create_dir(&args.out)?;
    let log = MetricsLog::to_dir(&args.out)?;
    Ok(Session { corpus, rc, log })
}

fn dev_set<'a>(args: &TrainArgs, corpus: &'a Corpus) -> Option<DevSet<'a>> {
    (!args.no_dev).then_some(DevSet {
        utts: &corpus.dev,
        vocab: &corpus.lexicon.vocab,
    })
}

fn save_stage(
    out: &Path,
    file: &str,
    kind: &str,
    config: &ModelConfig,
    store: ParamStore,
    report: &StageReport,
    a2p_digest: Option<&str>,
) -> Result<PathBuf> {
    let mut ckpt = Checkpoint::new(config, store)
        .with_meta(META_KIND, kind)
        .with_meta(META_STAGE, report.stage.name())
        .with_meta(META_STEP, report.steps.to_string());
    if let Some(d) = a2p_digest {
        ckpt = ckpt.with_meta(META_A2P_DIGEST, d);
    }
    let path = out.join(file);
    ckpt.save(&path)?;
    let last = report.epoch_loss.last().copied().unwrap_or(f64::NAN);
    let dev = report.dev_metric.iter().rev().flatten().next();
    match dev {
        Some(d) => println!("{}: {} steps, final loss {last:.4}, dev {d:.4} -> {}", report.stage, report.steps, path.display()),
        None => println!("{}: {} steps, final loss {last:.4} -> {}", report.stage, report.steps, path.display()),
    }
    Ok(path)
}

fn parse_mixes(s: &str) -> Result<Vec<MixTag>> {
    s.split(',')
        .map(|m| match m.trim() {
            "cs" => Ok(MixTag::CodeSwitch),
            "alpha" => Ok(MixTag::Alpha),
            "beta" => Ok(MixTag::Beta),
            other => Err(Error::Config(format!("unknown mix `{other}` (cs, alpha, beta)"))),
        })
        .collect()
}

fn train_a2p(args: &TrainArgs, mixes: &str) -> Result<()> {
    let mut s = open_session(args, Stage::A2pPretrain)?;
    let data = s.corpus.train_subset(&parse_mixes(mixes)?);
    let model = DecoupledModel::new(&s.rc.model)?;
    let mut store = model.init(s.rc.hp.seed);
    let report = pretrain_a2p(&model, &mut store, &data, dev_set(args, &s.corpus), &s.rc.hp, &mut s.log)?;
    write_resolved(&args.out, "train-a2p", &[table_of(&s.rc.model)?, table_of(&s.rc.hp)?])?;
    let digest = report.a2p_digest.clone();
    save_stage(&args.out, "a2p.ckpt", KIND_DECOUPLED, &s.rc.model, store, &report, Some(&digest))?;
    Ok(())
}

fn load_decoupled(path: &Path, rc: &RunConfig) -> Result<(Checkpoint, ModelConfig)> {
    let ckpt = Checkpoint::load(path)?;
    if ckpt.meta(META_KIND).is_some_and(|k| k != KIND_DECOUPLED) {
        return Err(Error::Checkpoint(format!("{} is not a decoupled-model checkpoint", path.display())));
    }
    let model = model_from_checkpoint(&ckpt, rc)?;
    Ok((ckpt, model))
}

fn train_p2t(args: &TrainArgs, init: Option<&Path>, text_only: bool) -> Result<()> {
    let mut s = open_session(args, Stage::P2tPretrain)?;
    let (mut store, model_cfg, digest) = match init {
        Some(path) => {
            let (ckpt, cfg) = load_decoupled(path, &s.rc)?;
            let digest = ckpt.meta(META_A2P_DIGEST).map(str::to_string);
            (ckpt.params, cfg, digest)
        }
        None => (DecoupledModel::new(&s.rc.model)?.init(s.rc.hp.seed), s.rc.model.clone(), None),
    };
    let model = DecoupledModel::new(&model_cfg)?;
    let mut text: Vec<TextPair> = s.corpus.text.clone();
    if !text_only {
        text.extend(s.corpus.train.iter().map(TextPair::from));
    }
    let report = pretrain_p2t(&model, &mut store, &text, dev_set(args, &s.corpus), &s.rc.hp, &mut s.log)?;
    write_resolved(&args.out, "train-p2t", &[table_of(&model_cfg)?, table_of(&s.rc.hp)?])?;
    save_stage(&args.out, "p2t.ckpt", KIND_DECOUPLED, &model_cfg, store, &report, digest.as_deref())?;
    Ok(())
}

fn joint_data(corpus: &Corpus) -> Vec<Utterance> {
    corpus.train_subset(&[MixTag::CodeSwitch, MixTag::Alpha])
}

fn train_joint(
    args: &TrainArgs,
    init: &Path,
    ablation: Ablation,
    unfreeze: bool,
    n_candidates: Option<usize>,
) -> Result<()> {
    let mut s = open_session(args, Stage::Joint)?;
    s.rc.hp.unfreeze_a2p |= unfreeze;
    let (ckpt, mut model_cfg) = load_decoupled(init, &s.rc)?;
    if let Some(n) = n_candidates {
        model_cfg.n_candidates = n;
        model_cfg.validate()?;
    }
    let digest = ckpt.meta(META_A2P_DIGEST).map(str::to_string);
    let mut store = ckpt.params;
    let model = DecoupledModel::new(&model_cfg)?;
    let data = joint_data(&s.corpus);
    let report = joint_finetune(
        &model,
        &mut store,
        digest.as_deref(),
        &data,
        dev_set(args, &s.corpus),
        ablation,
        &s.rc.hp,
        &mut s.log,
    )?;
    write_resolved(&args.out, "train-joint", &[table_of(&model_cfg)?, table_of(&s.rc.hp)?])?;
    let digest = report.a2p_digest.clone();
    save_stage(&args.out, "joint.ckpt", KIND_DECOUPLED, &model_cfg, store, &report, Some(&digest))?;
    Ok(())
}

fn train_base(args: &TrainArgs) -> Result<()> {
    let mut s = open_session(args, Stage::Baseline)?;
    let model = BaselineModel::new(&s.rc.model)?;
    let mut store = model.init(s.rc.hp.seed);
    let data = joint_data(&s.corpus);
    let report = train_baseline(&model, &mut store, &data, dev_set(args, &s.corpus), &s.rc.hp, &mut s.log)?;
    write_resolved(&args.out, "train-baseline", &[table_of(&s.rc.model)?, table_of(&s.rc.hp)?])?;
    save_stage(&args.out, "baseline.ckpt", KIND_BASELINE, &s.rc.model, store, &report, None)?;
    Ok(())
}

fn avg_ckpt(last: usize, out: &Path, paths: &[PathBuf]) -> Result<()> {
    if last == 0 || last > paths.len() {
        return Err(Error::Config(format!("--last {last} with {} checkpoints", paths.len())));
    }
    let ckpts = paths[paths.len() - last..]
        .iter()
        .map(|p| Checkpoint::load(p))
        .collect::<Result<Vec<_>>>()?;
    let avg = average_checkpoints(&ckpts)?;
    avg.save(out)?;
    println!("averaged {last} checkpoints -> {}", out.display());
    Ok(())
}

// ---------------------------------------------------------------------------
// Decoding and scoring

/// One line of a hypothesis manifest. Reference manifests share the `id`,
/// `target` and `phonemes` fields.
#[derive(Debug, Serialize, Deserialize)]
struct HypRecord {
    id: String,
    target: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    phonemes: Option<Vec<String>>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    candidates: Vec<Vec<String>>,
    #[serde(default = "yes")]
    finished: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    log_prob: Option<f64>,
}

fn yes() -> bool {
    true
}

fn split_of<'a>(corpus: &'a Corpus, split: &str) -> Result<&'a [Utterance]> {
    match split {
        "train" => Ok(&corpus.train),
        "dev" => Ok(&corpus.dev),
        "test" => Ok(&corpus.test),
        other => Err(Error::Config(format!("unknown split `{other}` (train, dev, test)"))),
    }
}

#[allow(clippy::too_many_arguments)]
fn decode(
    data: &Path,
    ckpt_path: &Path,
    split: &str,
    out: &Path,
    beam: Option<usize>,
    n_candidates: Option<usize>,
    ablation: Ablation,
    scoring: Option<Scoring>,
) -> Result<()> {
    let corpus = Corpus::load(data)?;
    let utts = split_of(&corpus, split)?;
    let ckpt = Checkpoint::load(ckpt_path)?;
    let cfg = ckpt.config()?;
    let hp = Hyperparams::default();
    let opts = DecodeOptions {
        beam: beam.unwrap_or(hp.decode_beam),
        ctc_beam: cfg.ctc_beam,
        n_candidates: n_candidates.unwrap_or(cfg.n_candidates),
        scoring: scoring.unwrap_or(hp.scoring),
    };
    let lex = &corpus.lexicon;
    let symbols = |ids: &[usize]| -> Vec<String> {
        ids.iter()
            .map(|&i| lex.inventory.symbol(i).unwrap_or("?").to_string())
            .collect()
    };
    let record = |u: &Utterance, h: &Hypothesis, cands: &[crate::ctc::PhonemeSeq]| HypRecord {
        id: u.id.clone(),
        target: lex.vocab.decode(&h.tokens),
        phonemes: cands.first().map(|c| symbols(c.ids())),
        candidates: cands.iter().map(|c| symbols(c.ids())).collect(),
        finished: h.finished,
        log_prob: h.log_prob.is_finite().then_some(h.log_prob),
    };
    let mut records = Vec::with_capacity(utts.len());
    match ckpt.meta(META_KIND).unwrap_or(KIND_DECOUPLED) {
        KIND_BASELINE => {
            let model = BaselineModel::new(&cfg)?;
            for u in utts {
                let h = decode_baseline(&model, &ckpt.params, &u.features.frames, &opts)?;
                records.push(record(u, &h, &[]));
            }
        }
        KIND_DECOUPLED => {
            let model = DecoupledModel::new(&cfg)?;
            for u in utts {
                let o = decode_decoupled(&model, &ckpt.params, &u.features.frames, ablation, &opts)?;
                records.push(record(u, &o.hypothesis, &o.candidates));
            }
        }
        other => return Err(Error::Checkpoint(format!("unknown checkpoint kind `{other}`"))),
    }
    write_records(out, &records)?;
    println!("decoded {} utterances -> {}", records.len(), out.display());
    Ok(())
}

fn write_records(path: &Path, records: &[HypRecord]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        create_dir(dir)?;
    }
    let f = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(f);
    for r in records {
        let line = serde_json::to_string(r).map_err(|e| Error::Json {
            path: path.into(),
            line: 0,
            source: e,
        })?;
        writeln!(w, "{line}").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

fn read_records(path: &Path) -> Result<Vec<HypRecord>> {
    let f = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(f).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| Error::Json {
            path: path.into(),
            line: i + 1,
            source: e,
        })?);
    }
    Ok(out)
}

#[derive(Serialize)]
struct FullReport {
    #[serde(flatten)]
    mer: EvalReport,
    unfinished: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    per: Option<PerReport>,
}

fn eval(data: &Path, ref_path: &Path, hyp_path: &Path, per_no_wb: bool, json: Option<&Path>) -> Result<()> {
    let lex = load_lexicon(data)?;
    let refs = read_records(ref_path)?;
    let mut hyps: HashMap<String, HypRecord> = HashMap::new();
    for h in read_records(hyp_path)? {
        let id = h.id.clone();
        if hyps.insert(id.clone(), h).is_some() {
            return Err(Error::Input(format!("{}: duplicate id `{id}`", hyp_path.display())));
        }
    }
    if hyps.len() != refs.len() {
        return Err(Error::Input(format!(
            "{} reference utterances but {} hypotheses",
            refs.len(),
            hyps.len()
        )));
    }
    let mut pairs = Vec::with_capacity(refs.len());
    for r in &refs {
        let h = hyps
            .remove(&r.id)
            .ok_or_else(|| Error::Input(format!("no hypothesis for `{}`", r.id)))?;
        pairs.push((r, h));
    }
    let units = |x: &[String]| -> Result<MixedUnitSeq> { Ok(to_mixed_units(&lex.vocab.encode(x)?, &lex.vocab)) };
    let ref_units = pairs.iter().map(|(r, _)| units(&r.target)).collect::<Result<Vec<_>>>()?;
    let hyp_units = pairs.iter().map(|(_, h)| units(&h.target)).collect::<Result<Vec<_>>>()?;
    for (seq, (_, h)) in hyp_units.iter().zip(&pairs) {
        for w in &seq.warnings {
            log::warn!("{}: {w}", h.id);
        }
    }
    let report = mer(&ref_units, &hyp_units)?;
    let unfinished = pairs.iter().filter(|(_, h)| !h.finished).count();

    let per_report = if pairs.iter().all(|(r, h)| r.phonemes.is_some() && h.phonemes.is_some()) {
        let ids = |x: &[String]| -> Result<Vec<usize>> { Ok(lex.inventory.parse(&x.join(" "))?.into_ids()) };
        let mut pr = Vec::with_capacity(pairs.len());
        let mut ph = Vec::with_capacity(pairs.len());
        for (r, h) in &pairs {
            pr.push(ids(r.phonemes.as_deref().unwrap_or_default())?);
            ph.push(ids(h.phonemes.as_deref().unwrap_or_default())?);
        }
        let skip = per_no_wb.then(|| lex.inventory.wb_id());
        Some(per(&pr, &ph, skip)?)
    } else {
        None
    };

    println!("{report}");
    if unfinished > 0 {
        println!("unfinished hypotheses: {unfinished}");
    }
    if let Some(p) = &per_report {
        println!("{p}");
    }
    let full = FullReport {
        mer: report,
        unfinished,
        per: per_report,
    };
    let text = serde_json::to_string_pretty(&full).expect("report serialises");
    println!("{text}");
    if let Some(path) = json {
        std::fs::write(path, &text).map_err(|e| Error::io(path, e))?;
    }
    Ok(())
}

#[derive(Serialize)]
struct AblationRow {
    system: &'static str,
    #[serde(flatten)]
    report: EvalReport,
}

fn ablate(args: &TrainArgs, init: &Path, beam: Option<usize>) -> Result<()> {
    let mut s = open_session(args, Stage::Joint)?;
    let (ckpt, model_cfg) = load_decoupled(init, &s.rc)?;
    let digest = ckpt.meta(META_A2P_DIGEST).map(str::to_string);
    let model = DecoupledModel::new(&model_cfg)?;
    let data = joint_data(&s.corpus);
    let opts = DecodeOptions {
        beam: beam.unwrap_or(s.rc.hp.decode_beam),
        ctc_beam: model_cfg.ctc_beam,
        n_candidates: model_cfg.n_candidates,
        scoring: s.rc.hp.scoring,
    };
    let variants = [
        (Ablation::Full, "full"),
        (Ablation::NoPel, "no-pel"),
        (Ablation::NoAel, "no-ael"),
    ];
    let mut rows = Vec::new();
    for (ablation, name) in variants {
        let mut store = ckpt.params.clone();
        let report = joint_finetune(
            &model,
            &mut store,
            digest.as_deref(),
            &data,
            dev_set(args, &s.corpus),
            ablation,
            &s.rc.hp,
            &mut s.log,
        )?;
        let (eval, _) = super::evaluate_decoupled(&model, &store, &s.corpus.test, &s.corpus.lexicon.vocab, ablation, &opts)?;
        save_stage(
            &args.out,
            &format!("joint-{name}.ckpt"),
            KIND_DECOUPLED,
            &model_cfg,
            store,
            &report,
            Some(&report.a2p_digest),
        )?;
        rows.push(AblationRow { system: name, report: eval });
    }
    write_resolved(&args.out, "ablate", &[table_of(&model_cfg)?, table_of(&s.rc.hp)?])?;
    println!("{:<8} {:>8} {:>8} {:>8}", "system", "MER", "CER(α)", "WER(β)");
    for r in &rows {
        println!(
            "{:<8} {:>7.2}% {:>7.2}% {:>7.2}%",
            r.system,
            100.0 * r.report.mer,
            100.0 * r.report.cer_alpha,
            100.0 * r.report.wer_beta
        );
    }
    let path = args.out.join("ablation.json");
    let text = serde_json::to_string_pretty(&rows).expect("rows serialise");
    std::fs::write(&path, text).map_err(|e| Error::io(&path, e))
}
