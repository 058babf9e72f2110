use std::collections::HashSet;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::features::{synthesize_features, Acoustics};
use super::lexicon::Lexicon;
use super::vocab::Lang;
use super::SynthConfig;
use crate::autodiff::Tensor;
use crate::ctc::PhonemeSeq;
use crate::error::{Error, Result};
use crate::model::{AcousticFeatures, TargetSeq};

/// Language mix of a sentence.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum MixTag {
    #[serde(rename = "alpha")]
    Alpha,
    #[serde(rename = "beta")]
    Beta,
    #[serde(rename = "cs")]
    CodeSwitch,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Utterance {
    pub id: String,
    pub mix: MixTag,
    pub target: TargetSeq,
    pub phonemes: PhonemeSeq,
    pub features: AcousticFeatures,
}

/// Text with its lexicon pronunciation, no audio.
#[derive(Clone, Debug, PartialEq)]
pub struct TextPair {
    pub id: String,
    pub target: TargetSeq,
    pub phonemes: PhonemeSeq,
}

impl From<&Utterance> for TextPair {
    fn from(u: &Utterance) -> Self {
        TextPair {
            id: u.id.clone(),
            target: u.target.clone(),
            phonemes: u.phonemes.clone(),
        }
    }
}

#[derive(Clone, Debug)]
pub struct Corpus {
    pub config: SynthConfig,
    pub lexicon: Lexicon,
    pub acoustics: Acoustics,
    pub train: Vec<Utterance>,
    pub dev: Vec<Utterance>,
    pub test: Vec<Utterance>,
    pub text: Vec<TextPair>,
}

impl Corpus {
    /// Training utterances whose mix is one of `mixes`.
    pub fn train_subset(&self, mixes: &[MixTag]) -> Vec<Utterance> {
        self.train.iter().filter(|u| mixes.contains(&u.mix)).cloned().collect()
    }

    /// Writes manifests, the lexicon and the corpus configuration to `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        write_manifest(&dir.join("train.jsonl"), &self.train, &self.lexicon)?;
        write_manifest(&dir.join("dev.jsonl"), &self.dev, &self.lexicon)?;
        write_manifest(&dir.join("test.jsonl"), &self.test, &self.lexicon)?;
        write_text_manifest(&dir.join("text.jsonl"), &self.text, &self.lexicon)?;
        let lex = dir.join("lexicon.txt");
        std::fs::write(&lex, self.lexicon.to_text()).map_err(|e| Error::io(&lex, e))?;
        let cfg = dir.join("corpus.toml");
        let text = toml::to_string(&self.config).map_err(|e| Error::Config(e.to_string()))?;
        std::fs::write(&cfg, text).map_err(|e| Error::io(&cfg, e))
    }

    /// Reads a corpus written by [`Corpus::write`]. The lexicon file must
    /// match the one the stored configuration generates.
    pub fn load(dir: &Path) -> Result<Self> {
        let cfg_path = dir.join("corpus.toml");
        let text = std::fs::read_to_string(&cfg_path).map_err(|e| Error::io(&cfg_path, e))?;
        let config: SynthConfig =
            toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", cfg_path.display())))?;
        let lexicon = Lexicon::generate(&config)?;
        let lex_path = dir.join("lexicon.txt");
        let lex_text = std::fs::read_to_string(&lex_path).map_err(|e| Error::io(&lex_path, e))?;
        if lex_text != lexicon.to_text() {
            return Err(Error::Input(format!(
                "{} does not match the lexicon generated from corpus.toml",
                lex_path.display()
            )));
        }
        Ok(Corpus {
            acoustics: Acoustics::generate(&config)?,
            train: read_manifest(&dir.join("train.jsonl"), &lexicon)?,
            dev: read_manifest(&dir.join("dev.jsonl"), &lexicon)?,
            test: read_manifest(&dir.join("test.jsonl"), &lexicon)?,
            text: read_text_manifest(&dir.join("text.jsonl"), &lexicon)?,
            config,
            lexicon,
        })
    }
}

/// Mixes a base seed with a tag and an index into an independent seed.
pub fn derive_seed(base: u64, tag: u64, index: u64) -> u64 {
    let mut z = base ^ tag.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ index.wrapping_mul(0xD1B5_4A32_D192_ED03);
    // splitmix64 finaliser
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Uniformly sampled sentence of `min_units..=max_units` mixed units. A β
/// unit is a whole word and contributes all of its pieces. Code-switching
/// sentences contain at least one unit of each language.
pub fn sample_sentence(lexicon: &Lexicon, seed: u64, mix: MixTag, min_units: usize, max_units: usize) -> Result<TargetSeq> {
    if min_units == 0 || max_units < min_units || (mix == MixTag::CodeSwitch && max_units < 2) {
        return Err(Error::Config(format!("bad sentence length range {min_units}..={max_units} for {mix:?}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let len = rng.random_range(min_units..=max_units);
    loop {
        let langs: Vec<Lang> = (0..len)
            .map(|_| match mix {
                MixTag::Alpha => Lang::Alpha,
                MixTag::Beta => Lang::Beta,
                MixTag::CodeSwitch => {
                    if rng.random_bool(0.5) {
                        Lang::Alpha
                    } else {
                        Lang::Beta
                    }
                }
            })
            .collect();
        if mix == MixTag::CodeSwitch && !(langs.contains(&Lang::Alpha) && langs.contains(&Lang::Beta)) {
            continue;
        }
        let mut units = Vec::new();
        for lang in langs {
            match lang {
                Lang::Alpha => units.push(lexicon.alpha.choose(&mut rng).expect("α units").unit),
                Lang::Beta => units.extend(&lexicon.beta.choose(&mut rng).expect("β words").pieces),
            }
        }
        return TargetSeq::new(units, lexicon.vocab.len());
    }
}

const SPLIT_TEST: u64 = 1;
const SPLIT_DEV: u64 = 2;
const SPLIT_TEXT: u64 = 3;
const SPLIT_TRAIN: u64 = 4;

struct Builder<'a> {
    cfg: &'a SynthConfig,
    lexicon: &'a Lexicon,
    acoustics: &'a Acoustics,
    seen: HashSet<Vec<usize>>,
}

impl Builder<'_> {
    fn fresh_sentence(&mut self, split: u64, index: u64, mix: MixTag) -> Result<TargetSeq> {
        for attempt in 0..10_000u64 {
            let seed = derive_seed(self.cfg.seed, split << 8 | 1, index << 16 | attempt);
            let s = sample_sentence(self.lexicon, seed, mix, self.cfg.min_units, self.cfg.max_units)?;
            if self.seen.insert(s.units().to_vec()) {
                return Ok(s);
            }
        }
        Err(Error::Config("sentence space exhausted; lower corpus sizes or widen lengths".into()))
    }

    fn utterance(&mut self, split: u64, index: usize, mix: MixTag, prefix: &str) -> Result<Utterance> {
        let target = self.fresh_sentence(split, index as u64, mix)?;
        let (ids, tones) = self.lexicon.text_to_phonemes_with_tones(&target)?;
        let phonemes = PhonemeSeq::new(ids)?;
        let seed = derive_seed(self.cfg.seed, split << 8 | 2, index as u64);
        let (frames, _) = synthesize_features(
            self.acoustics,
            &phonemes,
            Some(&tones),
            seed,
            self.cfg.noise_sigma,
            self.cfg.duration_scale,
        )?;
        let id = format!("{prefix}-{index:05}");
        Ok(Utterance {
            features: AcousticFeatures::new(id.clone(), frames)?,
            id,
            mix,
            target,
            phonemes,
        })
    }
}

/// Generates the whole corpus from `cfg`. Sentences are unique across all
/// splits; dev, test and text-only sentences are code-switching.
pub fn build_corpus(cfg: &SynthConfig) -> Result<Corpus> {
    cfg.validate()?;
    let lexicon = Lexicon::generate(cfg)?;
    let acoustics = Acoustics::generate(cfg)?;
    let mut b = Builder {
        cfg,
        lexicon: &lexicon,
        acoustics: &acoustics,
        seen: HashSet::new(),
    };
    let test = (0..cfg.n_test)
        .map(|i| b.utterance(SPLIT_TEST, i, MixTag::CodeSwitch, "test"))
        .collect::<Result<Vec<_>>>()?;
    let dev = (0..cfg.n_dev)
        .map(|i| b.utterance(SPLIT_DEV, i, MixTag::CodeSwitch, "dev"))
        .collect::<Result<Vec<_>>>()?;
    let text = (0..cfg.n_text)
        .map(|i| {
            let target = b.fresh_sentence(SPLIT_TEXT, i as u64, MixTag::CodeSwitch)?;
            Ok(TextPair {
                id: format!("text-{i:05}"),
                phonemes: lexicon.text_to_phonemes(&target)?,
                target,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let mut train = Vec::new();
    let plan = [
        (MixTag::CodeSwitch, cfg.n_cs_train, "cs"),
        (MixTag::Alpha, cfg.n_alpha_train, "alpha"),
        (MixTag::Beta, cfg.n_beta_train, "beta"),
    ];
    let mut index = 0;
    for (mix, n, prefix) in plan {
        for _ in 0..n {
            train.push(b.utterance(SPLIT_TRAIN, index, mix, prefix)?);
            index += 1;
        }
    }
    Ok(Corpus {
        config: cfg.clone(),
        lexicon,
        acoustics,
        train,
        dev,
        test,
        text,
    })
}

/// One manifest line.
#[derive(Debug, Serialize, Deserialize)]
struct Record {
    id: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    mix: Option<MixTag>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    features: Option<Vec<Vec<f64>>>,
    phonemes: Vec<String>,
    target: Vec<String>,
    langs: Vec<Lang>,
}

fn record(id: &str, mix: Option<MixTag>, features: Option<&Tensor>, target: &TargetSeq, phonemes: &PhonemeSeq, lex: &Lexicon) -> Record {
    Record {
        id: id.to_string(),
        mix,
        features: features.map(|f| (0..f.rows()).map(|i| f.row(i).to_vec()).collect()),
        phonemes: phonemes
            .ids()
            .iter()
            .map(|&p| lex.inventory.symbol(p).unwrap_or("?").to_string())
            .collect(),
        target: lex.vocab.decode(target.units()),
        langs: target
            .units()
            .iter()
            .map(|&u| lex.vocab.lang(u).unwrap_or(Lang::Alpha))
            .collect(),
    }
}

fn write_lines(path: &Path, records: impl Iterator<Item = Record>) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let f = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(f);
    for r in records {
        serde_json::to_writer(&mut w, &r).map_err(|e| Error::Json {
            path: path.into(),
            line: 0,
            source: e,
        })?;
        w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

fn read_lines(path: &Path) -> Result<Vec<(usize, Record)>> {
    let f = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(f).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let r: Record = serde_json::from_str(&line).map_err(|e| Error::Json {
            path: path.into(),
            line: i + 1,
            source: e,
        })?;
        out.push((i + 1, r));
    }
    Ok(out)
}

/// Parses a record's text fields and checks them against the lexicon.
fn parse_record(path: &Path, line: usize, r: &Record, lex: &Lexicon) -> Result<(TargetSeq, PhonemeSeq)> {
    let at = |m: String| Error::Input(format!("{}:{line}: {m}", path.display()));
    let target = TargetSeq::new(lex.vocab.encode(&r.target)?, lex.vocab.len()).map_err(|e| at(e.to_string()))?;
    let phonemes = lex.inventory.parse(&r.phonemes.join(" "))?;
    if r.langs.len() != r.target.len() {
        return Err(at("langs and target differ in length".into()));
    }
    for (&u, &l) in target.units().iter().zip(&r.langs) {
        if lex.vocab.lang(u) != Some(l) {
            return Err(at(format!("language tag of `{}` is wrong", lex.vocab.unit(u).unwrap_or("?"))));
        }
    }
    if lex.text_to_phonemes(&target)? != phonemes {
        return Err(at("phonemes do not match the lexicon pronunciation of the target".into()));
    }
    Ok((target, phonemes))
}

pub fn write_manifest(path: &Path, utts: &[Utterance], lexicon: &Lexicon) -> Result<()> {
    write_lines(
        path,
        utts.iter()
            .map(|u| record(&u.id, Some(u.mix), Some(&u.features.frames), &u.target, &u.phonemes, lexicon)),
    )
}

pub fn read_manifest(path: &Path, lexicon: &Lexicon) -> Result<Vec<Utterance>> {
    read_lines(path)?
        .into_iter()
        .map(|(line, r)| {
            let (target, phonemes) = parse_record(path, line, &r, lexicon)?;
            let rows = r
                .features
                .as_ref()
                .ok_or_else(|| Error::Input(format!("{}:{line}: no features", path.display())))?;
            let frames = Tensor::from_rows(rows)?;
            Ok(Utterance {
                features: AcousticFeatures::new(r.id.clone(), frames)?,
                id: r.id,
                mix: r.mix.unwrap_or(MixTag::CodeSwitch),
                target,
                phonemes,
            })
        })
        .collect()
}

pub fn write_text_manifest(path: &Path, pairs: &[TextPair], lexicon: &Lexicon) -> Result<()> {
    write_lines(
        path,
        pairs.iter().map(|p| record(&p.id, None, None, &p.target, &p.phonemes, lexicon)),
    )
}

pub fn read_text_manifest(path: &Path, lexicon: &Lexicon) -> Result<Vec<TextPair>> {
    read_lines(path)?
        .into_iter()
        .map(|(line, r)| {
            let (target, phonemes) = parse_record(path, line, &r, lexicon)?;
            Ok(TextPair {
                id: r.id,
                target,
                phonemes,
            })
        })
        .collect()
}
