use std::collections::{BTreeSet, VecDeque};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::average::average_stores;
use super::log::{EpochRow, MetricsLog, StepRow};
use super::optim::{clip_global_norm, noam_lr, Adam};
use super::specaug::spec_augment;
use super::{Hyperparams, Stage};
use crate::autodiff::{Graph, Mode, Tensor, Var};
use crate::ctc::{ctc_feasible, ctc_loss, greedy_decode, prefix_beam_search_nbest, NBestList, PhonemeSeq};
use crate::data::{derive_seed, TargetVocab, TextPair, Utterance};
use crate::error::{Error, Result};
use crate::eval::{a2p_per, evaluate_baseline, evaluate_decoupled, DecodeOptions};
use crate::model::{is_a2p_param, Ablation, BaselineModel, DecoupledModel, A2P_PREFIXES, PAD};
use crate::nn::{label_smoothing_loss, Binder, ParamStore};

/// Held-out utterances scored at the end of every epoch.
#[derive(Clone, Copy, Debug)]
pub struct DevSet<'a> {
    pub utts: &'a [Utterance],
    pub vocab: &'a TargetVocab,
}

/// Optimiser state of one stage.
#[derive(Clone, Debug)]
pub struct TrainState {
    pub stage: Stage,
    pub step: u64,
    pub optimizer: Adam,
    pub seed: u64,
    pub frozen: BTreeSet<String>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct StageReport {
    pub stage: Stage,
    pub steps: u64,
    pub epoch_loss: Vec<f64>,
    pub dev_metric: Vec<Option<f64>>,
    /// Utterance visits skipped (infeasible CTC length or no candidates).
    pub skipped: usize,
    /// Digest of the A2P parameters after the stage.
    pub a2p_digest: String,
}

fn digest_where(store: &ParamStore, keep: impl Fn(&str) -> bool) -> String {
    let mut s = ParamStore::new();
    for (n, t) in store.iter().filter(|(n, _)| keep(n)) {
        s.insert(n.clone(), t.clone());
    }
    s.digest()
}

pub(crate) fn a2p_digest(store: &ParamStore) -> String {
    store.subset(&A2P_PREFIXES).digest()
}

trait Task {
    fn stage(&self) -> Stage;
    fn d_model(&self) -> usize;
    fn lengths(&self) -> Vec<usize>;
    fn trainable(&self, name: &str) -> bool;
    fn metric(&self) -> &'static str;
    fn epoch_start(&mut self, _store: &ParamStore) -> Result<()> {
        Ok(())
    }
    /// Loss of item `i`, or `None` to skip it.
    fn loss(&self, g: &mut Graph, p: &mut Binder, i: usize, seed: u64) -> Result<Option<Var>>;
    fn dev(&self, store: &ParamStore) -> Result<Option<f64>>;
}

fn run(task: &mut dyn Task, store: &mut ParamStore, hp: &Hyperparams, log: &mut MetricsLog) -> Result<StageReport> {
    hp.validate()?;
    let stage = task.stage();
    let tag = stage.tag() * 16;
    let lengths = task.lengths();
    if lengths.is_empty() {
        return Err(Error::Input(format!("{stage}: empty training set")));
    }
    let mut order: Vec<usize> = (0..lengths.len()).collect();
    order.sort_by_key(|&i| (lengths[i], i));
    let batches: Vec<&[usize]> = order.chunks(hp.batch_size).collect();

    let mut state = TrainState {
        stage,
        step: 0,
        optimizer: Adam::default(),
        seed: hp.seed,
        frozen: store.names().filter(|n| !task.trainable(n)).cloned().collect(),
    };
    let frozen_digest = digest_where(store, |n| state.frozen.contains(n));
    let mut report = StageReport {
        stage,
        steps: 0,
        epoch_loss: Vec::new(),
        dev_metric: Vec::new(),
        skipped: 0,
        a2p_digest: String::new(),
    };
    let mut snapshots: VecDeque<ParamStore> = VecDeque::new();
    let n = lengths.len() as u64;

    // The dev score after the last epoch is for the raw parameters, before
    // snapshot averaging.
    for epoch in 0..hp.epochs(stage) {
        task.epoch_start(store)?;
        let mut schedule: Vec<usize> = (0..batches.len()).collect();
        schedule.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(hp.seed, tag + 1, epoch as u64)));
        let (mut loss_sum, mut counted) = (0.0, 0usize);
        for &b in &schedule {
            let mut g = Graph::new(Mode::Train, derive_seed(hp.seed, tag + 2, state.step));
            let mut p = Binder::with_trainable(store, |name| task.trainable(name));
            let mut losses = Vec::with_capacity(batches[b].len());
            for &i in batches[b] {
                let seed = derive_seed(hp.seed, tag + 3, epoch as u64 * n + i as u64);
                match task.loss(&mut g, &mut p, i, seed)? {
                    Some(l) => losses.push(l),
                    None => report.skipped += 1,
                }
            }
            if losses.is_empty() {
                continue;
            }
            let mut total = losses[0];
            for &l in &losses[1..] {
                total = g.add(total, l)?;
            }
            let mean = g.scale(total, 1.0 / losses.len() as f64);
            let value = g.value(mean).item();
            if !value.is_finite() {
                return Err(Error::Domain {
                    op: "training",
                    detail: format!("{stage}: non-finite loss {value} at step {}", state.step + 1),
                });
            }
            g.backward(mean)?;
            let mut grads = p.gradients(&g);
            drop(p);
            clip_global_norm(&mut grads, hp.clip_norm);
            state.step += 1;
            let lr = hp.lr_scale * noam_lr(state.step, task.d_model(), hp.warmup_steps);
            state.optimizer.step(store, &grads, lr, &state.frozen)?;
            log.step(StepRow {
                step: state.step,
                stage,
                lr,
                loss: value,
            })?;
            loss_sum += value;
            counted += 1;
        }
        if digest_where(store, |n| state.frozen.contains(n)) != frozen_digest {
            return Err(Error::Contract(format!("{stage}: frozen parameters changed in epoch {epoch}")));
        }
        let train_loss = if counted > 0 { loss_sum / counted as f64 } else { f64::NAN };
        let last = epoch + 1 == hp.epochs(stage);
        let due = last || (hp.dev_every > 0 && (epoch + 1) % hp.dev_every == 0);
        let dev = if due { task.dev(store)? } else { None };
        log.epoch(EpochRow {
            stage,
            epoch,
            train_loss,
            metric: task.metric(),
            value: dev,
        })?;
        report.epoch_loss.push(train_loss);
        report.dev_metric.push(dev);
        let mut snap = ParamStore::new();
        for (name, t) in store.iter().filter(|(n, _)| !state.frozen.contains(*n)) {
            snap.insert(name.clone(), t.clone());
        }
        snapshots.push_back(snap);
        if snapshots.len() > hp.avg_last {
            snapshots.pop_front();
        }
    }
    if snapshots.len() > 1 {
        let refs: Vec<&ParamStore> = snapshots.iter().collect();
        store.merge(average_stores(&refs)?);
    }
    report.steps = state.step;
    report.a2p_digest = a2p_digest(store);
    Ok(report)
}

/// Up to `n` distinct non-empty phoneme candidates from frame
/// log-probabilities. An empty beam result falls back to the greedy path;
/// if that is empty too the list is empty.
pub fn candidates_from_log_probs(log_probs: &Tensor, beam: usize, n: usize) -> Result<NBestList> {
    let mut nbest = prefix_beam_search_nbest(log_probs, beam, n)?;
    nbest.candidates.retain(|(c, _)| !c.is_empty());
    if nbest.is_empty() {
        let greedy = greedy_decode(log_probs);
        if !greedy.is_empty() {
            let score = (0..log_probs.rows())
                .map(|t| log_probs.row(t).iter().copied().fold(f64::NEG_INFINITY, f64::max))
                .sum();
            nbest.candidates.push((greedy, score));
        }
    }
    Ok(nbest)
}

/// Runs the A2P network on one utterance and returns its N-best phoneme
/// candidates.
pub fn generate_candidates(
    model: &DecoupledModel,
    store: &ParamStore,
    features: &Tensor,
    beam: usize,
    n: usize,
) -> Result<NBestList> {
    let mut g = Graph::eval();
    let mut p = Binder::frozen(store);
    let out = model.a2p_forward(&mut g, &mut p, features)?;
    candidates_from_log_probs(g.value(out.log_probs), beam, n)
}

struct A2pTask<'a> {
    model: &'a DecoupledModel,
    data: &'a [Utterance],
    dev: Option<DevSet<'a>>,
    hp: &'a Hyperparams,
}

impl Task for A2pTask<'_> {
    fn stage(&self) -> Stage {
        Stage::A2pPretrain
    }
    fn d_model(&self) -> usize {
        self.model.config.d_model
    }
    fn lengths(&self) -> Vec<usize> {
        self.data.iter().map(|u| u.features.len()).collect()
    }
    fn trainable(&self, name: &str) -> bool {
        is_a2p_param(name)
    }
    fn metric(&self) -> &'static str {
        "dev_per"
    }
    fn loss(&self, g: &mut Graph, p: &mut Binder, i: usize, seed: u64) -> Result<Option<Var>> {
        let u = &self.data[i];
        let feats = spec_augment(&u.features.frames, &self.hp.spec_augment(), seed);
        let out = self.model.a2p_forward(g, p, &feats)?;
        let frames = g.shape(out.log_probs)[0];
        if !ctc_feasible(frames, u.phonemes.ids()) {
            log::warn!(
                "{}: {} phonemes do not fit in {frames} encoder frames; skipped",
                u.id,
                u.phonemes.len()
            );
            return Ok(None);
        }
        ctc_loss(g, out.log_probs, &u.phonemes).map(Some)
    }
    fn dev(&self, store: &ParamStore) -> Result<Option<f64>> {
        let Some(dev) = self.dev else { return Ok(None) };
        Ok(Some(a2p_per(self.model, store, dev.utts, None)?.per))
    }
}

/// CTC pretraining of the A2P parameters; everything else stays fixed.
pub fn pretrain_a2p(
    model: &DecoupledModel,
    store: &mut ParamStore,
    data: &[Utterance],
    dev: Option<DevSet>,
    hp: &Hyperparams,
    log: &mut MetricsLog,
) -> Result<StageReport> {
    run(&mut A2pTask { model, data, dev, hp }, store, hp, log)
}

fn dev_options(model_cfg: &crate::model::ModelConfig, hp: &Hyperparams) -> DecodeOptions {
    DecodeOptions {
        beam: hp.dev_beam,
        ctc_beam: model_cfg.ctc_beam,
        n_candidates: model_cfg.n_candidates,
        scoring: hp.scoring,
    }
}

struct P2tTask<'a> {
    model: &'a DecoupledModel,
    data: &'a [TextPair],
    dev: Option<DevSet<'a>>,
    hp: &'a Hyperparams,
}

impl Task for P2tTask<'_> {
    fn stage(&self) -> Stage {
        Stage::P2tPretrain
    }
    fn d_model(&self) -> usize {
        self.model.config.d_model
    }
    fn lengths(&self) -> Vec<usize> {
        self.data.iter().map(|t| t.phonemes.len()).collect()
    }
    fn trainable(&self, name: &str) -> bool {
        !is_a2p_param(name)
    }
    fn metric(&self) -> &'static str {
        "dev_mer"
    }
    fn loss(&self, g: &mut Graph, p: &mut Binder, i: usize, _seed: u64) -> Result<Option<Var>> {
        let t = &self.data[i];
        let encoded = self.model.encode_candidates(g, p, std::slice::from_ref(&t.phonemes))?;
        let logits = self
            .model
            .decode_logits(g, p, &t.target.decoder_input(), None, &encoded, Ablation::Full)?;
        label_smoothing_loss(g, logits, &t.target.decoder_output(), self.model.config.label_smoothing, PAD).map(Some)
    }
    fn dev(&self, store: &ParamStore) -> Result<Option<f64>> {
        let Some(dev) = self.dev else { return Ok(None) };
        let opts = dev_options(&self.model.config, self.hp);
        Ok(Some(evaluate_decoupled(self.model, store, dev.utts, dev.vocab, Ablation::NoAel, &opts)?.0.mer))
    }
}

/// Text-only training of the phoneme encoder and decoder: the lexicon
/// pronunciation is the single candidate and the acoustic half of the
/// fusion input is zeros. A2P parameters stay fixed.
pub fn pretrain_p2t(
    model: &DecoupledModel,
    store: &mut ParamStore,
    data: &[TextPair],
    dev: Option<DevSet>,
    hp: &Hyperparams,
    log: &mut MetricsLog,
) -> Result<StageReport> {
    run(&mut P2tTask { model, data, dev, hp }, store, hp, log)
}

struct JointTask<'a> {
    model: &'a DecoupledModel,
    data: &'a [Utterance],
    dev: Option<DevSet<'a>>,
    hp: &'a Hyperparams,
    ablation: Ablation,
    /// Per utterance: acoustic states from the frozen A2P and candidates.
    cache: Vec<(Option<Tensor>, Vec<PhonemeSeq>)>,
}

impl Task for JointTask<'_> {
    fn stage(&self) -> Stage {
        Stage::Joint
    }
    fn d_model(&self) -> usize {
        self.model.config.d_model
    }
    fn lengths(&self) -> Vec<usize> {
        self.data.iter().map(|u| u.features.len()).collect()
    }
    fn trainable(&self, name: &str) -> bool {
        self.hp.unfreeze_a2p || !is_a2p_param(name)
    }
    fn metric(&self) -> &'static str {
        "dev_mer"
    }
    fn epoch_start(&mut self, store: &ParamStore) -> Result<()> {
        let cfg = &self.model.config;
        self.cache.clear();
        for u in self.data {
            let mut g = Graph::eval();
            let mut p = Binder::frozen(store);
            let out = self.model.a2p_forward(&mut g, &mut p, &u.features.frames)?;
            let nbest = candidates_from_log_probs(g.value(out.log_probs), cfg.ctc_beam, cfg.n_candidates)?;
            if nbest.is_empty() && self.ablation != Ablation::NoPel {
                log::warn!("{}: no phoneme candidates; skipped this epoch", u.id);
            }
            let hidden = (!self.hp.unfreeze_a2p).then(|| g.value(out.hidden).clone());
            self.cache.push((hidden, nbest.sequences().cloned().collect()));
        }
        Ok(())
    }
    fn loss(&self, g: &mut Graph, p: &mut Binder, i: usize, seed: u64) -> Result<Option<Var>> {
        let u = &self.data[i];
        let (hidden, candidates) = &self.cache[i];
        if candidates.is_empty() && self.ablation != Ablation::NoPel {
            return Ok(None);
        }
        let acoustic = match (self.ablation, hidden) {
            (Ablation::NoAel, _) => None,
            (_, Some(h)) => Some(g.constant(h.clone())),
            (_, None) => {
                let feats = spec_augment(&u.features.frames, &self.hp.spec_augment(), seed);
                Some(self.model.a2p_forward(g, p, &feats)?.hidden)
            }
        };
        let encoded = match self.ablation {
            Ablation::NoPel => Vec::new(),
            _ => self.model.encode_candidates(g, p, candidates)?,
        };
        let logits = self
            .model
            .decode_logits(g, p, &u.target.decoder_input(), acoustic, &encoded, self.ablation)?;
        label_smoothing_loss(g, logits, &u.target.decoder_output(), self.model.config.label_smoothing, PAD).map(Some)
    }
    fn dev(&self, store: &ParamStore) -> Result<Option<f64>> {
        let Some(dev) = self.dev else { return Ok(None) };
        let opts = dev_options(&self.model.config, self.hp);
        Ok(Some(evaluate_decoupled(self.model, store, dev.utts, dev.vocab, self.ablation, &opts)?.0.mer))
    }
}

/// Fine-tunes the phoneme encoder and fusion decoder on paired data with
/// candidates regenerated from the A2P network at every epoch.
///
/// `a2p_digest` must be the digest recorded when A2P pretraining finished
/// and must match the current A2P parameters. With `unfreeze_a2p` the A2P
/// network is trained too and its states are recomputed every step.
pub fn joint_finetune(
    model: &DecoupledModel,
    store: &mut ParamStore,
    a2p_digest_at_pretrain: Option<&str>,
    data: &[Utterance],
    dev: Option<DevSet>,
    ablation: Ablation,
    hp: &Hyperparams,
    log: &mut MetricsLog,
) -> Result<StageReport> {
    let expected = a2p_digest_at_pretrain
        .ok_or_else(|| Error::Contract("joint fine-tuning needs a pretrained A2P (no A2P digest recorded)".into()))?;
    if a2p_digest(store) != expected {
        return Err(Error::Contract(
            "A2P parameters do not match the pretrained digest; run A2P pretraining first".into(),
        ));
    }
    let mut task = JointTask {
        model,
        data,
        dev,
        hp,
        ablation,
        cache: Vec::new(),
    };
    run(&mut task, store, hp, log)
}

struct BaselineTask<'a> {
    model: &'a BaselineModel,
    data: &'a [Utterance],
    dev: Option<DevSet<'a>>,
    hp: &'a Hyperparams,
}

impl Task for BaselineTask<'_> {
    fn stage(&self) -> Stage {
        Stage::Baseline
    }
    fn d_model(&self) -> usize {
        self.model.config.d_model
    }
    fn lengths(&self) -> Vec<usize> {
        self.data.iter().map(|u| u.features.len()).collect()
    }
    fn trainable(&self, _name: &str) -> bool {
        true
    }
    fn metric(&self) -> &'static str {
        "dev_mer"
    }
    fn loss(&self, g: &mut Graph, p: &mut Binder, i: usize, seed: u64) -> Result<Option<Var>> {
        let u = &self.data[i];
        let feats = spec_augment(&u.features.frames, &self.hp.spec_augment(), seed);
        let logits = self.model.forward(g, p, &feats, &u.target.decoder_input())?;
        label_smoothing_loss(g, logits, &u.target.decoder_output(), self.model.config.label_smoothing, PAD).map(Some)
    }
    fn dev(&self, store: &ParamStore) -> Result<Option<f64>> {
        let Some(dev) = self.dev else { return Ok(None) };
        let opts = dev_options(&self.model.config, self.hp);
        Ok(Some(evaluate_baseline(self.model, store, dev.utts, dev.vocab, &opts)?.0.mer))
    }
}

/// Trains the single-network encoder-decoder end to end.
pub fn train_baseline(
    model: &BaselineModel,
    store: &mut ParamStore,
    data: &[Utterance],
    dev: Option<DevSet>,
    hp: &Hyperparams,
    log: &mut MetricsLog,
) -> Result<StageReport> {
    run(&mut BaselineTask { model, data, dev, hp }, store, hp, log)
}
