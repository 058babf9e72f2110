use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Tensor};
use crate::ctc::PhonemeSeq;
use crate::error::{Error, Result};
use crate::model::{Ablation, BaselineModel, DecoupledModel, EOS, SOS};
use crate::nn::{subsampled_len, Binder, ParamStore};
use crate::train::candidates_from_log_probs;

/// Next-token distribution of an autoregressive model.
pub trait StepScorer {
    /// Log-probabilities over the vocabulary for the token after `prefix`
    /// (which starts with the start marker).
    fn next_log_probs(&mut self, prefix: &[usize]) -> Result<Vec<f64>>;
}

/// How finished hypotheses are ranked.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Scoring {
    /// Log-probability divided by the number of emitted tokens.
    #[default]
    LengthNormalized,
    Raw,
}

impl std::str::FromStr for Scoring {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "length-normalized" | "norm" => Ok(Scoring::LengthNormalized),
            "raw" => Ok(Scoring::Raw),
            _ => Err(Error::Config(format!("unknown scoring `{s}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Hypothesis {
    /// Emitted tokens without start or end markers.
    pub tokens: Vec<usize>,
    /// Summed log-probability, end marker included when reached.
    pub log_prob: f64,
    /// False when the length limit was hit before the end marker.
    pub finished: bool,
}

impl Hypothesis {
    fn emitted(&self) -> usize {
        self.tokens.len() + usize::from(self.finished)
    }

    pub fn score(&self, scoring: Scoring) -> f64 {
        match scoring {
            Scoring::Raw => self.log_prob,
            Scoring::LengthNormalized => self.log_prob / self.emitted().max(1) as f64,
        }
    }
}

fn by_score_then_tokens(a: &(Vec<usize>, f64), b: &(Vec<usize>, f64)) -> Ordering {
    b.1.total_cmp(&a.1).then_with(|| a.0.cmp(&b.0))
}

/// Beam search from `[start]` for at most `max_len` emitted tokens.
///
/// Each step expands every live prefix by its best tokens and keeps the
/// best extensions overall, as many as there are open slots; an extension
/// ending in `end` retires and permanently takes its slot. The search stops
/// once all `beam` slots are retired, nothing is live, or the length limit
/// is reached. The best retired hypothesis under `scoring` wins; if none
/// retired the best live prefix is returned with `finished == false`.
pub fn beam_search(
    scorer: &mut dyn StepScorer,
    start: usize,
    end: usize,
    beam: usize,
    max_len: usize,
    scoring: Scoring,
) -> Result<Hypothesis> {
    if beam == 0 || max_len == 0 {
        return Err(Error::Config("beam and max_len must be positive".into()));
    }
    let mut live: Vec<(Vec<usize>, f64)> = vec![(vec![start], 0.0)];
    let mut done: Vec<Hypothesis> = Vec::new();
    for _ in 0..max_len {
        let open = beam - done.len();
        let mut ext: Vec<(Vec<usize>, f64)> = Vec::new();
        for (prefix, score) in &live {
            let lp = scorer.next_log_probs(prefix)?;
            let mut order: Vec<usize> = (0..lp.len()).collect();
            order.sort_by(|&a, &b| lp[b].total_cmp(&lp[a]).then(a.cmp(&b)));
            for &tok in order.iter().take(open) {
                let mut p = prefix.clone();
                p.push(tok);
                ext.push((p, score + lp[tok]));
            }
        }
        ext.sort_by(by_score_then_tokens);
        ext.truncate(open);
        live.clear();
        for (p, s) in ext {
            if p.last() == Some(&end) {
                done.push(Hypothesis {
                    tokens: p[1..p.len() - 1].to_vec(),
                    log_prob: s,
                    finished: true,
                });
            } else {
                live.push((p, s));
            }
        }
        if live.is_empty() || done.len() == beam {
            break;
        }
    }
    let pick = |hs: Vec<Hypothesis>| {
        hs.into_iter().max_by(|a, b| {
            a.score(scoring)
                .total_cmp(&b.score(scoring))
                .then_with(|| b.tokens.cmp(&a.tokens))
        })
    };
    if let Some(h) = pick(done) {
        return Ok(h);
    }
    let unfinished: Vec<Hypothesis> = live
        .into_iter()
        .map(|(p, s)| Hypothesis {
            tokens: p[1..].to_vec(),
            log_prob: s,
            finished: false,
        })
        .collect();
    log::warn!("beam search hit the length limit of {max_len} without an end marker");
    pick(unfinished).ok_or_else(|| Error::Contract("beam search produced no hypothesis".into()))
}

fn last_row_log_softmax(g: &mut Graph, logits: crate::autodiff::Var) -> Result<Vec<f64>> {
    let lp = g.log_softmax(logits)?;
    let t = g.value(lp);
    Ok(t.row(t.rows() - 1).to_vec())
}

/// Decoupled model scorer over fixed acoustic states and encoded candidates.
pub struct DecoupledScorer<'a> {
    model: &'a DecoupledModel,
    store: &'a ParamStore,
    acoustic: Option<Tensor>,
    encoded: Vec<Tensor>,
    ablation: Ablation,
}

impl<'a> DecoupledScorer<'a> {
    pub fn new(
        model: &'a DecoupledModel,
        store: &'a ParamStore,
        acoustic: Option<Tensor>,
        encoded: Vec<Tensor>,
        ablation: Ablation,
    ) -> Self {
        DecoupledScorer {
            model,
            store,
            acoustic,
            encoded,
            ablation,
        }
    }
}

impl StepScorer for DecoupledScorer<'_> {
    fn next_log_probs(&mut self, prefix: &[usize]) -> Result<Vec<f64>> {
        let mut g = Graph::eval();
        let mut p = Binder::frozen(self.store);
        let acoustic = self.acoustic.clone().map(|a| g.constant(a));
        let encoded: Vec<_> = self.encoded.iter().map(|e| g.constant(e.clone())).collect();
        let logits = self
            .model
            .decode_logits(&mut g, &mut p, prefix, acoustic, &encoded, self.ablation)?;
        last_row_log_softmax(&mut g, logits)
    }
}

pub struct BaselineScorer<'a> {
    model: &'a BaselineModel,
    store: &'a ParamStore,
    memory: Tensor,
}

impl<'a> BaselineScorer<'a> {
    pub fn new(model: &'a BaselineModel, store: &'a ParamStore, features: &Tensor) -> Result<Self> {
        let mut g = Graph::eval();
        let mut p = Binder::frozen(store);
        let m = model.encode(&mut g, &mut p, features)?;
        Ok(BaselineScorer {
            model,
            store,
            memory: g.value(m).clone(),
        })
    }
}

impl StepScorer for BaselineScorer<'_> {
    fn next_log_probs(&mut self, prefix: &[usize]) -> Result<Vec<f64>> {
        let mut g = Graph::eval();
        let mut p = Binder::frozen(self.store);
        let m = g.constant(self.memory.clone());
        let logits = self.model.decode_logits(&mut g, &mut p, prefix, m)?;
        last_row_log_softmax(&mut g, logits)
    }
}

/// Decoding knobs shared by both systems.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DecodeOptions {
    pub beam: usize,
    pub ctc_beam: usize,
    pub n_candidates: usize,
    pub scoring: Scoring,
}

/// Output units cannot outnumber phonemes, which cannot outnumber encoder
/// frames; one more step leaves room for the end marker.
pub fn max_decode_len(frames: usize) -> usize {
    subsampled_len(frames) + 1
}

#[derive(Clone, Debug, PartialEq)]
pub struct DecoupledOutput {
    pub hypothesis: Hypothesis,
    pub candidates: Vec<PhonemeSeq>,
}

/// A2P, candidate generation, phoneme encoding and fusion decoding for one
/// utterance.
pub fn decode_decoupled(
    model: &DecoupledModel,
    store: &ParamStore,
    features: &Tensor,
    ablation: Ablation,
    opts: &DecodeOptions,
) -> Result<DecoupledOutput> {
    let mut g = Graph::eval();
    let mut p = Binder::frozen(store);
    let a2p = model.a2p_forward(&mut g, &mut p, features)?;
    let candidates: Vec<PhonemeSeq> = candidates_from_log_probs(g.value(a2p.log_probs), opts.ctc_beam, opts.n_candidates)?
        .sequences()
        .cloned()
        .collect();
    if candidates.is_empty() && ablation != Ablation::NoPel {
        log::warn!("no phoneme candidates; emitting an empty hypothesis");
        return Ok(DecoupledOutput {
            hypothesis: Hypothesis {
                tokens: Vec::new(),
                log_prob: f64::NEG_INFINITY,
                finished: false,
            },
            candidates,
        });
    }
    let acoustic = match ablation {
        Ablation::NoAel => None,
        _ => Some(g.value(a2p.hidden).clone()),
    };
    let encoded = match ablation {
        Ablation::NoPel => Vec::new(),
        _ => {
            let vars = model.encode_candidates(&mut g, &mut p, &candidates)?;
            vars.iter().map(|&v| g.value(v).clone()).collect()
        }
    };
    let mut scorer = DecoupledScorer::new(model, store, acoustic, encoded, ablation);
    let hypothesis = beam_search(
        &mut scorer,
        SOS,
        EOS,
        opts.beam,
        max_decode_len(features.rows()),
        opts.scoring,
    )?;
    Ok(DecoupledOutput { hypothesis, candidates })
}

pub fn decode_baseline(model: &BaselineModel, store: &ParamStore, features: &Tensor, opts: &DecodeOptions) -> Result<Hypothesis> {
    let mut scorer = BaselineScorer::new(model, store, features)?;
    beam_search(
        &mut scorer,
        SOS,
        EOS,
        opts.beam,
        max_decode_len(features.rows()),
        opts.scoring,
    )
}
