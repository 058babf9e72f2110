//! Scoring (edit distance, mixed error rate, phoneme error rate), beam
//! decoding, and the command-line front end.

mod cli;
mod decode;
mod metrics;

#[cfg(test)]
mod tests;

pub use cli::run_cli;
pub use decode::{
    beam_search, decode_baseline, decode_decoupled, max_decode_len, BaselineScorer, DecodeOptions, DecoupledOutput,
    DecoupledScorer, Hypothesis, Scoring, StepScorer,
};
pub use metrics::{
    align, counts, edit_distance, mer, per, to_mixed_units, EditCounts, EditOp, EvalReport, MixedUnit, MixedUnitSeq,
    PerReport,
};

use crate::autodiff::Graph;
use crate::ctc::greedy_decode;
use crate::data::{TargetVocab, Utterance};
use crate::error::Result;
use crate::model::{Ablation, BaselineModel, DecoupledModel};
use crate::nn::{Binder, ParamStore};

/// Greedy A2P phoneme error rate; `skip` drops one id (usually `<wb>`)
/// from both sides.
pub fn a2p_per(model: &DecoupledModel, store: &ParamStore, utts: &[Utterance], skip: Option<usize>) -> Result<PerReport> {
    let mut refs = Vec::with_capacity(utts.len());
    let mut hyps = Vec::with_capacity(utts.len());
    for u in utts {
        let mut g = Graph::eval();
        let mut p = Binder::frozen(store);
        let out = model.a2p_forward(&mut g, &mut p, &u.features.frames)?;
        hyps.push(greedy_decode(g.value(out.log_probs)).into_ids());
        refs.push(u.phonemes.ids().to_vec());
    }
    per(&refs, &hyps, skip)
}

fn score(utts: &[Utterance], hyps: &[Hypothesis], vocab: &TargetVocab) -> Result<EvalReport> {
    let refs: Vec<MixedUnitSeq> = utts.iter().map(|u| to_mixed_units(u.target.units(), vocab)).collect();
    let hyps: Vec<MixedUnitSeq> = hyps.iter().map(|h| to_mixed_units(&h.tokens, vocab)).collect();
    mer(&refs, &hyps)
}

/// Decodes every utterance with the decoupled model and scores it.
pub fn evaluate_decoupled(
    model: &DecoupledModel,
    store: &ParamStore,
    utts: &[Utterance],
    vocab: &TargetVocab,
    ablation: Ablation,
    opts: &DecodeOptions,
) -> Result<(EvalReport, Vec<Hypothesis>)> {
    let hyps = utts
        .iter()
        .map(|u| decode_decoupled(model, store, &u.features.frames, ablation, opts).map(|o| o.hypothesis))
        .collect::<Result<Vec<_>>>()?;
    Ok((score(utts, &hyps, vocab)?, hyps))
}

pub fn evaluate_baseline(
    model: &BaselineModel,
    store: &ParamStore,
    utts: &[Utterance],
    vocab: &TargetVocab,
    opts: &DecodeOptions,
) -> Result<(EvalReport, Vec<Hypothesis>)> {
    let hyps = utts
        .iter()
        .map(|u| decode_baseline(model, store, &u.features.frames, opts))
        .collect::<Result<Vec<_>>>()?;
    Ok((score(utts, &hyps, vocab)?, hyps))
}
