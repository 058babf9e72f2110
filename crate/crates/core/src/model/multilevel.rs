use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::nn::{AttentionMask, Binder, MultiHeadAttention};

/// One attention context per candidate: `Cₙ = MHA(Q, Eₙ, Eₙ)`.
///
/// The query projection is shared by all candidates; only the key/value
/// side is repeated.
pub fn phoneme_level_attention(
    g: &mut Graph,
    p: &mut Binder,
    mha: &MultiHeadAttention,
    query: Var,
    encoded: &[Var],
) -> Result<Vec<Var>> {
    if encoded.is_empty() {
        return Err(Error::Contract("phoneme-level attention over zero candidates".into()));
    }
    let len = g.shape(query)[0];
    let q = mha.project_queries(g, p, query)?;
    encoded
        .iter()
        .map(|&e| {
            let s = g.shape(e)[0];
            mha.attend(g, p, q, e, &AttentionMask::none(len, s))
        })
        .collect()
}

/// Result of the sentence-level weighting.
#[derive(Clone, Debug)]
pub struct SentenceAttention {
    /// `[L×d_model]` weighted average of the contexts.
    pub output: Var,
    /// `[L×N]` weights, one matrix per head.
    pub weights: Vec<Var>,
}

/// Position-wise weighting of `N` same-shaped contexts:
/// `αₜ = softmaxₙ(qₜ·cₜₙ/√d)`, `ĉₜ = Σₙ αₜₙ cₜₙ`.
///
/// With `heads > 1` the model width is split into equal slices that are
/// weighted independently and concatenated.
pub fn sentence_level_attention(g: &mut Graph, query: Var, contexts: &[Var], heads: usize) -> Result<SentenceAttention> {
    let first = *contexts
        .first()
        .ok_or_else(|| Error::Contract("sentence-level attention over zero contexts".into()))?;
    for &c in contexts {
        if g.shape(c) != g.shape(query) {
            return Err(Error::dim("sentence_level_attention", g.shape(query), g.shape(c)));
        }
    }
    let d = g.shape(first)[1];
    if heads == 0 || d % heads != 0 {
        return Err(Error::Config(format!("width {d} not divisible by {heads} sentence heads")));
    }
    let dh = d / heads;
    let mut outputs = Vec::with_capacity(heads);
    let mut weights = Vec::with_capacity(heads);
    for h in 0..heads {
        let (q, cs) = if heads == 1 {
            (query, contexts.to_vec())
        } else {
            let q = g.slice_cols(query, h * dh, dh)?;
            let cs = contexts
                .iter()
                .map(|&c| g.slice_cols(c, h * dh, dh))
                .collect::<Result<Vec<_>>>()?;
            (q, cs)
        };
        let scores = cs
            .iter()
            .map(|&c| {
                let prod = g.mul(q, c)?;
                let s = g.sum_last(prod)?;
                Ok(g.scale(s, 1.0 / (dh as f64).sqrt()))
            })
            .collect::<Result<Vec<_>>>()?;
        let scores = if scores.len() == 1 { scores[0] } else { g.concat_cols(&scores)? };
        let w = g.softmax(scores)?;
        let mut acc: Option<Var> = None;
        for (n, &c) in cs.iter().enumerate() {
            let wn = if cs.len() == 1 { w } else { g.slice_cols(w, n, 1)? };
            let term = g.mul_col(c, wn)?;
            acc = Some(match acc {
                None => term,
                Some(a) => g.add(a, term)?,
            });
        }
        outputs.push(acc.expect("at least one context"));
        weights.push(w);
    }
    let output = if heads == 1 { outputs[0] } else { g.concat_cols(&outputs)? };
    Ok(SentenceAttention { output, weights })
}
