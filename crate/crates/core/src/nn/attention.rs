use std::sync::Arc;

use rand::Rng;

use super::layers::Linear;
use super::params::{Binder, ParamStore};
use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MaskKind {
    None,
    Causal,
    Padding,
}

/// Which keys each query may attend to.
#[derive(Clone, Debug)]
pub struct AttentionMask {
    kind: MaskKind,
    queries: usize,
    keys: usize,
    /// Row-major `queries × keys`; `None` means everything is allowed.
    allowed: Option<Arc<Vec<bool>>>,
}

impl AttentionMask {
    pub fn none(queries: usize, keys: usize) -> Self {
        AttentionMask {
            kind: MaskKind::None,
            queries,
            keys,
            allowed: None,
        }
    }

    /// Query `i` sees keys `j ≤ i`.
    pub fn causal(len: usize) -> Self {
        let allowed = (0..len * len).map(|ix| ix % len <= ix / len).collect();
        AttentionMask {
            kind: MaskKind::Causal,
            queries: len,
            keys: len,
            allowed: Some(Arc::new(allowed)),
        }
    }

    /// Every query sees exactly the keys flagged valid.
    pub fn padding(queries: usize, key_valid: &[bool]) -> Result<Self> {
        if !key_valid.iter().any(|&v| v) {
            return Err(Error::Contract("padding mask hides every key".into()));
        }
        let keys = key_valid.len();
        let allowed = (0..queries).flat_map(|_| key_valid.iter().copied()).collect();
        Ok(AttentionMask {
            kind: MaskKind::Padding,
            queries,
            keys,
            allowed: Some(Arc::new(allowed)),
        })
    }

    pub fn kind(&self) -> MaskKind {
        self.kind
    }

    pub fn is_allowed(&self, i: usize, j: usize) -> bool {
        self.allowed.as_ref().is_none_or(|m| m[i * self.keys + j])
    }

    fn check(&self, queries: usize, keys: usize) -> Result<()> {
        if (self.queries, self.keys) != (queries, keys) {
            return Err(Error::dim("attention mask", &[self.queries, self.keys], &[queries, keys]));
        }
        Ok(())
    }
}

/// `softmax(Q·Kᵀ/√d_k + mask)·V`. Returns `(context[L×d_v], weights[L×S])`.
pub fn scaled_dot_product_attention(
    g: &mut Graph,
    q: Var,
    k: Var,
    v: Var,
    mask: &AttentionMask,
) -> Result<(Var, Var)> {
    let (l, dk) = (g.shape(q)[0], g.shape(q)[1]);
    let s = g.shape(k)[0];
    if g.shape(v)[0] != s {
        return Err(Error::dim("attention values", g.shape(k), g.shape(v)));
    }
    mask.check(l, s)?;
    let scores = g.matmul_bt(q, k)?;
    let scores = g.scale(scores, 1.0 / (dk as f64).sqrt());
    let weights = g.masked_softmax(scores, mask.allowed.as_ref())?;
    let context = g.matmul(weights, v)?;
    Ok((context, weights))
}

/// `h` parallel scaled dot-product heads over learned projections,
/// concatenated and projected back to `d_model`.
#[derive(Clone, Debug)]
pub struct MultiHeadAttention {
    pub wq: Linear,
    pub wk: Linear,
    pub wv: Linear,
    pub wo: Linear,
    pub heads: usize,
    pub d_model: usize,
}

impl MultiHeadAttention {
    pub fn new(prefix: &str, d_model: usize, heads: usize) -> Result<Self> {
        if heads == 0 || d_model % heads != 0 {
            return Err(Error::Config(format!(
                "d_model {d_model} is not divisible by {heads} heads"
            )));
        }
        let lin = |n: &str| Linear::new(&format!("{prefix}.{n}"), d_model, d_model);
        Ok(MultiHeadAttention {
            wq: lin("wq"),
            wk: lin("wk"),
            wv: lin("wv"),
            wo: lin("wo"),
            heads,
            d_model,
        })
    }

    pub fn init(&self, store: &mut ParamStore, rng: &mut impl Rng) {
        for l in [&self.wq, &self.wk, &self.wv, &self.wo] {
            l.init(store, rng);
        }
    }

    pub fn forward(
        &self,
        g: &mut Graph,
        p: &mut Binder,
        query: Var,
        key_value: Var,
        mask: &AttentionMask,
    ) -> Result<Var> {
        let q = self.project_queries(g, p, query)?;
        self.attend(g, p, q, key_value, mask)
    }

    /// Query projection, reusable across several key/value sources.
    pub fn project_queries(&self, g: &mut Graph, p: &mut Binder, query: Var) -> Result<Var> {
        self.wq.forward(g, p, query)
    }

    /// Attention of already-projected queries over one key/value source.
    pub fn attend(
        &self,
        g: &mut Graph,
        p: &mut Binder,
        q: Var,
        key_value: Var,
        mask: &AttentionMask,
    ) -> Result<Var> {
        let k = self.wk.forward(g, p, key_value)?;
        let v = self.wv.forward(g, p, key_value)?;
        let dh = self.d_model / self.heads;
        let mut heads = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let qh = g.slice_cols(q, h * dh, dh)?;
            let kh = g.slice_cols(k, h * dh, dh)?;
            let vh = g.slice_cols(v, h * dh, dh)?;
            let (ctx, _) = scaled_dot_product_attention(g, qh, kh, vh, mask)?;
            heads.push(ctx);
        }
        let cat = if heads.len() == 1 { heads[0] } else { g.concat_cols(&heads)? };
        self.wo.forward(g, p, cat)
    }
}
