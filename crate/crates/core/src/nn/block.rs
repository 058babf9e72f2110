use rand::Rng;

use super::attention::{AttentionMask, MultiHeadAttention};
use super::layers::{FeedForward, LayerNorm};
use super::params::{Binder, ParamStore};
use crate::autodiff::{Graph, Var};
use crate::error::Result;

/// Pre-norm residual connection: `x + dropout(sublayer_out)`, where the
/// caller computed `sublayer_out` from `norm(x)`.
pub fn residual_sublayer(g: &mut Graph, x: Var, sublayer_out: Var, dropout: f64) -> Result<Var> {
    let d = g.dropout(sublayer_out, dropout)?;
    g.add(x, d)
}

/// Self-attention sub-block followed by a feed-forward sub-block.
#[derive(Clone, Debug)]
pub struct EncoderBlock {
    pub norm_attn: LayerNorm,
    pub attn: MultiHeadAttention,
    pub norm_ffn: LayerNorm,
    pub ffn: FeedForward,
    pub dropout: f64,
}

impl EncoderBlock {
    pub fn new(prefix: &str, d_model: usize, heads: usize, ffn_dim: usize, dropout: f64) -> Result<Self> {
        Ok(EncoderBlock {
            norm_attn: LayerNorm::new(&format!("{prefix}.norm_attn"), d_model),
            attn: MultiHeadAttention::new(&format!("{prefix}.attn"), d_model, heads)?,
            norm_ffn: LayerNorm::new(&format!("{prefix}.norm_ffn"), d_model),
            ffn: FeedForward::new(&format!("{prefix}.ffn"), d_model, ffn_dim),
            dropout,
        })
    }

    pub fn init(&self, store: &mut ParamStore, rng: &mut impl Rng) {
        self.norm_attn.init(store);
        self.attn.init(store, rng);
        self.norm_ffn.init(store);
        self.ffn.init(store, rng);
    }

    pub fn forward(&self, g: &mut Graph, p: &mut Binder, x: Var, mask: &AttentionMask) -> Result<Var> {
        let h = self.norm_attn.forward(g, p, x)?;
        let a = self.attn.forward(g, p, h, h, mask)?;
        let x = residual_sublayer(g, x, a, self.dropout)?;
        let h = self.norm_ffn.forward(g, p, x)?;
        let f = self.ffn.forward(g, p, h)?;
        residual_sublayer(g, x, f, self.dropout)
    }
}

/// Stack of encoder blocks with a final layer norm.
#[derive(Clone, Debug)]
pub struct EncoderStack {
    pub blocks: Vec<EncoderBlock>,
    pub final_norm: LayerNorm,
}

impl EncoderStack {
    pub fn new(module: &str, layers: usize, d_model: usize, heads: usize, ffn_dim: usize, dropout: f64) -> Result<Self> {
        let blocks = (0..layers)
            .map(|i| EncoderBlock::new(&format!("{module}.{i}"), d_model, heads, ffn_dim, dropout))
            .collect::<Result<_>>()?;
        Ok(EncoderStack {
            blocks,
            final_norm: LayerNorm::new(&format!("{module}_norm.0"), d_model),
        })
    }

    pub fn init(&self, store: &mut ParamStore, rng: &mut impl Rng) {
        for b in &self.blocks {
            b.init(store, rng);
        }
        self.final_norm.init(store);
    }

    pub fn forward(&self, g: &mut Graph, p: &mut Binder, mut x: Var) -> Result<Var> {
        let len = g.shape(x)[0];
        let mask = AttentionMask::none(len, len);
        for b in &self.blocks {
            x = b.forward(g, p, x, &mask)?;
        }
        self.final_norm.forward(g, p, x)
    }
}

/// Standard decoder block: masked self-attention, cross-attention over an
/// encoder memory, feed-forward.
#[derive(Clone, Debug)]
pub struct DecoderBlock {
    pub norm_self: LayerNorm,
    pub self_attn: MultiHeadAttention,
    pub norm_cross: LayerNorm,
    pub cross_attn: MultiHeadAttention,
    pub norm_ffn: LayerNorm,
    pub ffn: FeedForward,
    pub dropout: f64,
}

impl DecoderBlock {
    pub fn new(prefix: &str, d_model: usize, heads: usize, ffn_dim: usize, dropout: f64) -> Result<Self> {
        Ok(DecoderBlock {
            norm_self: LayerNorm::new(&format!("{prefix}.norm_self"), d_model),
            self_attn: MultiHeadAttention::new(&format!("{prefix}.self_attn"), d_model, heads)?,
            norm_cross: LayerNorm::new(&format!("{prefix}.norm_cross"), d_model),
            cross_attn: MultiHeadAttention::new(&format!("{prefix}.cross_attn"), d_model, heads)?,
            norm_ffn: LayerNorm::new(&format!("{prefix}.norm_ffn"), d_model),
            ffn: FeedForward::new(&format!("{prefix}.ffn"), d_model, ffn_dim),
            dropout,
        })
    }

    pub fn init(&self, store: &mut ParamStore, rng: &mut impl Rng) {
        self.norm_self.init(store);
        self.self_attn.init(store, rng);
        self.norm_cross.init(store);
        self.cross_attn.init(store, rng);
        self.norm_ffn.init(store);
        self.ffn.init(store, rng);
    }

    pub fn forward(&self, g: &mut Graph, p: &mut Binder, x: Var, memory: Var) -> Result<Var> {
        let len = g.shape(x)[0];
        let h = self.norm_self.forward(g, p, x)?;
        let a = self.self_attn.forward(g, p, h, h, &AttentionMask::causal(len))?;
        let x = residual_sublayer(g, x, a, self.dropout)?;
        let h = self.norm_cross.forward(g, p, x)?;
        let mem_len = g.shape(memory)[0];
        let c = self.cross_attn.forward(g, p, h, memory, &AttentionMask::none(len, mem_len))?;
        let x = residual_sublayer(g, x, c, self.dropout)?;
        let h = self.norm_ffn.forward(g, p, x)?;
        let f = self.ffn.forward(g, p, h)?;
        residual_sublayer(g, x, f, self.dropout)
    }
}
