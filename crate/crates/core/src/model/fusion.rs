use rand::Rng;

use super::config::ModelConfig;
use super::multilevel::{phoneme_level_attention, sentence_level_attention};
use crate::autodiff::{Graph, Tensor, Var};
use crate::error::{Error, Result};
use crate::nn::{
    add_positional_encoding, residual_sublayer, AttentionMask, Binder, Embedding, FeedForward, LayerNorm, Linear,
    MultiHeadAttention, ParamStore,
};

/// Which context halves feed the fusion projection.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Ablation {
    #[default]
    Full,
    /// Phoneme branch removed: its half of the concat is zeros.
    NoPel,
    /// Acoustic branch removed: its half of the concat is zeros.
    NoAel,
}

impl std::str::FromStr for Ablation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "full" => Ok(Ablation::Full),
            "no-pel" => Ok(Ablation::NoPel),
            "no-ael" => Ok(Ablation::NoAel),
            other => Err(Error::Config(format!("unknown ablation `{other}` (full, no-pel, no-ael)"))),
        }
    }
}

/// Sources the fusion decoder attends to.
#[derive(Clone, Copy, Debug)]
pub struct FusionMemory<'a> {
    /// `[T′×d]` acoustic hidden states; `None` feeds zeros in the acoustic half.
    pub acoustic: Option<Var>,
    /// Encoded candidates `[Sₙ×d]`.
    pub candidates: &'a [Var],
}

/// Decoder block with a dual cross-attention: acoustic multi-head attention
/// in parallel with phoneme-level plus sentence-level attention over the
/// candidates, concatenated and projected back to `d_model`.
#[derive(Clone, Debug)]
pub struct FusionDecoderBlock {
    pub norm_self: LayerNorm,
    pub self_attn: MultiHeadAttention,
    pub norm_cross: LayerNorm,
    pub acoustic_attn: MultiHeadAttention,
    pub phoneme_attn: MultiHeadAttention,
    pub fusion: Linear,
    pub norm_ffn: LayerNorm,
    pub ffn: FeedForward,
    pub dropout: f64,
    pub sentence_heads: usize,
}

impl FusionDecoderBlock {
    pub fn new(prefix: &str, cfg: &ModelConfig) -> Result<Self> {
        let (d, h) = (cfg.d_model, cfg.heads);
        Ok(FusionDecoderBlock {
            norm_self: LayerNorm::new(&format!("{prefix}.norm_self"), d),
            self_attn: MultiHeadAttention::new(&format!("{prefix}.self_attn"), d, h)?,
            norm_cross: LayerNorm::new(&format!("{prefix}.norm_cross"), d),
            acoustic_attn: MultiHeadAttention::new(&format!("{prefix}.acoustic_attn"), d, h)?,
            phoneme_attn: MultiHeadAttention::new(&format!("{prefix}.phoneme_attn"), d, h)?,
            fusion: Linear::new(&format!("{prefix}.fusion"), 2 * d, d),
            norm_ffn: LayerNorm::new(&format!("{prefix}.norm_ffn"), d),
            ffn: FeedForward::new(&format!("{prefix}.ffn"), d, cfg.ffn_dim),
            dropout: cfg.dropout,
            sentence_heads: cfg.sentence_heads,
        })
    }

    pub fn init(&self, store: &mut ParamStore, rng: &mut impl Rng) {
        self.norm_self.init(store);
        self.self_attn.init(store, rng);
        self.norm_cross.init(store);
        self.acoustic_attn.init(store, rng);
        self.phoneme_attn.init(store, rng);
        self.fusion.init(store, rng);
        self.norm_ffn.init(store);
        self.ffn.init(store, rng);
    }

    pub fn forward(&self, g: &mut Graph, p: &mut Binder, x: Var, memory: FusionMemory, ablation: Ablation) -> Result<Var> {
        let (len, d) = (g.shape(x)[0], g.shape(x)[1]);
        let h = self.norm_self.forward(g, p, x)?;
        let a = self.self_attn.forward(g, p, h, h, &AttentionMask::causal(len))?;
        let x = residual_sublayer(g, x, a, self.dropout)?;

        let q = self.norm_cross.forward(g, p, x)?;
        let acoustic = match (memory.acoustic, ablation) {
            (Some(mem), Ablation::Full | Ablation::NoPel) => {
                let t = g.shape(mem)[0];
                self.acoustic_attn.forward(g, p, q, mem, &AttentionMask::none(len, t))?
            }
            _ => g.constant(Tensor::zeros(&[len, d])),
        };
        let phonetic = match ablation {
            Ablation::NoPel => g.constant(Tensor::zeros(&[len, d])),
            _ => {
                let contexts = phoneme_level_attention(g, p, &self.phoneme_attn, q, memory.candidates)?;
                sentence_level_attention(g, q, &contexts, self.sentence_heads)?.output
            }
        };
        let both = g.concat_cols(&[acoustic, phonetic])?;
        let fused = self.fusion.forward(g, p, both)?;
        let x = residual_sublayer(g, x, fused, self.dropout)?;

        let h = self.norm_ffn.forward(g, p, x)?;
        let f = self.ffn.forward(g, p, h)?;
        residual_sublayer(g, x, f, self.dropout)
    }
}

/// Target embedding, fusion blocks, final norm and output projection.
#[derive(Clone, Debug)]
pub struct FusionDecoder {
    pub embed: Embedding,
    pub blocks: Vec<FusionDecoderBlock>,
    pub final_norm: LayerNorm,
    pub out: Linear,
    pub dropout: f64,
}

impl FusionDecoder {
    pub fn new(cfg: &ModelConfig) -> Result<Self> {
        Ok(FusionDecoder {
            embed: Embedding::new("target_embed", cfg.target_vocab, cfg.d_model),
            blocks: (0..cfg.n_dec)
                .map(|i| FusionDecoderBlock::new(&format!("decoder.{i}"), cfg))
                .collect::<Result<_>>()?,
            final_norm: LayerNorm::new("decoder_norm.0", cfg.d_model),
            out: Linear::new("decoder_out", cfg.d_model, cfg.target_vocab),
            dropout: cfg.dropout,
        })
    }

    pub fn init(&self, store: &mut ParamStore, rng: &mut impl Rng) {
        self.embed.init(store, rng);
        for b in &self.blocks {
            b.init(store, rng);
        }
        self.final_norm.init(store);
        self.out.init(store, rng);
    }

    /// Logits `[L×target_vocab]` for the teacher-forced inputs `inputs`
    /// (sos followed by the target prefix).
    pub fn forward(&self, g: &mut Graph, p: &mut Binder, inputs: &[usize], memory: FusionMemory, ablation: Ablation) -> Result<Var> {
        if ablation != Ablation::NoPel && memory.candidates.is_empty() {
            return Err(Error::Contract("fusion decoder needs at least one phoneme candidate".into()));
        }
        let x = self.embed.forward(g, p, inputs)?;
        let x = add_positional_encoding(g, x)?;
        let mut x = g.dropout(x, self.dropout)?;
        for b in &self.blocks {
            x = b.forward(g, p, x, memory, ablation)?;
        }
        let x = self.final_norm.forward(g, p, x)?;
        self.out.forward(g, p, x)
    }
}
