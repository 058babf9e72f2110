use rand::Rng;

use super::config::ModelConfig;
use crate::autodiff::{Graph, Var};
use crate::ctc::PhonemeSeq;
use crate::error::{Error, Result};
use crate::nn::{add_positional_encoding, Binder, ConvSubsample, Embedding, EncoderStack, Linear, ParamStore};

/// Name prefixes owned by the audio-to-phoneme network.
pub const A2P_PREFIXES: [&str; 4] = ["acoustic_fe.", "acoustic_enc.", "acoustic_enc_norm.", "a2p_out."];

pub fn is_a2p_param(name: &str) -> bool {
    A2P_PREFIXES.iter().any(|p| name.starts_with(p))
}

/// Hidden states and phoneme log-posteriors for one utterance.
#[derive(Clone, Copy, Debug)]
pub struct A2pOutput {
    /// `[T′×d_model]`, before the output projection.
    pub hidden: Var,
    /// `[T′×phoneme_vocab]`, blank in column 0.
    pub log_probs: Var,
}

/// Audio-to-phoneme network: conv subsampling, encoder blocks, projection
/// onto phonemes plus blank.
#[derive(Clone, Debug)]
pub struct A2p {
    pub frontend: ConvSubsample,
    pub encoder: EncoderStack,
    pub out: Linear,
    pub dropout: f64,
}

impl A2p {
    pub fn new(cfg: &ModelConfig) -> Result<Self> {
        Ok(A2p {
            frontend: ConvSubsample::new("acoustic_fe", cfg.d_feat, cfg.conv_channels, cfg.d_model),
            encoder: EncoderStack::new("acoustic_enc", cfg.n_acoustic_enc, cfg.d_model, cfg.heads, cfg.ffn_dim, cfg.dropout)?,
            out: Linear::new("a2p_out", cfg.d_model, cfg.phoneme_vocab),
            dropout: cfg.dropout,
        })
    }

    pub fn init(&self, store: &mut ParamStore, rng: &mut impl Rng) {
        self.frontend.init(store, rng);
        self.encoder.init(store, rng);
        self.out.init(store, rng);
    }

    pub fn forward(&self, g: &mut Graph, p: &mut Binder, features: Var) -> Result<A2pOutput> {
        let x = self.frontend.forward(g, p, features)?;
        let x = add_positional_encoding(g, x)?;
        let x = g.dropout(x, self.dropout)?;
        let hidden = self.encoder.forward(g, p, x)?;
        let logits = self.out.forward(g, p, hidden)?;
        let log_probs = g.log_softmax(logits)?;
        Ok(A2pOutput { hidden, log_probs })
    }
}

/// Phoneme embedding, positional encoding and encoder blocks.
#[derive(Clone, Debug)]
pub struct PhonemeEncoder {
    pub embed: Embedding,
    pub encoder: EncoderStack,
    pub dropout: f64,
}

impl PhonemeEncoder {
    pub fn new(cfg: &ModelConfig) -> Result<Self> {
        Ok(PhonemeEncoder {
            embed: Embedding::new("phoneme_embed", cfg.phoneme_vocab, cfg.d_model),
            encoder: EncoderStack::new("phoneme_enc", cfg.n_phoneme_enc, cfg.d_model, cfg.heads, cfg.ffn_dim, cfg.dropout)?,
            dropout: cfg.dropout,
        })
    }

    pub fn init(&self, store: &mut ParamStore, rng: &mut impl Rng) {
        self.embed.init(store, rng);
        self.encoder.init(store, rng);
    }

    /// `[S×d_model]` encoding of one candidate.
    pub fn forward(&self, g: &mut Graph, p: &mut Binder, candidate: &PhonemeSeq) -> Result<Var> {
        if candidate.is_empty() {
            return Err(Error::Input("empty phoneme candidate".into()));
        }
        if let Some(&bad) = candidate.ids().iter().find(|&&i| i >= self.embed.vocab) {
            return Err(Error::Input(format!("phoneme id {bad} outside vocabulary of {}", self.embed.vocab)));
        }
        let x = self.embed.forward(g, p, candidate.ids())?;
        let x = add_positional_encoding(g, x)?;
        let x = g.dropout(x, self.dropout)?;
        self.encoder.forward(g, p, x)
    }
}
