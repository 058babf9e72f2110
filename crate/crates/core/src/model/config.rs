use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// Architecture hyperparameters shared by the decoupled and baseline models.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub d_model: usize,
    pub heads: usize,
    pub ffn_dim: usize,
    pub n_enc_baseline: usize,
    pub n_dec: usize,
    pub n_acoustic_enc: usize,
    pub n_phoneme_enc: usize,
    pub dropout: f64,
    pub label_smoothing: f64,
    pub ctc_beam: usize,
    pub n_candidates: usize,
    /// Output units including pad, sos and eos.
    pub target_vocab: usize,
    /// Phoneme units including blank and `<wb>`.
    pub phoneme_vocab: usize,
    pub d_feat: usize,
    pub conv_channels: usize,
    /// Heads in the sentence-level weighting; 1 is plain single-head.
    pub sentence_heads: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig::desk()
    }
}

/// Largest allowed relative gap between the two models' parameter counts.
pub const PARITY_TOLERANCE: f64 = 0.15;

impl ModelConfig {
    /// Small enough to train on one CPU core in minutes.
    pub fn desk() -> Self {
        ModelConfig {
            d_model: 64,
            heads: 4,
            ffn_dim: 256,
            n_enc_baseline: 4,
            n_dec: 2,
            n_acoustic_enc: 2,
            n_phoneme_enc: 1,
            dropout: 0.1,
            label_smoothing: 0.1,
            ctc_beam: 8,
            n_candidates: 4,
            target_vocab: 93,
            phoneme_vocab: 42,
            d_feat: 16,
            conv_channels: 16,
            sentence_heads: 1,
        }
    }

    /// Full-size layout: 12/6 baseline, 8/4/6 decoupled, width 512.
    pub fn large() -> Self {
        ModelConfig {
            d_model: 512,
            heads: 8,
            ffn_dim: 2048,
            n_enc_baseline: 12,
            n_dec: 6,
            n_acoustic_enc: 8,
            n_phoneme_enc: 4,
            ctc_beam: 20,
            n_candidates: 20,
            d_feat: 40,
            conv_channels: 64,
            ..ModelConfig::desk()
        }
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "desk" => Ok(Self::desk()),
            "large" => Ok(Self::large()),
            other => Err(Error::Config(format!("unknown model preset `{other}`"))),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("d_model", self.d_model),
            ("heads", self.heads),
            ("ffn_dim", self.ffn_dim),
            ("n_enc_baseline", self.n_enc_baseline),
            ("n_dec", self.n_dec),
            ("n_acoustic_enc", self.n_acoustic_enc),
            ("n_phoneme_enc", self.n_phoneme_enc),
            ("ctc_beam", self.ctc_beam),
            ("n_candidates", self.n_candidates),
            ("d_feat", self.d_feat),
            ("conv_channels", self.conv_channels),
            ("sentence_heads", self.sentence_heads),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{name} must be positive")));
        }
        if self.d_model % self.heads != 0 || self.d_model % self.sentence_heads != 0 {
            return Err(Error::Config(format!(
                "d_model {} must be divisible by heads {} and sentence_heads {}",
                self.d_model, self.heads, self.sentence_heads
            )));
        }
        if self.d_model % 2 != 0 {
            return Err(Error::Config("d_model must be even for positional encoding".into()));
        }
        if self.n_candidates > self.ctc_beam {
            return Err(Error::Config(format!(
                "n_candidates {} exceeds ctc_beam {}",
                self.n_candidates, self.ctc_beam
            )));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        if !(0.0..1.0).contains(&self.label_smoothing) {
            return Err(Error::Config(format!(
                "label_smoothing {} outside [0, 1)",
                self.label_smoothing
            )));
        }
        if self.target_vocab < 4 || self.phoneme_vocab < 3 {
            return Err(Error::Config("vocabularies are too small".into()));
        }
        Ok(())
    }

    /// SHA-256 of the canonical JSON form.
    pub fn digest(&self) -> [u8; 32] {
        let json = serde_json::to_string(self).expect("config serialises");
        Sha256::digest(json.as_bytes()).into()
    }
}
