//! The decoupled model (A2P network, phoneme encoder, fusion decoder with
//! multi-level attention), the baseline speech transformer, and the
//! checkpoint format.

mod a2p;
mod baseline;
pub mod checkpoint;
mod config;
mod decoupled;
mod fusion;
mod multilevel;

pub use a2p::{is_a2p_param, A2p, A2pOutput, PhonemeEncoder, A2P_PREFIXES};
pub use baseline::BaselineModel;
pub use checkpoint::Checkpoint;
pub use config::{ModelConfig, PARITY_TOLERANCE};
pub use decoupled::{check_parity, parameter_counts, DecoupledModel};
pub use fusion::{Ablation, FusionDecoder, FusionDecoderBlock, FusionMemory};
pub use multilevel::{phoneme_level_attention, sentence_level_attention, SentenceAttention};

use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::nn::MIN_SUBSAMPLE_FRAMES;

pub const PAD: usize = 0;
pub const SOS: usize = 1;
pub const EOS: usize = 2;

/// Output-unit ids of one transcript, without sos/eos.
#[derive(Clone, Debug, Default, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct TargetSeq(Vec<usize>);

impl TargetSeq {
    pub fn new(units: Vec<usize>, vocab: usize) -> Result<Self> {
        if let Some(&bad) = units.iter().find(|&&u| u >= vocab || u <= EOS) {
            return Err(Error::Input(format!("target id {bad} is not an output unit (vocabulary {vocab})")));
        }
        Ok(TargetSeq(units))
    }

    pub fn units(&self) -> &[usize] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// Decoder input: sos followed by the units.
    pub fn decoder_input(&self) -> Vec<usize> {
        std::iter::once(SOS).chain(self.0.iter().copied()).collect()
    }

    /// Decoder output: the units followed by eos.
    pub fn decoder_output(&self) -> Vec<usize> {
        self.0.iter().copied().chain(std::iter::once(EOS)).collect()
    }

    /// Teacher-forcing form `[sos, units…, eos]`.
    pub fn with_markers(&self) -> Vec<usize> {
        let mut v = self.decoder_input();
        v.push(EOS);
        v
    }
}

/// Frame-level features of one utterance.
#[derive(Clone, Debug, PartialEq)]
pub struct AcousticFeatures {
    pub id: String,
    /// `[T×d_feat]`.
    pub frames: Tensor,
}

impl AcousticFeatures {
    pub fn new(id: impl Into<String>, frames: Tensor) -> Result<Self> {
        if frames.ndim() != 2 {
            return Err(Error::dim("acoustic features", frames.shape(), &[0, 0]));
        }
        if frames.rows() < MIN_SUBSAMPLE_FRAMES {
            return Err(Error::Input(format!(
                "{} frames is shorter than the minimum of {MIN_SUBSAMPLE_FRAMES}",
                frames.rows()
            )));
        }
        if !frames.all_finite() {
            return Err(Error::Input("non-finite acoustic feature".into()));
        }
        Ok(AcousticFeatures { id: id.into(), frames })
    }

    pub fn len(&self) -> usize {
        self.frames.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}
