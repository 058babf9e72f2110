use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::a2p::{A2p, A2pOutput, PhonemeEncoder};
use super::baseline::BaselineModel;
use super::config::{ModelConfig, PARITY_TOLERANCE};
use super::fusion::{Ablation, FusionDecoder, FusionMemory};
use crate::autodiff::{Graph, Tensor, Var};
use crate::ctc::PhonemeSeq;
use crate::error::{Error, Result};
use crate::nn::{Binder, ParamStore};

/// A2P network, phoneme encoder and fusion decoder.
#[derive(Clone, Debug)]
pub struct DecoupledModel {
    pub config: ModelConfig,
    pub a2p: A2p,
    pub phoneme_encoder: PhonemeEncoder,
    pub decoder: FusionDecoder,
}

impl DecoupledModel {
    pub fn new(config: &ModelConfig) -> Result<Self> {
        config.validate()?;
        Ok(DecoupledModel {
            config: config.clone(),
            a2p: A2p::new(config)?,
            phoneme_encoder: PhonemeEncoder::new(config)?,
            decoder: FusionDecoder::new(config)?,
        })
    }

    pub fn init(&self, seed: u64) -> ParamStore {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        self.a2p.init(&mut store, &mut rng);
        self.phoneme_encoder.init(&mut store, &mut rng);
        self.decoder.init(&mut store, &mut rng);
        store
    }

    pub fn a2p_forward(&self, g: &mut Graph, p: &mut Binder, features: &Tensor) -> Result<A2pOutput> {
        let x = g.constant(features.clone());
        self.a2p.forward(g, p, x)
    }

    pub fn encode_candidates(&self, g: &mut Graph, p: &mut Binder, candidates: &[PhonemeSeq]) -> Result<Vec<Var>> {
        candidates
            .iter()
            .map(|c| self.phoneme_encoder.forward(g, p, c))
            .collect()
    }

    /// Decoder logits given already-computed acoustic states and encoded
    /// candidates.
    pub fn decode_logits(
        &self,
        g: &mut Graph,
        p: &mut Binder,
        inputs: &[usize],
        acoustic: Option<Var>,
        encoded: &[Var],
        ablation: Ablation,
    ) -> Result<Var> {
        let memory = FusionMemory {
            acoustic,
            candidates: encoded,
        };
        self.decoder.forward(g, p, inputs, memory, ablation)
    }

    /// Full forward: A2P hidden states, candidate encoding, fusion decoder.
    pub fn forward(
        &self,
        g: &mut Graph,
        p: &mut Binder,
        features: &Tensor,
        candidates: &[PhonemeSeq],
        inputs: &[usize],
        ablation: Ablation,
    ) -> Result<Var> {
        let acoustic = match ablation {
            Ablation::NoAel => None,
            _ => Some(self.a2p_forward(g, p, features)?.hidden),
        };
        let encoded = match ablation {
            Ablation::NoPel => Vec::new(),
            _ => self.encode_candidates(g, p, candidates)?,
        };
        self.decode_logits(g, p, inputs, acoustic, &encoded, ablation)
    }
}

/// Parameter counts `(decoupled, baseline)` for one configuration.
pub fn parameter_counts(config: &ModelConfig) -> Result<(usize, usize)> {
    let dec = DecoupledModel::new(config)?.init(0).num_scalars();
    let base = BaselineModel::new(config)?.init(0).num_scalars();
    Ok((dec, base))
}

/// Relative parameter gap `|dec - base| / base`, or an error when it
/// exceeds the parity tolerance.
pub fn check_parity(config: &ModelConfig) -> Result<f64> {
    let (dec, base) = parameter_counts(config)?;
    let gap = (dec as f64 - base as f64).abs() / base as f64;
    if gap > PARITY_TOLERANCE {
        return Err(Error::Config(format!(
            "decoupled model has {dec} parameters, baseline {base}: gap {:.1}% exceeds {:.0}%",
            100.0 * gap,
            100.0 * PARITY_TOLERANCE
        )));
    }
    Ok(gap)
}
