use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;

/// Time and frequency masking. Widths are drawn uniformly from
/// `0..=max_width`, clipped to the feature extent.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SpecAugment {
    pub time_masks: usize,
    pub max_time_width: usize,
    pub freq_masks: usize,
    pub max_freq_width: usize,
}

impl SpecAugment {
    pub const NONE: SpecAugment = SpecAugment {
        time_masks: 0,
        max_time_width: 0,
        freq_masks: 0,
        max_freq_width: 0,
    };
}

/// Zeroes the masked bands of a `[T×D]` feature matrix.
pub fn spec_augment(features: &Tensor, cfg: &SpecAugment, seed: u64) -> Tensor {
    let mut out = features.clone();
    if cfg.time_masks == 0 && cfg.freq_masks == 0 {
        return out;
    }
    let (t, d) = (features.rows(), features.cols());
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data = out.data_mut();
    for _ in 0..cfg.time_masks {
        let w = rng.random_range(0..=cfg.max_time_width.min(t));
        let start = rng.random_range(0..=t - w);
        data[start * d..(start + w) * d].fill(0.0);
    }
    for _ in 0..cfg.freq_masks {
        let w = rng.random_range(0..=cfg.max_freq_width.min(d));
        let start = rng.random_range(0..=d - w);
        for row in data.chunks_mut(d) {
            row[start..start + w].fill(0.0);
        }
    }
    out
}
