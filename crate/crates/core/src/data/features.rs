use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};

use super::SynthConfig;
use crate::autodiff::Tensor;
use crate::ctc::{PhonemeSeq, BLANK};
use crate::error::{Error, Result};

/// Smallest Euclidean distance allowed between two prototypes.
const MIN_PROTOTYPE_DISTANCE: f64 = 0.5;

/// Per-phoneme prototype vectors and per-tone offsets, fixed per corpus seed.
#[derive(Clone, Debug, PartialEq)]
pub struct Acoustics {
    /// Indexed by phoneme id; the blank row is unused.
    pub prototypes: Vec<Vec<f64>>,
    pub tone_offsets: Vec<Vec<f64>>,
    pub d_feat: usize,
}

fn unit_vector(rng: &mut impl Rng, d: usize) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..d).map(|_| StandardNormal.sample(rng)).collect();
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-6 {
            return v.into_iter().map(|x| x / norm).collect();
        }
    }
}

fn distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

impl Acoustics {
    pub fn generate(cfg: &SynthConfig) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(super::derive_seed(cfg.seed, 0xAC, 0));
        let n = cfg.phoneme_vocab();
        let mut prototypes = vec![vec![0.0; cfg.d_feat]];
        let mut attempts = 0;
        while prototypes.len() < n {
            let v = unit_vector(&mut rng, cfg.d_feat);
            if prototypes[1..].iter().all(|p| distance(p, &v) >= MIN_PROTOTYPE_DISTANCE) {
                prototypes.push(v);
            }
            attempts += 1;
            if attempts > 100_000 {
                return Err(Error::Config(format!(
                    "cannot place {n} distinct prototypes in {} dimensions",
                    cfg.d_feat
                )));
            }
        }
        let tone_offsets = (0..cfg.n_tones)
            .map(|_| unit_vector(&mut rng, cfg.d_feat).into_iter().map(|x| x * cfg.tone_scale).collect())
            .collect();
        Ok(Acoustics {
            prototypes,
            tone_offsets,
            d_feat: cfg.d_feat,
        })
    }
}

/// Frames for a phoneme sequence. Each phoneme lasts `d·duration_scale`
/// frames with `d ∈ {2, 3, 4}` drawn from `seed`; every frame is the
/// phoneme's prototype, plus the tone offset when `tones` gives one, plus
/// `N(0, noise_sigma²)` per element.
///
/// Returns the `[T×d_feat]` frames and the phoneme id of each frame.
pub fn synthesize_features(
    acoustics: &Acoustics,
    phonemes: &PhonemeSeq,
    tones: Option<&[Option<usize>]>,
    seed: u64,
    noise_sigma: f64,
    duration_scale: usize,
) -> Result<(Tensor, Vec<usize>)> {
    if phonemes.is_empty() {
        return Err(Error::Input("cannot synthesise an empty phoneme sequence".into()));
    }
    if let Some(t) = tones {
        if t.len() != phonemes.len() {
            return Err(Error::dim("synthesize_features tones", &[phonemes.len()], &[t.len()]));
        }
    }
    let noise = Normal::new(0.0, noise_sigma).map_err(|e| Error::Config(format!("noise_sigma: {e}")))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    // Durations first, so they do not depend on the noise draws.
    let durations: Vec<usize> = (0..phonemes.len()).map(|_| rng.random_range(2..=4usize)).collect();
    let d = acoustics.d_feat;
    let mut data = Vec::new();
    let mut labels = Vec::new();
    for (i, &p) in phonemes.ids().iter().enumerate() {
        if p == BLANK || p >= acoustics.prototypes.len() {
            return Err(Error::Input(format!("phoneme id {p} has no prototype")));
        }
        let mut base = acoustics.prototypes[p].clone();
        if let Some(Some(tone)) = tones.map(|t| t[i]) {
            let off = acoustics
                .tone_offsets
                .get(tone)
                .ok_or_else(|| Error::Input(format!("tone {tone} out of range")))?;
            for (b, o) in base.iter_mut().zip(off) {
                *b += o;
            }
        }
        let frames = durations[i] * duration_scale;
        for _ in 0..frames {
            data.extend(base.iter().map(|&b| b + noise.sample(&mut rng)));
            labels.push(p);
        }
    }
    let t = labels.len();
    Ok((Tensor::new(vec![t, d], data)?, labels))
}

/// Phoneme whose prototype is closest to `frame`.
pub fn nearest_prototype(acoustics: &Acoustics, frame: &[f64]) -> usize {
    (1..acoustics.prototypes.len())
        .min_by(|&a, &b| {
            distance(&acoustics.prototypes[a], frame).total_cmp(&distance(&acoustics.prototypes[b], frame))
        })
        .expect("at least one prototype")
}
