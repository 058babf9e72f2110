//! Independent reference implementations shared by the integration tests.
#![allow(dead_code)]

use std::collections::HashMap;

use decoupled_asr::autodiff::Tensor;
use rand::Rng;

/// Probability of every collapsed label, by enumerating all `(V+1)^T`
/// frame alignments of `probs[T×(V+1)]`.
pub fn exhaustive_label_probs(probs: &[Vec<f64>]) -> HashMap<Vec<usize>, f64> {
    let t = probs.len();
    let width = probs[0].len();
    let mut out = HashMap::new();
    let mut path = vec![0usize; t];
    loop {
        let p: f64 = path.iter().enumerate().map(|(i, &c)| probs[i][c]).product();
        let mut label = Vec::new();
        let mut prev = usize::MAX;
        for &c in &path {
            if c != prev && c != 0 {
                label.push(c);
            }
            prev = c;
        }
        *out.entry(label).or_insert(0.0) += p;
        // odometer increment
        let mut i = 0;
        loop {
            if i == t {
                return out;
            }
            path[i] += 1;
            if path[i] < width {
                break;
            }
            path[i] = 0;
            i += 1;
        }
    }
}

/// Random row-stochastic `[t×width]` matrix, returned as probabilities.
pub fn random_probs(rng: &mut impl Rng, t: usize, width: usize) -> Vec<Vec<f64>> {
    (0..t)
        .map(|_| {
            let raw: Vec<f64> = (0..width).map(|_| rng.random_range(-2.0..2.0f64).exp()).collect();
            let s: f64 = raw.iter().sum();
            raw.into_iter().map(|v| v / s).collect()
        })
        .collect()
}

pub fn log_tensor(probs: &[Vec<f64>]) -> Tensor {
    Tensor::from_rows(probs).unwrap().map(f64::ln)
}
