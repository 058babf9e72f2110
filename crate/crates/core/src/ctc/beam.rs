use std::collections::BTreeMap;

use super::{PhonemeSeq, BLANK};
use crate::autodiff::kernels::log_sum_exp;
use crate::autodiff::Tensor;
use crate::error::{Error, Result};

/// Distinct collapsed sequences with their total log probability, best first.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct NBestList {
    pub candidates: Vec<(PhonemeSeq, f64)>,
}

impl NBestList {
    pub fn len(&self) -> usize {
        self.candidates.len()
    }

    pub fn is_empty(&self) -> bool {
        self.candidates.is_empty()
    }

    pub fn best(&self) -> Option<&(PhonemeSeq, f64)> {
        self.candidates.first()
    }

    pub fn sequences(&self) -> impl Iterator<Item = &PhonemeSeq> {
        self.candidates.iter().map(|(s, _)| s)
    }
}

/// Merges adjacent repeats, then drops blanks.
pub fn greedy_collapse(frame_ids: &[usize]) -> PhonemeSeq {
    let mut out = Vec::new();
    let mut prev = None;
    for &id in frame_ids {
        if Some(id) != prev && id != BLANK {
            out.push(id);
        }
        prev = Some(id);
    }
    PhonemeSeq(out)
}

/// Frame-wise argmax followed by [`greedy_collapse`].
pub fn greedy_decode(log_probs: &Tensor) -> PhonemeSeq {
    let ids: Vec<usize> = (0..log_probs.rows())
        .map(|t| {
            let row = log_probs.row(t);
            (0..row.len()).fold(0, |best, j| if row[j] > row[best] { j } else { best })
        })
        .collect();
    greedy_collapse(&ids)
}

#[derive(Clone, Copy)]
struct Mass {
    blank: f64,
    non_blank: f64,
}

impl Mass {
    const EMPTY: Mass = Mass {
        blank: f64::NEG_INFINITY,
        non_blank: f64::NEG_INFINITY,
    };

    fn total(&self) -> f64 {
        log_sum_exp(&[self.blank, self.non_blank])
    }
}

fn log_add(a: &mut f64, b: f64) {
    *a = log_sum_exp(&[*a, b]);
}

/// Orders by descending score, breaking ties by sequence so the result does
/// not depend on map iteration order.
fn ranked(beams: BTreeMap<Vec<usize>, Mass>) -> Vec<(Vec<usize>, Mass)> {
    let mut v: Vec<_> = beams.into_iter().collect();
    v.sort_by(|a, b| b.1.total().total_cmp(&a.1.total()).then_with(|| a.0.cmp(&b.0)));
    v
}

/// CTC prefix beam search over `log_probs[T×(V+1)]`, keeping `beam`
/// prefixes after each frame and returning the best `n` distinct ones.
pub fn prefix_beam_search_nbest(log_probs: &Tensor, beam: usize, n: usize) -> Result<NBestList> {
    if n == 0 || beam < n {
        return Err(Error::Config(format!("prefix beam search needs beam ≥ n ≥ 1, got beam {beam}, n {n}")));
    }
    if log_probs.ndim() != 2 {
        return Err(Error::dim("prefix_beam_search", log_probs.shape(), &[0, 0]));
    }
    let width = log_probs.cols();
    let mut beams: Vec<(Vec<usize>, Mass)> = vec![(
        Vec::new(),
        Mass {
            blank: 0.0,
            non_blank: f64::NEG_INFINITY,
        },
    )];
    for t in 0..log_probs.rows() {
        let row = log_probs.row(t);
        let mut next: BTreeMap<Vec<usize>, Mass> = BTreeMap::new();
        for (prefix, mass) in &beams {
            let total = mass.total();
            let entry = next.entry(prefix.clone()).or_insert(Mass::EMPTY);
            log_add(&mut entry.blank, total + row[BLANK]);
            let last = prefix.last().copied();
            for (c, &lp) in row.iter().enumerate().skip(1) {
                if Some(c) == last {
                    // Repeat without an intervening blank stays on the prefix.
                    log_add(&mut next.get_mut(prefix).expect("inserted above").non_blank, mass.non_blank + lp);
                    let mut ext = prefix.clone();
                    ext.push(c);
                    log_add(&mut next.entry(ext).or_insert(Mass::EMPTY).non_blank, mass.blank + lp);
                } else {
                    let mut ext = prefix.clone();
                    ext.push(c);
                    log_add(&mut next.entry(ext).or_insert(Mass::EMPTY).non_blank, total + lp);
                }
            }
        }
        let mut r = ranked(next);
        r.truncate(beam);
        beams = r;
        debug_assert!(beams.iter().all(|(p, _)| p.iter().all(|&c| c < width)));
    }
    let candidates = beams
        .into_iter()
        .take(n)
        .map(|(p, m)| (PhonemeSeq(p), m.total()))
        .collect();
    Ok(NBestList { candidates })
}
