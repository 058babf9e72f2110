mod common;

use common::{exhaustive_label_probs, log_tensor, random_probs};
use decoupled_asr::autodiff::Graph;
use decoupled_asr::ctc::{ctc_loss, prefix_beam_search_nbest, PhonemeSeq};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn loss(probs: &[Vec<f64>], label: &[usize]) -> f64 {
    let mut g = Graph::eval();
    let lp = g.constant(log_tensor(probs));
    let l = ctc_loss(&mut g, lp, &PhonemeSeq::new(label.to_vec()).unwrap()).unwrap();
    g.value(l).item()
}

#[test]
fn loss_matches_exhaustive_alignments() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for _ in 0..200 {
        let t = rng.random_range(1..=6);
        let v = rng.random_range(1..=4);
        let len = rng.random_range(0..=3.min(t));
        let label: Vec<usize> = (0..len).map(|_| rng.random_range(1..=v)).collect();
        let probs = random_probs(&mut rng, t, v + 1);
        let table = exhaustive_label_probs(&probs);
        let got = loss(&probs, &label);
        match table.get(&label) {
            Some(p) => assert!((got - -p.ln()).abs() < 1e-9, "{label:?}: {got} vs {}", -p.ln()),
            None => assert_eq!(got, f64::INFINITY),
        }
    }
}

#[test]
fn probabilities_over_all_labels_sum_to_at_most_one() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let (t, v) = (4, 2);
    let probs = random_probs(&mut rng, t, v + 1);
    let mut total = 0.0;
    for len in 0..=t {
        for code in 0..v.pow(len as u32) {
            let label: Vec<usize> = (0..len).map(|i| (code / v.pow(i as u32)) % v + 1).collect();
            let l = loss(&probs, &label);
            total += (-l).exp();
        }
    }
    assert!(total <= 1.0 + 1e-9);
    assert!((total - 1.0).abs() < 1e-9);
}

#[test]
fn beam_top1_matches_exhaustive_argmax() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for _ in 0..100 {
        let t = rng.random_range(1..=5);
        let v = rng.random_range(1..=3);
        let probs = random_probs(&mut rng, t, v + 1);
        let table = exhaustive_label_probs(&probs);
        let (best, p) = table
            .iter()
            .max_by(|a, b| a.1.total_cmp(b.1))
            .map(|(l, p)| (l.clone(), *p))
            .unwrap();
        let nb = prefix_beam_search_nbest(&log_tensor(&probs), table.len(), 1).unwrap();
        let (seq, score) = nb.best().unwrap();
        assert_eq!(seq.ids(), best.as_slice());
        assert!((score - p.ln()).abs() < 1e-9);
    }
}

#[test]
fn nbest_scores_equal_label_probabilities() {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let probs = random_probs(&mut rng, 5, 3);
    let table = exhaustive_label_probs(&probs);
    let nb = prefix_beam_search_nbest(&log_tensor(&probs), table.len(), 5).unwrap();
    for (seq, score) in &nb.candidates {
        assert!((score - table[seq.ids()].ln()).abs() < 1e-9);
    }
}

proptest! {
    #[test]
    fn nbest_is_distinct_and_sorted(seed in 0u64..10_000, t in 1usize..12, v in 1usize..5, beam in 3usize..8) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let probs = random_probs(&mut rng, t, v + 1);
        let nb = prefix_beam_search_nbest(&log_tensor(&probs), beam, 3).unwrap();
        prop_assert!(nb.len() <= 3);
        for i in 0..nb.len() {
            for j in i + 1..nb.len() {
                prop_assert_ne!(&nb.candidates[i].0, &nb.candidates[j].0);
            }
            if i > 0 {
                prop_assert!(nb.candidates[i - 1].1 >= nb.candidates[i].1);
            }
        }
    }

    #[test]
    fn beam_scores_are_lower_bounds_and_full_width_dominates(seed in 0u64..10_000, t in 1usize..6, v in 1usize..4, beam in 1usize..6) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let probs = random_probs(&mut rng, t, v + 1);
        let exact = exhaustive_label_probs(&probs);
        let lp = log_tensor(&probs);
        let (seq, narrow) = prefix_beam_search_nbest(&lp, beam, 1).unwrap().best().cloned().unwrap();
        prop_assert!(narrow <= exact[seq.ids()].ln() + 1e-9);
        let full = prefix_beam_search_nbest(&lp, exact.len(), 1).unwrap().best().unwrap().1;
        prop_assert!(full >= narrow - 1e-12, "beam {}: {} vs unpruned {}", beam, narrow, full);
    }
}

/// Pruning drops alignments, so a wider beam can find the better label yet
/// report a lower in-beam mass for it than the narrow beam gave its winner.
#[test]
fn wider_ctc_beam_can_lower_top1_score() {
    let mut rng = ChaCha8Rng::seed_from_u64(2057);
    let probs = random_probs(&mut rng, 9, 5);
    let exact = exhaustive_label_probs(&probs);
    let lp = log_tensor(&probs);
    let (narrow_seq, narrow) = prefix_beam_search_nbest(&lp, 5, 1).unwrap().best().cloned().unwrap();
    let (wide_seq, wide) = prefix_beam_search_nbest(&lp, 6, 1).unwrap().best().cloned().unwrap();
    assert!(wide < narrow);
    assert!(exact[wide_seq.ids()] > exact[narrow_seq.ids()]);
}
