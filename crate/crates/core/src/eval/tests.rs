use proptest::prelude::*;

use super::*;
use crate::data::{Lang, TargetVocab};
use crate::Result;

fn vocab() -> TargetVocab {
    let alpha: Vec<String> = ["丁", "七", "丈"].iter().map(|s| s.to_string()).collect();
    let beta: Vec<String> = ["he@@", "llo", "wor@@", "ld", "cat"].iter().map(|s| s.to_string()).collect();
    TargetVocab::new(&alpha, &beta).unwrap()
}

fn units(v: &TargetVocab, s: &[&str]) -> Vec<usize> {
    s.iter().map(|u| v.id(u).unwrap()).collect()
}

fn seq(v: &TargetVocab, s: &[&str]) -> MixedUnitSeq {
    to_mixed_units(&units(v, s), v)
}

/// Plain recursive Levenshtein distance.
fn naive_distance(a: &[u8], b: &[u8]) -> usize {
    match (a.split_first(), b.split_first()) {
        (None, _) => b.len(),
        (_, None) => a.len(),
        (Some((x, ra)), Some((y, rb))) => {
            let sub = naive_distance(ra, rb) + usize::from(x != y);
            sub.min(naive_distance(ra, b) + 1).min(naive_distance(a, rb) + 1)
        }
    }
}

#[test]
fn edit_distance_examples() {
    assert_eq!(edit_distance(&[1, 2, 3], &[1, 2, 3]), EditCounts::default());
    let c = edit_distance(&['a', 'b', 'c'], &['a', 'x', 'c']);
    assert_eq!((c.distance, c.sub, c.ins, c.del), (1, 1, 0, 0));
    let c = edit_distance::<u8>(&[], &[4, 5, 6]);
    assert_eq!((c.distance, c.ins), (3, 3));
    let c = edit_distance::<u8>(&[4, 5], &[]);
    assert_eq!((c.distance, c.del), (2, 2));
}

proptest! {
    #[test]
    fn edit_distance_matches_recursion_and_is_symmetric(
        a in prop::collection::vec(0u8..3, 0..7),
        b in prop::collection::vec(0u8..3, 0..7),
    ) {
        let ab = edit_distance(&a, &b);
        prop_assert_eq!(ab.distance, naive_distance(&a, &b));
        prop_assert_eq!(ab.sub + ab.ins + ab.del, ab.distance);
        prop_assert_eq!(edit_distance(&b, &a).distance, ab.distance);
        // Replaying the alignment rebuilds the hypothesis.
        let rebuilt: Vec<u8> = align(&a, &b)
            .iter()
            .filter_map(|op| match *op {
                EditOp::Match { h, .. } | EditOp::Sub { h, .. } | EditOp::Ins { h } => Some(b[h]),
                EditOp::Del { .. } => None,
            })
            .collect();
        prop_assert_eq!(rebuilt, b);
    }
}

#[test]
fn mixed_units_merge_pieces() {
    let v = vocab();
    let s = seq(&v, &["丁", "七"]);
    assert_eq!(s.symbols(), ["丁", "七"]);
    assert!(s.units.iter().all(|u| u.lang == Lang::Alpha));
    let s = seq(&v, &["he@@", "llo"]);
    assert_eq!(s.symbols(), ["hello"]);
    assert_eq!(s.units[0].lang, Lang::Beta);
    let s = seq(&v, &["cat", "丈", "wor@@", "ld"]);
    assert_eq!(s.symbols(), ["cat", "丈", "world"]);
    assert!(s.warnings.is_empty());
    let mut ids = units(&v, &["he@@", "丁"]);
    ids.insert(0, crate::model::SOS);
    ids.push(crate::model::EOS);
    let s = to_mixed_units(&ids, &v);
    assert_eq!(s.symbols(), ["he@@", "丁"]);
    assert_eq!(s.warnings.len(), 1);
}

#[test]
fn mer_examples() {
    let v = vocab();
    let r = seq(&v, &["丁", "七", "cat", "丈", "丁", "he@@", "llo", "七", "丈", "wor@@", "ld", "丁"]);
    assert_eq!(r.units.len(), 10);
    let rep = mer(std::slice::from_ref(&r), std::slice::from_ref(&r)).unwrap();
    assert_eq!((rep.mer, rep.cer_alpha, rep.wer_beta), (0.0, 0.0, 0.0));

    let h = seq(&v, &["丁", "七", "cat", "丈", "丁", "wor@@", "ld", "七", "丈", "wor@@", "ld", "丁"]);
    let rep = mer(&[r.clone()], &[h]).unwrap();
    assert_eq!(rep.mer, 0.1);
    assert_eq!(rep.wer_beta, 1.0 / 3.0);
    assert_eq!(rep.cer_alpha, 0.0);
    assert_eq!((rep.sub, rep.errors_beta), (1, 1));

    assert!(mer(&[r.clone(), r.clone()], &[r]).is_err());
}

#[test]
fn insertions_take_the_following_reference_language() {
    let v = vocab();
    let r = seq(&v, &["丁", "cat"]);
    // Inserted α unit before a β reference unit is charged to β.
    let rep = mer(&[r.clone()], &[seq(&v, &["丁", "七", "cat"])]).unwrap();
    assert_eq!((rep.ins, rep.errors_alpha, rep.errors_beta), (1, 0, 1));
    // At the end it falls back to the preceding unit.
    let rep = mer(&[r], &[seq(&v, &["丁", "cat", "丈"])]).unwrap();
    assert_eq!((rep.ins, rep.errors_alpha, rep.errors_beta), (1, 0, 1));
    // Empty reference: the inserted unit's own language.
    let rep = mer(&[MixedUnitSeq::default()], &[seq(&v, &["丈"])]).unwrap();
    assert_eq!((rep.errors_alpha, rep.errors_beta), (1, 0));
    assert!(rep.mer.is_infinite());
}

proptest! {
    #[test]
    fn per_language_errors_sum_to_total(
        r in prop::collection::vec(0usize..5, 0..8),
        h in prop::collection::vec(0usize..5, 0..8),
    ) {
        let v = vocab();
        let pool = ["丁", "七", "丈", "cat", "he@@"];
        let rs = seq(&v, &r.iter().map(|&i| pool[i]).collect::<Vec<_>>());
        let hs = seq(&v, &h.iter().map(|&i| pool[i]).collect::<Vec<_>>());
        let rep = mer(&[rs], &[hs]).unwrap();
        prop_assert_eq!(rep.errors_alpha + rep.errors_beta, rep.errors);
        prop_assert_eq!(rep.sub + rep.ins + rep.del, rep.errors);
    }
}

#[test]
fn per_can_skip_word_boundaries() {
    let refs = vec![vec![3, 1, 4, 1]];
    let hyps = vec![vec![3, 4, 1]];
    let with = per(&refs, &hyps, None).unwrap();
    assert_eq!((with.ref_len, with.del), (4, 1));
    let without = per(&refs, &hyps, Some(1)).unwrap();
    assert_eq!((without.ref_len, without.per), (2, 0.0));
}

#[test]
fn report_renders_table_and_json() {
    let v = vocab();
    let r = seq(&v, &["丁", "cat"]);
    let rep = mer(&[r.clone()], &[r]).unwrap();
    assert!(rep.to_string().contains("0.00%"));
    let json: serde_json::Value = serde_json::to_value(&rep).unwrap();
    assert_eq!(json["mer"], 0.0);
    assert_eq!(json["utterances"], 1);
}

/// Next-token tables indexed by the whole prefix, derived from a seed.
struct HashScorer {
    vocab: usize,
    seed: u64,
    sharp: f64,
}

impl StepScorer for HashScorer {
    fn next_log_probs(&mut self, prefix: &[usize]) -> Result<Vec<f64>> {
        let mut h = self.seed;
        for &t in prefix {
            h = crate::data::derive_seed(h, 7, t as u64);
        }
        let logits: Vec<f64> = (0..self.vocab)
            .map(|i| self.sharp * ((crate::data::derive_seed(h, 9, i as u64) >> 11) as f64 / (1u64 << 53) as f64))
            .collect();
        let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let z = logits.iter().map(|l| (l - m).exp()).sum::<f64>().ln() + m;
        Ok(logits.iter().map(|l| l - z).collect())
    }
}

fn greedy(s: &mut dyn StepScorer, start: usize, end: usize, max_len: usize) -> (Vec<usize>, f64, bool) {
    let mut prefix = vec![start];
    let mut total = 0.0;
    for _ in 0..max_len {
        let lp = s.next_log_probs(&prefix).unwrap();
        let best = (0..lp.len()).fold(0, |b, i| if lp[i] > lp[b] { i } else { b });
        total += lp[best];
        if best == end {
            return (prefix[1..].to_vec(), total, true);
        }
        prefix.push(best);
    }
    (prefix[1..].to_vec(), total, false)
}

#[test]
fn beam_one_is_greedy() {
    for seed in 0..50 {
        let mut s = HashScorer { vocab: 6, seed, sharp: 4.0 };
        let (tokens, lp, finished) = greedy(&mut s, 1, 2, 12);
        for scoring in [Scoring::Raw, Scoring::LengthNormalized] {
            let h = beam_search(&mut s, 1, 2, 1, 12, scoring).unwrap();
            assert_eq!(h.tokens, tokens);
            assert_eq!(h.log_prob, lp);
            assert_eq!(h.finished, finished);
        }
    }
}

/// Two-step decoder: first-token table, then a table per first token.
struct TwoStep {
    first: Vec<f64>,
    second: Vec<Vec<f64>>,
}

impl StepScorer for TwoStep {
    fn next_log_probs(&mut self, prefix: &[usize]) -> Result<Vec<f64>> {
        Ok(match prefix.len() {
            1 => self.first.clone(),
            2 => self.second[prefix[1]].clone(),
            _ => unreachable!("only two steps"),
        })
    }
}

fn random_log_dist(rng: &mut impl rand::Rng, v: usize) -> Vec<f64> {
    let p: Vec<f64> = (0..v).map(|_| rng.random_range(0.01..1.0)).collect();
    let z: f64 = p.iter().sum();
    p.iter().map(|x| (x / z).ln()).collect()
}

#[test]
fn two_step_beam_matches_exhaustive_search() {
    use rand::SeedableRng;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
    for v in [2usize, 3, 5, 8] {
        for _ in 0..20 {
            let mut toy = TwoStep {
                first: random_log_dist(&mut rng, v),
                second: (0..v).map(|_| random_log_dist(&mut rng, v)).collect(),
            };
            let mut best = (f64::NEG_INFINITY, vec![]);
            for a in 0..v {
                for b in 0..v {
                    let s = toy.first[a] + toy.second[a][b];
                    if s > best.0 {
                        best = (s, vec![a, b]);
                    }
                }
            }
            // No end marker is reachable (end = v), so every path has length 2.
            let h = beam_search(&mut toy, 0, v, v, 2, Scoring::Raw).unwrap();
            assert!(!h.finished);
            assert_eq!(h.tokens, best.1);
            assert!((h.log_prob - best.0).abs() < 1e-12);
        }
    }
}

#[test]
fn beam_search_contracts() {
    let mut s = HashScorer { vocab: 5, seed: 4, sharp: 3.0 };
    let a = beam_search(&mut s, 1, 2, 4, 10, Scoring::LengthNormalized).unwrap();
    let b = beam_search(&mut s, 1, 2, 4, 10, Scoring::LengthNormalized).unwrap();
    assert_eq!(a, b);
    assert!(beam_search(&mut s, 1, 2, 0, 10, Scoring::Raw).is_err());
    // End marker outside the vocabulary: the limit is hit and flagged.
    let h = beam_search(&mut s, 1, 99, 3, 4, Scoring::Raw).unwrap();
    assert!(!h.finished);
    assert_eq!(h.tokens.len(), 4);
    assert_eq!("raw".parse::<Scoring>().unwrap(), Scoring::Raw);
}

proptest! {
    /// Over two steps without an end marker, a wider beam keeps a superset
    /// of first tokens, so the best score cannot drop.
    #[test]
    fn wider_beam_never_lowers_two_step_score(v in 2usize..7, seed in any::<u64>()) {
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let mut toy = TwoStep {
            first: random_log_dist(&mut rng, v),
            second: (0..v).map(|_| random_log_dist(&mut rng, v)).collect(),
        };
        let mut prev = f64::NEG_INFINITY;
        for beam in 1..=v {
            let h = beam_search(&mut toy, 0, v, beam, 2, Scoring::Raw).unwrap();
            prop_assert!(h.log_prob >= prev);
            prev = h.log_prob;
        }
    }
}

/// Scorer with explicit tables for chosen prefixes, uniform elsewhere.
struct TreeScorer(std::collections::HashMap<Vec<usize>, Vec<f64>>);

impl StepScorer for TreeScorer {
    fn next_log_probs(&mut self, prefix: &[usize]) -> Result<Vec<f64>> {
        Ok(self.0.get(&prefix[1..]).cloned().unwrap_or_else(|| vec![0.25f64.ln(); 4]))
    }
}

#[test]
fn wider_beam_can_lower_best_score_in_general() {
    // Tokens: 0 = end, 1..=3 words. Beam 2 keeps the two continuations of
    // word 2, which look better after two steps but then flatten out, and
    // prunes the greedy path 1 3 <end>.
    let ln = |p: [f64; 4]| p.iter().map(|x| x.ln()).collect::<Vec<_>>();
    let tables = [
        (vec![], ln([0.01, 0.39, 0.35, 0.25])),
        (vec![1], ln([0.33, 0.01, 0.32, 0.34])),
        (vec![1, 3], ln([0.97, 0.01, 0.01, 0.01])),
        (vec![2], ln([0.01, 0.01, 0.49, 0.49])),
    ];
    let mut s = TreeScorer(tables.into_iter().collect());
    let narrow = beam_search(&mut s, 9, 0, 1, 5, Scoring::Raw).unwrap();
    let wide = beam_search(&mut s, 9, 0, 2, 5, Scoring::Raw).unwrap();
    assert_eq!(narrow.tokens, [1, 3]);
    assert!((narrow.log_prob - (0.39f64 * 0.34 * 0.97).ln()).abs() < 1e-12);
    assert!(wide.finished);
    assert!(wide.log_prob < narrow.log_prob);
}
