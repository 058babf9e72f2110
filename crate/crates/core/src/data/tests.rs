use std::collections::HashSet;

use super::*;
use crate::ctc::{ctc_feasible, PhonemeClass, PhonemeSeq};
use crate::model::TargetSeq;
use crate::nn::subsampled_len;

fn small_config() -> SynthConfig {
    SynthConfig {
        n_cs_train: 30,
        n_alpha_train: 20,
        n_beta_train: 10,
        n_dev: 8,
        n_test: 8,
        n_text: 25,
        ..SynthConfig::default()
    }
}

#[test]
fn lexicon_layout_matches_config() {
    let cfg = SynthConfig::default();
    let lex = Lexicon::generate(&cfg).unwrap();
    assert_eq!(lex.vocab.len(), cfg.target_vocab());
    assert_eq!(lex.inventory.size(), cfg.phoneme_vocab());
    assert_eq!(lex.alpha.len(), 40);
    assert_eq!(lex.beta.len(), 30);
    assert_eq!(lex.vocab.ids_of(Lang::Beta).len(), 50);
    assert_eq!((0..lex.vocab.len()).filter(|&i| lex.vocab.is_continuation(i)).count(), 20);
    for e in &lex.alpha {
        assert!((1..=2).contains(&e.phonemes.len()));
        assert!(e.phonemes.iter().all(|&p| lex.inventory.class(p) == PhonemeClass::Alpha));
    }
    for w in &lex.beta {
        assert_eq!(w.phonemes.last(), Some(&lex.inventory.wb_id()));
        for &p in &w.pieces {
            let c = lex.piece_code(p).unwrap();
            assert!((2..=3).contains(&c.len()));
            assert!(c.iter().all(|&x| lex.inventory.class(x) == PhonemeClass::Beta));
        }
    }
    // Homophones differ in tone.
    let mut by_code: std::collections::HashMap<&Vec<usize>, Vec<usize>> = Default::default();
    for e in &lex.alpha {
        by_code.entry(&e.phonemes).or_default().push(e.tone);
    }
    assert_eq!(by_code.values().filter(|t| t.len() == 2).count(), 12);
    assert!(by_code.values().all(|t| t.len() < 2 || t[0] != t[1]));
}

#[test]
fn codes_are_prefix_free_within_each_language() {
    let lex = Lexicon::generate(&SynthConfig::default()).unwrap();
    let alpha: HashSet<&Vec<usize>> = lex.alpha.iter().map(|e| &e.phonemes).collect();
    for a in &alpha {
        for b in &alpha {
            assert!(a == b || !b.starts_with(a));
        }
    }
    let pieces: Vec<&[usize]> = lex.vocab.ids_of(Lang::Beta).into_iter().map(|p| lex.piece_code(p).unwrap()).collect();
    for (i, a) in pieces.iter().enumerate() {
        for (j, b) in pieces.iter().enumerate() {
            assert!(i == j || !b.starts_with(a));
        }
    }
}

#[test]
fn text_to_phonemes_examples() {
    let lex = Lexicon::generate(&SynthConfig::default()).unwrap();
    let c = &lex.alpha[30];
    let t = TargetSeq::new(vec![c.unit], lex.vocab.len()).unwrap();
    assert_eq!(lex.text_to_phonemes(&t).unwrap().ids(), c.phonemes.as_slice());

    let w = &lex.beta[0];
    let t = TargetSeq::new(w.pieces.clone(), lex.vocab.len()).unwrap();
    assert_eq!(lex.text_to_phonemes(&t).unwrap().ids(), w.phonemes.as_slice());

    assert!(matches!(lex.units_to_phonemes(&["nope".to_string()]), Err(crate::Error::Oov(u)) if u == "nope"));
    // Dangling continuation piece.
    let t = TargetSeq::new(vec![w.pieces[0]], lex.vocab.len()).unwrap();
    assert!(lex.text_to_phonemes(&t).is_err());
}

#[test]
fn greedy_inverter_round_trips_unambiguous_lexicon() {
    let cfg = SynthConfig {
        n_homophone_pairs: 0,
        ..SynthConfig::default()
    };
    let lex = Lexicon::generate(&cfg).unwrap();
    assert!(lex.is_unambiguous());
    for seed in 0..300 {
        let mix = [MixTag::Alpha, MixTag::Beta, MixTag::CodeSwitch][seed % 3];
        let t = sample_sentence(&lex, seed as u64, mix, 2, 8).unwrap();
        let p = lex.text_to_phonemes(&t).unwrap();
        assert_eq!(lex.phonemes_to_text(&p).unwrap(), t);
    }
    assert!(!Lexicon::generate(&SynthConfig::default()).unwrap().is_unambiguous());
}

#[test]
fn lexicon_text_round_trip() {
    let lex = Lexicon::generate(&SynthConfig::default()).unwrap();
    let text = lex.to_text();
    assert!(text.lines().all(|l| l.split('\t').count() == 2));
    let back = Lexicon::from_text(&text, lex.inventory.clone()).unwrap();
    assert_eq!(back.vocab, lex.vocab);
    assert_eq!(back.to_text(), text);
    for p in lex.vocab.ids_of(Lang::Beta) {
        assert_eq!(back.piece_code(p), lex.piece_code(p));
    }
}

#[test]
fn sample_sentence_contracts() {
    let lex = Lexicon::generate(&SynthConfig::default()).unwrap();
    for seed in 0..200u64 {
        let a = sample_sentence(&lex, seed, MixTag::Alpha, 3, 6).unwrap();
        assert!(a.units().iter().all(|&u| lex.vocab.lang(u) == Some(Lang::Alpha)));
        assert!((3..=6).contains(&a.len()));
        let b = sample_sentence(&lex, seed, MixTag::Beta, 3, 6).unwrap();
        assert!(b.units().iter().all(|&u| lex.vocab.lang(u) == Some(Lang::Beta)));
        let c = sample_sentence(&lex, seed, MixTag::CodeSwitch, 3, 6).unwrap();
        let langs: HashSet<_> = c.units().iter().map(|&u| lex.vocab.lang(u)).collect();
        assert_eq!(langs.len(), 2);
        assert_eq!(c, sample_sentence(&lex, seed, MixTag::CodeSwitch, 3, 6).unwrap());
    }
    assert!(sample_sentence(&lex, 0, MixTag::CodeSwitch, 1, 1).is_err());
}

#[test]
fn features_examples() {
    let cfg = SynthConfig::default();
    let ac = Acoustics::generate(&cfg).unwrap();
    for p in &ac.prototypes[1..] {
        assert!((p.iter().map(|x| x * x).sum::<f64>().sqrt() - 1.0).abs() < 1e-12);
    }
    let seq = PhonemeSeq::new(vec![3, 7, 1, 20, 5]).unwrap();
    let (f, labels) = synthesize_features(&ac, &seq, None, 9, 0.0, 1).unwrap();
    assert!((2 * seq.len()..=4 * seq.len()).contains(&f.rows()));
    for (i, &l) in labels.iter().enumerate() {
        assert_eq!(f.row(i), ac.prototypes[l].as_slice());
    }
    let collapsed = crate::ctc::greedy_collapse(&labels);
    assert_eq!(collapsed, seq);
    let (again, _) = synthesize_features(&ac, &seq, None, 9, 0.0, 1).unwrap();
    assert_eq!(again, f);
    let (scaled, _) = synthesize_features(&ac, &seq, None, 9, 0.0, 4).unwrap();
    assert_eq!(scaled.rows(), 4 * f.rows());
    assert!(synthesize_features(&ac, &PhonemeSeq::default(), None, 0, 0.1, 1).is_err());
}

#[test]
fn nearest_prototype_recovers_frames_at_low_noise() {
    let cfg = SynthConfig::default();
    let ac = Acoustics::generate(&cfg).unwrap();
    let lex = Lexicon::generate(&cfg).unwrap();
    let (mut right, mut total) = (0, 0);
    for seed in 0..200u64 {
        let t = sample_sentence(&lex, seed, MixTag::CodeSwitch, 3, 6).unwrap();
        let p = lex.text_to_phonemes(&t).unwrap();
        let (f, labels) = synthesize_features(&ac, &p, None, seed, 0.1, 1).unwrap();
        for (i, &l) in labels.iter().enumerate() {
            right += usize::from(nearest_prototype(&ac, f.row(i)) == l);
            total += 1;
        }
    }
    assert!(right as f64 / total as f64 >= 0.99, "{right}/{total}");
}

#[test]
fn corpus_is_deterministic_disjoint_and_feasible() {
    let cfg = small_config();
    let a = build_corpus(&cfg).unwrap();
    let b = build_corpus(&cfg).unwrap();
    assert_eq!(a.train, b.train);
    assert_eq!(a.text, b.text);
    assert_eq!(a.lexicon, b.lexicon);
    assert_eq!(a.acoustics, b.acoustics);

    let set = |u: &[Utterance]| u.iter().map(|x| x.target.clone()).collect::<HashSet<_>>();
    let (tr, dv, te) = (set(&a.train), set(&a.dev), set(&a.test));
    let tx: HashSet<_> = a.text.iter().map(|x| x.target.clone()).collect();
    assert!(tr.is_disjoint(&dv) && tr.is_disjoint(&te) && dv.is_disjoint(&te));
    assert!(tx.is_disjoint(&dv) && tx.is_disjoint(&te));
    assert!(a.dev.iter().chain(&a.test).all(|u| u.mix == MixTag::CodeSwitch));
    assert_eq!(a.train_subset(&[MixTag::Alpha]).len(), 20);

    for u in a.train.iter().chain(&a.dev).chain(&a.test) {
        assert_eq!(a.lexicon.text_to_phonemes(&u.target).unwrap(), u.phonemes);
        let frames = subsampled_len(u.features.len());
        assert!(ctc_feasible(frames, u.phonemes.ids()), "{}", u.id);
    }

    let other = build_corpus(&SynthConfig { seed: 2, ..cfg }).unwrap();
    assert_ne!(other.lexicon.to_text(), a.lexicon.to_text());
}

#[test]
fn corpus_round_trips_through_manifests() {
    let corpus = build_corpus(&small_config()).unwrap();
    let dir = tempfile::tempdir().unwrap();
    corpus.write(dir.path()).unwrap();
    let back = Corpus::load(dir.path()).unwrap();
    assert_eq!(back.train, corpus.train);
    assert_eq!(back.dev, corpus.dev);
    assert_eq!(back.test, corpus.test);
    assert_eq!(back.text, corpus.text);
    assert_eq!(back.config, corpus.config);

    let bad = dir.path().join("bad.jsonl");
    std::fs::write(&bad, "{\"id\": 3}\n").unwrap();
    assert!(matches!(read_manifest(&bad, &corpus.lexicon), Err(crate::Error::Json { line: 1, .. })));
}

#[test]
fn unit_frequencies_are_uniform() {
    // Each α draw picks one of 40 characters uniformly; check every count is
    // within 3σ of the multinomial expectation over 10k sentences.
    let lex = Lexicon::generate(&SynthConfig::default()).unwrap();
    let mut counts = vec![0usize; lex.vocab.len()];
    let mut draws = 0;
    for seed in 0..10_000u64 {
        let s = sample_sentence(&lex, seed, MixTag::Alpha, 3, 6).unwrap();
        for &u in s.units() {
            counts[u] += 1;
            draws += 1;
        }
    }
    let p = 1.0 / 40.0;
    let (mean, sd) = (draws as f64 * p, (draws as f64 * p * (1.0 - p)).sqrt());
    let alpha = lex.vocab.ids_of(Lang::Alpha);
    let outside = alpha.iter().filter(|&&u| (counts[u] as f64 - mean).abs() > 3.0 * sd).count();
    // 40 independent-ish 3σ checks: allow at most one excursion.
    assert!(outside <= 1, "{outside} units outside 3σ");
}
