//! Scoring checked against fixtures produced by the standalone scorer in
//! `tests/fixtures/mer_oracle.py`.

use decoupled_asr::data::{Lang, TargetVocab};
use decoupled_asr::eval::{mer, to_mixed_units};
use serde_json::Value;

fn vocab() -> TargetVocab {
    let alpha: Vec<String> = "ABCDEFGHX".chars().map(String::from).collect();
    let beta: Vec<String> = ["ka", "ro", "mi", "tu", "ka@@", "ro@@", "ne@@", "li"].map(String::from).to_vec();
    TargetVocab::new(&alpha, &beta).unwrap()
}

fn fixtures() -> Value {
    let text = include_str!("fixtures/mer_cases.json");
    serde_json::from_str(text).unwrap()
}

fn strings(v: &Value) -> Vec<String> {
    v.as_array().unwrap().iter().map(|s| s.as_str().unwrap().to_string()).collect()
}

fn ids(vocab: &TargetVocab, v: &Value) -> Vec<usize> {
    vocab.encode(&strings(v)).unwrap()
}

#[test]
fn merging_matches_fixtures() {
    let vocab = vocab();
    let cases = fixtures()["merge"].as_array().unwrap().clone();
    assert_eq!(cases.len(), 20);
    for c in &cases {
        let got = to_mixed_units(&ids(&vocab, &c["pieces"]), &vocab);
        assert_eq!(got.symbols(), strings(&c["units"]), "{c}");
        let langs: Vec<String> = got
            .units
            .iter()
            .map(|u| if u.lang == Lang::Alpha { "a" } else { "b" }.to_string())
            .collect();
        assert_eq!(langs, strings(&c["langs"]), "{c}");
        assert_eq!(got.warnings.len() as u64, c["warnings"].as_u64().unwrap(), "{c}");
    }
}

#[test]
fn mer_matches_fixtures() {
    let vocab = vocab();
    let cases = fixtures()["mer"].as_array().unwrap().clone();
    assert_eq!(cases.len(), 20);
    let mut refs = Vec::new();
    let mut hyps = Vec::new();
    let n = |c: &Value, k: &str| c[k].as_u64().unwrap() as usize;
    for c in &cases {
        let r = to_mixed_units(&ids(&vocab, &c["ref"]), &vocab);
        let h = to_mixed_units(&ids(&vocab, &c["hyp"]), &vocab);
        let rep = mer(std::slice::from_ref(&r), std::slice::from_ref(&h)).unwrap();
        assert_eq!(
            (rep.ref_alpha, rep.ref_beta, rep.sub, rep.ins, rep.del, rep.errors_alpha, rep.errors_beta),
            (
                n(c, "ref_alpha"),
                n(c, "ref_beta"),
                n(c, "sub"),
                n(c, "ins"),
                n(c, "del"),
                n(c, "errors_alpha"),
                n(c, "errors_beta")
            ),
            "{c}"
        );
        refs.push(r);
        hyps.push(h);
    }
    // Corpus-level rates are ratios of summed counts.
    let all = mer(&refs, &hyps).unwrap();
    let sum = |k: &str| cases.iter().map(|c| n(c, k)).sum::<usize>();
    let errors = sum("sub") + sum("ins") + sum("del");
    assert_eq!(all.errors, errors);
    assert_eq!(all.mer, errors as f64 / (sum("ref_alpha") + sum("ref_beta")) as f64);
    assert_eq!(all.cer_alpha, sum("errors_alpha") as f64 / sum("ref_alpha") as f64);
    assert_eq!(all.wer_beta, sum("errors_beta") as f64 / sum("ref_beta") as f64);
}
