use std::fmt;

use serde::Serialize;

use crate::data::{Lang, TargetVocab, CONTINUATION};

/// One step of a minimal edit alignment. Indices point into the reference
/// (`r`) and hypothesis (`h`).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EditOp {
    Match { r: usize, h: usize },
    Sub { r: usize, h: usize },
    Ins { h: usize },
    Del { r: usize },
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize)]
pub struct EditCounts {
    pub distance: usize,
    pub sub: usize,
    pub ins: usize,
    pub del: usize,
}

/// Levenshtein alignment with unit costs. Among minimal alignments the
/// backtrace prefers, from the end, a diagonal step, then a deletion, then an
/// insertion.
pub fn align<T: PartialEq>(reference: &[T], hypothesis: &[T]) -> Vec<EditOp> {
    let (n, m) = (reference.len(), hypothesis.len());
    let w = m + 1;
    let mut d = vec![0usize; (n + 1) * w];
    for i in 0..=n {
        d[i * w] = i;
    }
    for j in 0..=m {
        d[j] = j;
    }
    for i in 1..=n {
        for j in 1..=m {
            let diag = d[(i - 1) * w + j - 1] + usize::from(reference[i - 1] != hypothesis[j - 1]);
            d[i * w + j] = diag.min(d[(i - 1) * w + j] + 1).min(d[i * w + j - 1] + 1);
        }
    }
    let mut ops = Vec::with_capacity(n.max(m));
    let (mut i, mut j) = (n, m);
    while i > 0 || j > 0 {
        let here = d[i * w + j];
        if i > 0 && j > 0 {
            let same = reference[i - 1] == hypothesis[j - 1];
            if d[(i - 1) * w + j - 1] + usize::from(!same) == here {
                ops.push(if same {
                    EditOp::Match { r: i - 1, h: j - 1 }
                } else {
                    EditOp::Sub { r: i - 1, h: j - 1 }
                });
                i -= 1;
                j -= 1;
                continue;
            }
        }
        if i > 0 && d[(i - 1) * w + j] + 1 == here {
            ops.push(EditOp::Del { r: i - 1 });
            i -= 1;
        } else {
            ops.push(EditOp::Ins { h: j - 1 });
            j -= 1;
        }
    }
    ops.reverse();
    ops
}

pub fn counts(ops: &[EditOp]) -> EditCounts {
    let mut c = EditCounts::default();
    for op in ops {
        match op {
            EditOp::Match { .. } => {}
            EditOp::Sub { .. } => c.sub += 1,
            EditOp::Ins { .. } => c.ins += 1,
            EditOp::Del { .. } => c.del += 1,
        }
    }
    c.distance = c.sub + c.ins + c.del;
    c
}

/// Minimal edit distance and its substitution/insertion/deletion split.
pub fn edit_distance<T: PartialEq>(reference: &[T], hypothesis: &[T]) -> EditCounts {
    counts(&align(reference, hypothesis))
}

/// A scoring unit: an α character or a whole β word.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct MixedUnit {
    pub symbol: String,
    pub lang: Lang,
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct MixedUnitSeq {
    pub units: Vec<MixedUnit>,
    /// Problems found while merging pieces (dangling continuations).
    pub warnings: Vec<String>,
}

impl MixedUnitSeq {
    pub fn symbols(&self) -> Vec<&str> {
        self.units.iter().map(|u| u.symbol.as_str()).collect()
    }
}

/// Turns output ids into scoring units: α ids become characters; β pieces
/// are joined into words, a piece ending in `@@` continuing into the next.
/// Special ids are dropped. A continuation piece with nothing to continue
/// into is kept as written (marker included) and reported in `warnings`.
pub fn to_mixed_units(ids: &[usize], vocab: &TargetVocab) -> MixedUnitSeq {
    let mut out = MixedUnitSeq::default();
    let mut pending: Option<String> = None;
    let flush_dangling = |out: &mut MixedUnitSeq, pending: &mut Option<String>| {
        if let Some(p) = pending.take() {
            out.warnings.push(format!("dangling word piece `{p}{CONTINUATION}`"));
            out.units.push(MixedUnit {
                symbol: format!("{p}{CONTINUATION}"),
                lang: Lang::Beta,
            });
        }
    };
    for &id in ids {
        let (Some(lang), Some(unit)) = (vocab.lang(id), vocab.unit(id)) else {
            continue;
        };
        match lang {
            Lang::Alpha => {
                flush_dangling(&mut out, &mut pending);
                out.units.push(MixedUnit {
                    symbol: unit.to_string(),
                    lang,
                });
            }
            Lang::Beta => {
                let mut word = pending.take().unwrap_or_default();
                if let Some(stem) = unit.strip_suffix(CONTINUATION) {
                    word.push_str(stem);
                    pending = Some(word);
                } else {
                    word.push_str(unit);
                    out.units.push(MixedUnit { symbol: word, lang });
                }
            }
        }
    }
    flush_dangling(&mut out, &mut pending);
    if !out.warnings.is_empty() {
        log::warn!("{}", out.warnings.join("; "));
    }
    out
}

/// Mixed error rate with a per-language split.
#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct EvalReport {
    pub utterances: usize,
    pub ref_units: usize,
    pub ref_alpha: usize,
    pub ref_beta: usize,
    pub sub: usize,
    pub ins: usize,
    pub del: usize,
    pub errors: usize,
    pub errors_alpha: usize,
    pub errors_beta: usize,
    /// `errors / ref_units`.
    pub mer: f64,
    /// α errors per α reference character.
    pub cer_alpha: f64,
    /// β errors per β reference word.
    pub wer_beta: f64,
}

fn rate(errors: usize, total: usize) -> f64 {
    if total == 0 {
        if errors == 0 {
            0.0
        } else {
            f64::INFINITY
        }
    } else {
        errors as f64 / total as f64
    }
}

/// Language charged for each non-match op: the aligned reference unit's;
/// for an insertion, the next reference unit's, or the previous one's at the
/// end, or the inserted unit's own when the reference is empty.
fn attribute(ops: &[EditOp], reference: &[MixedUnit], hypothesis: &[MixedUnit]) -> Vec<(EditOp, Lang)> {
    let ref_at = |k: usize| match ops[k] {
        EditOp::Match { r, .. } | EditOp::Sub { r, .. } | EditOp::Del { r } => Some(r),
        EditOp::Ins { .. } => None,
    };
    ops.iter()
        .enumerate()
        .filter(|(_, op)| !matches!(op, EditOp::Match { .. }))
        .map(|(k, &op)| {
            let lang = match op {
                EditOp::Sub { r, .. } | EditOp::Del { r } => reference[r].lang,
                EditOp::Ins { h } => (k + 1..ops.len())
                    .find_map(ref_at)
                    .or_else(|| (0..k).rev().find_map(ref_at))
                    .map_or(hypothesis[h].lang, |r| reference[r].lang),
                EditOp::Match { .. } => unreachable!(),
            };
            (op, lang)
        })
        .collect()
}

/// Scores hypothesis unit sequences against references.
pub fn mer(refs: &[MixedUnitSeq], hyps: &[MixedUnitSeq]) -> crate::Result<EvalReport> {
    if refs.len() != hyps.len() {
        return Err(crate::Error::Input(format!(
            "{} references but {} hypotheses",
            refs.len(),
            hyps.len()
        )));
    }
    let mut rep = EvalReport {
        utterances: refs.len(),
        ..EvalReport::default()
    };
    for (r, h) in refs.iter().zip(hyps) {
        rep.ref_units += r.units.len();
        rep.ref_alpha += r.units.iter().filter(|u| u.lang == Lang::Alpha).count();
        rep.ref_beta += r.units.iter().filter(|u| u.lang == Lang::Beta).count();
        let ops = align(&r.units, &h.units);
        let c = counts(&ops);
        rep.sub += c.sub;
        rep.ins += c.ins;
        rep.del += c.del;
        for (_, lang) in attribute(&ops, &r.units, &h.units) {
            match lang {
                Lang::Alpha => rep.errors_alpha += 1,
                Lang::Beta => rep.errors_beta += 1,
            }
        }
    }
    rep.errors = rep.sub + rep.ins + rep.del;
    debug_assert_eq!(rep.errors, rep.errors_alpha + rep.errors_beta);
    rep.mer = rate(rep.errors, rep.ref_units);
    rep.cer_alpha = rate(rep.errors_alpha, rep.ref_alpha);
    rep.wer_beta = rate(rep.errors_beta, rep.ref_beta);
    Ok(rep)
}

impl fmt::Display for EvalReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "{:<10} {:>8} {:>8} {:>8}", "", "All", "α (CER)", "β (WER)")?;
        writeln!(
            f,
            "{:<10} {:>7.2}% {:>7.2}% {:>7.2}%",
            "error",
            100.0 * self.mer,
            100.0 * self.cer_alpha,
            100.0 * self.wer_beta
        )?;
        writeln!(f, "{:<10} {:>8} {:>8} {:>8}", "ref units", self.ref_units, self.ref_alpha, self.ref_beta)?;
        writeln!(f, "{:<10} {:>8} {:>8} {:>8}", "errors", self.errors, self.errors_alpha, self.errors_beta)?;
        write!(
            f,
            "utterances {}  sub {}  ins {}  del {}",
            self.utterances, self.sub, self.ins, self.del
        )
    }
}

/// Phoneme error rate.
#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct PerReport {
    pub utterances: usize,
    pub ref_len: usize,
    pub sub: usize,
    pub ins: usize,
    pub del: usize,
    pub per: f64,
}

/// PER over id sequences; ids equal to `skip` (e.g. `<wb>`) are removed
/// from both sides first.
pub fn per(refs: &[Vec<usize>], hyps: &[Vec<usize>], skip: Option<usize>) -> crate::Result<PerReport> {
    if refs.len() != hyps.len() {
        return Err(crate::Error::Input(format!(
            "{} references but {} hypotheses",
            refs.len(),
            hyps.len()
        )));
    }
    let keep = |s: &[usize]| -> Vec<usize> { s.iter().copied().filter(|&x| Some(x) != skip).collect() };
    let mut rep = PerReport {
        utterances: refs.len(),
        ..PerReport::default()
    };
    for (r, h) in refs.iter().zip(hyps) {
        let (r, h) = (keep(r), keep(h));
        let c = edit_distance(&r, &h);
        rep.ref_len += r.len();
        rep.sub += c.sub;
        rep.ins += c.ins;
        rep.del += c.del;
    }
    rep.per = rate(rep.sub + rep.ins + rep.del, rep.ref_len);
    Ok(rep)
}

impl fmt::Display for PerReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "PER {:.2}%  (utterances {}, ref phonemes {}, sub {}, ins {}, del {})",
            100.0 * self.per,
            self.utterances,
            self.ref_len,
            self.sub,
            self.ins,
            self.del
        )
    }
}
