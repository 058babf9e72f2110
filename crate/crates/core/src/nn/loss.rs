use crate::autodiff::{Graph, Tensor, Var};
use crate::error::{Error, Result};

/// Cross-entropy of `logits[L×V]` against the uniformly smoothed target
/// distribution (`1-ε` on the gold unit, `ε/(V-1)` on every other unit),
/// averaged over positions whose target is not `pad_id`.
pub fn label_smoothing_loss(
    g: &mut Graph,
    logits: Var,
    targets: &[usize],
    epsilon: f64,
    pad_id: usize,
) -> Result<Var> {
    let (len, vocab) = match g.shape(logits) {
        [l, v] => (*l, *v),
        s => return Err(Error::dim("label_smoothing_loss", s, &[targets.len(), 0])),
    };
    if !(0.0..1.0).contains(&epsilon) {
        return Err(Error::Config(format!("label smoothing {epsilon} outside [0, 1)")));
    }
    if targets.len() != len {
        return Err(Error::dim("label_smoothing_loss", &[len, vocab], &[targets.len()]));
    }
    if vocab < 2 {
        return Err(Error::Config("label smoothing needs at least two classes".into()));
    }
    if let Some(&bad) = targets.iter().find(|&&t| t >= vocab) {
        return Err(Error::Input(format!("target id {bad} outside vocabulary of {vocab}")));
    }
    let counted = targets.iter().filter(|&&t| t != pad_id).count();
    if counted == 0 {
        return Err(Error::Contract("every target position is padding".into()));
    }
    let off = epsilon / (vocab - 1) as f64;
    let mut weights = vec![0.0; len * vocab];
    for (row, &t) in weights.chunks_mut(vocab).zip(targets) {
        if t == pad_id {
            continue;
        }
        row.fill(off);
        row[t] = 1.0 - epsilon;
    }
    let q = g.constant(Tensor::new(vec![len, vocab], weights)?);
    let lp = g.log_softmax(logits)?;
    let weighted = g.mul(lp, q)?;
    let total = g.sum(weighted);
    Ok(g.scale(total, -1.0 / counted as f64))
}
