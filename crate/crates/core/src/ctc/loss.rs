use super::{PhonemeSeq, BLANK};
use crate::autodiff::{Graph, Tensor, Var};
use crate::error::{Error, Result};

/// Fewest frames that can emit `label`: one per symbol plus one blank
/// between each pair of equal neighbours.
pub fn min_frames(label: &[usize]) -> usize {
    label.len() + label.windows(2).filter(|w| w[0] == w[1]).count()
}

pub fn ctc_feasible(frames: usize, label: &[usize]) -> bool {
    frames >= min_frames(label)
}

/// `-log P(label | log_probs)` summed over every alignment, via the forward
/// recursion over the blank-extended label in log space.
///
/// `log_probs` is `[T×(V+1)]` with blank in column 0. An infeasible label
/// yields a constant `+∞` node, which carries no gradient.
pub fn ctc_loss(g: &mut Graph, log_probs: Var, label: &PhonemeSeq) -> Result<Var> {
    let (frames, width) = match g.shape(log_probs) {
        [t, w] => (*t, *w),
        s => return Err(Error::dim("ctc_loss", s, &[0, label.len() + 1])),
    };
    let label = label.ids();
    if let Some(&bad) = label.iter().find(|&&id| id >= width) {
        return Err(Error::Input(format!("label id {bad} outside output width {width}")));
    }
    if !ctc_feasible(frames, label) {
        return Ok(g.constant(Tensor::scalar(f64::INFINITY)));
    }

    // Blank-extended label: ·, l₁, ·, l₂, …, l_L, ·
    let mut ext = Vec::with_capacity(2 * label.len() + 1);
    ext.push(BLANK);
    for &l in label {
        ext.push(l);
        ext.push(BLANK);
    }
    let s_len = ext.len();
    let shift1: Vec<Option<usize>> = (0..s_len).map(|s| s.checked_sub(1)).collect();
    let shift2: Vec<Option<usize>> = (0..s_len)
        .map(|s| (s >= 2 && ext[s] != BLANK && ext[s] != ext[s - 2]).then(|| s - 2))
        .collect();
    let emit_index = |t: usize| ext.iter().map(|&c| Some(t * width + c)).collect::<Vec<_>>();

    let start: Vec<Option<usize>> = (0..s_len)
        .map(|s| (s < 2).then_some(ext[s]))
        .collect();
    let mut alpha = g.gather(log_probs, start, f64::NEG_INFINITY)?;
    for t in 1..frames {
        let stay = alpha;
        let step = g.gather(alpha, shift1.clone(), f64::NEG_INFINITY)?;
        let skip = g.gather(alpha, shift2.clone(), f64::NEG_INFINITY)?;
        let prev = g.log_add_exp(&[stay, step, skip])?;
        let emit = g.gather(log_probs, emit_index(t), 0.0)?;
        alpha = g.add(prev, emit)?;
    }
    let ends = if s_len == 1 { vec![Some(0)] } else { vec![Some(s_len - 1), Some(s_len - 2)] };
    let tail = g.gather(alpha, ends, f64::NEG_INFINITY)?;
    let total = g.log_sum_exp(tail)?;
    Ok(g.scale(total, -1.0))
}
