//! Minimal reverse-mode automatic differentiation over dense `f64` tensors.
//!
//! Computation is recorded on a [`Graph`] tape as it runs; [`Graph::backward`]
//! replays the tape in reverse. Every trainable computation in the crate
//! (attention, CTC, the fusion decoder) is expressed with these operations.

mod graph;
pub(crate) mod kernels;
mod tensor;

pub use graph::{ConvGeom, Graph, Mode, Var};
pub use tensor::Tensor;

use crate::error::Result;

/// Outcome of comparing analytic gradients against central differences.
#[derive(Clone, Debug)]
pub struct GradCheckReport {
    /// Largest per-element relative error over all checked inputs.
    pub max_rel_error: f64,
    /// Input index and flat element index where the maximum occurred.
    pub worst: (usize, usize),
    pub checked: usize,
    pub passed: bool,
}

/// Denominator floor for the relative error, so components whose true
/// derivative is numerically zero are compared on an absolute scale.
const REL_FLOOR: f64 = 1e-5;

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

/// Checks the gradient of a scalar function of one tensor.
pub fn grad_check<F>(f: F, x: &Tensor, h: f64, tol: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, Var) -> Result<Var>,
{
    grad_check_many(|g, xs| f(g, xs[0]), std::slice::from_ref(x), h, tol)
}

/// Checks gradients of a scalar function of several tensors, element by
/// element, against `(f(x+h) - f(x-h)) / 2h`. The function is evaluated on
/// an eval-mode graph.
pub fn grad_check_many<F>(f: F, xs: &[Tensor], h: f64, tol: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    assert!(h > 0.0, "finite-difference step must be positive");
    let eval = |inputs: &[Tensor]| -> Result<f64> {
        let mut g = Graph::eval();
        let vars: Vec<Var> = inputs.iter().map(|t| g.constant(t.clone())).collect();
        let out = f(&mut g, &vars)?;
        Ok(g.value(out).item())
    };

    let mut g = Graph::eval();
    let vars: Vec<Var> = xs.iter().map(|t| g.param(t.clone())).collect();
    let out = f(&mut g, &vars)?;
    g.backward(out)?;
    let analytic: Vec<Tensor> = vars
        .iter()
        .zip(xs)
        .map(|(&v, x)| g.grad(v).unwrap_or_else(|| Tensor::zeros(x.shape())))
        .collect();

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: (0, 0),
        checked: 0,
        passed: true,
    };
    let mut probe = xs.to_vec();
    for (which, x) in xs.iter().enumerate() {
        for j in 0..x.numel() {
            let orig = x.data()[j];
            probe[which].data_mut()[j] = orig + h;
            let plus = eval(&probe)?;
            probe[which].data_mut()[j] = orig - h;
            let minus = eval(&probe)?;
            probe[which].data_mut()[j] = orig;
            let numeric = (plus - minus) / (2.0 * h);
            let err = relative_error(analytic[which].data()[j], numeric);
            if err > report.max_rel_error || err.is_nan() {
                report.max_rel_error = if err.is_nan() { f64::INFINITY } else { err };
                report.worst = (which, j);
            }
            report.checked += 1;
        }
    }
    report.passed = report.max_rel_error < tol;
    Ok(report)
}
