use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::kernels::{gemm, log_sum_exp, softmax_rows};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Whether stochastic operations (dropout) are active.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Geometry of a 2-D convolution over a `[channels, height, width]` input.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeom {
    pub fn out_len(&self, len: usize) -> usize {
        (len + 2 * self.pad - self.kernel) / self.stride + 1
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul { a: Var, b: Var, b_t: bool },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddBias { x: Var, bias: Var },
    Scale { x: Var, c: f64 },
    Exp(Var),
    Log(Var),
    Relu(Var),
    Softmax(Var),
    LogSoftmax(Var),
    LogSumExp(Var),
    LogAddExp(Vec<Var>),
    SumAll(Var),
    SumLast(Var),
    MulCol { x: Var, w: Var },
    ConcatCols(Vec<Var>),
    SliceCols { x: Var, start: usize },
    Gather { x: Var, index: Vec<Option<usize>> },
    Embedding { table: Var, ids: Vec<usize> },
    LayerNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<f64>, rstd: Vec<f64> },
    Dropout { x: Var, mask: Vec<f64> },
    Conv2d { x: Var, w: Var, b: Var, geom: ConvGeom },
    Reshape(Var),
    Transpose(Var),
    SwapLeading(Var),
    /// `x²` with a deliberately wrong backward rule, for negative controls.
    #[cfg(test)]
    CorruptedSquare(Var),
}

impl Op {
    fn inputs(&self) -> Vec<Var> {
        use Op::*;
        match self {
            Leaf => vec![],
            MatMul { a, b, .. } | Add(a, b) | Sub(a, b) | Mul(a, b) => vec![*a, *b],
            AddBias { x, bias } => vec![*x, *bias],
            MulCol { x, w } => vec![*x, *w],
            Scale { x, .. }
            | Exp(x)
            | Log(x)
            | Relu(x)
            | Softmax(x)
            | LogSoftmax(x)
            | LogSumExp(x)
            | SumAll(x)
            | SumLast(x)
            | SliceCols { x, .. }
            | Gather { x, .. }
            | Dropout { x, .. }
            | Reshape(x)
            | Transpose(x)
            | SwapLeading(x) => vec![*x],
            #[cfg(test)]
            CorruptedSquare(x) => vec![*x],
            LogAddExp(xs) | ConcatCols(xs) => xs.clone(),
            Embedding { table, .. } => vec![*table],
            LayerNorm { x, gamma, beta, .. } => vec![*x, *gamma, *beta],
            Conv2d { x, w, b, .. } => vec![*x, *w, *b],
        }
    }
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Tape of operations recorded in topological (creation) order.
///
/// Every operation appends one node; `backward` walks the tape in exact
/// reverse order. A graph is single-threaded and is discarded after use.
pub struct Graph {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
    mode: Mode,
    rng: ChaCha8Rng,
    backward_done: bool,
}

impl Graph {
    pub fn new(mode: Mode, seed: u64) -> Self {
        Graph {
            nodes: Vec::new(),
            grads: Vec::new(),
            mode,
            rng: ChaCha8Rng::seed_from_u64(seed),
            backward_done: false,
        }
    }

    /// Evaluation-mode graph; dropout is the identity.
    pub fn eval() -> Self {
        Self::new(Mode::Eval, 0)
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        let requires_grad = op.inputs().iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Trainable leaf.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Gradient of a leaf after [`Graph::backward`].
    pub fn grad(&self, v: Var) -> Option<Tensor> {
        let g = self.grads.get(v.0)?.as_ref()?;
        Some(Tensor::new(self.shape(v).to_vec(), g.clone()).expect("grad matches value shape"))
    }

    fn dims2(&self, v: Var, op: &'static str) -> Result<(usize, usize)> {
        match self.shape(v) {
            [r, c] => Ok((*r, *c)),
            s => Err(Error::dim(op, s, &[0, 0])),
        }
    }

    fn same_shape(&self, a: Var, b: Var, op: &'static str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::dim(op, self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    // ----- linear algebra -------------------------------------------------

    /// `a[m×k] · b[k×n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims2(a, "matmul")?;
        let (k2, n) = self.dims2(b, "matmul")?;
        if k != k2 {
            return Err(Error::dim("matmul", self.shape(a), self.shape(b)));
        }
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, self.value(a).data(), false, self.value(b).data(), false, &mut out, false);
        Ok(self.push(Tensor::new(vec![m, n], out)?, Op::MatMul { a, b, b_t: false }))
    }

    /// `a[m×k] · b[n×k]ᵀ`.
    pub fn matmul_bt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims2(a, "matmul_bt")?;
        let (n, k2) = self.dims2(b, "matmul_bt")?;
        if k != k2 {
            return Err(Error::dim("matmul_bt", self.shape(a), self.shape(b)));
        }
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, self.value(a).data(), false, self.value(b).data(), true, &mut out, false);
        Ok(self.push(Tensor::new(vec![m, n], out)?, Op::MatMul { a, b, b_t: true }))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let (r, c) = self.dims2(x, "transpose")?;
        let src = self.value(x).data();
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = src[i * c + j];
            }
        }
        Ok(self.push(Tensor::new(vec![c, r], out)?, Op::Transpose(x)))
    }

    // ----- elementwise ----------------------------------------------------

    fn zip_with(&mut self, a: Var, b: Var, op: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        self.same_shape(a, b, op)?;
        let (va, vb) = (self.value(a), self.value(b));
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(va.shape().to_vec(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.zip_with(a, b, "add", |x, y| x + y)?;
        Ok(self.push(t, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.zip_with(a, b, "sub", |x, y| x - y)?;
        Ok(self.push(t, Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.zip_with(a, b, "mul", |x, y| x * y)?;
        Ok(self.push(t, Op::Mul(a, b)))
    }

    /// Adds a bias vector `[n]` to every row of `x[..., n]`.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let n = self.value(x).cols();
        if self.shape(bias) != [n] {
            return Err(Error::dim("add_bias", self.shape(x), self.shape(bias)));
        }
        let b = self.value(bias).data();
        let mut data = self.value(x).data().to_vec();
        for row in data.chunks_mut(n) {
            for (v, bv) in row.iter_mut().zip(b) {
                *v += bv;
            }
        }
        let t = Tensor::new(self.shape(x).to_vec(), data)?;
        Ok(self.push(t, Op::AddBias { x, bias }))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let t = self.value(x).map(|v| v * c);
        self.push(t, Op::Scale { x, c })
    }

    pub fn exp(&mut self, x: Var) -> Var {
        let t = self.value(x).map(f64::exp);
        self.push(t, Op::Exp(x))
    }

    pub fn log(&mut self, x: Var) -> Result<Var> {
        if let Some(bad) = self.value(x).data().iter().find(|&&v| v <= 0.0 || v.is_nan()) {
            return Err(Error::Domain {
                op: "log",
                detail: format!("non-positive argument {bad}"),
            });
        }
        let t = self.value(x).map(f64::ln);
        Ok(self.push(t, Op::Log(x)))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let t = self.value(x).map(|v| v.max(0.0));
        self.push(t, Op::Relu(x))
    }

    /// Inverted dropout: in train mode zeroes each element with probability
    /// `p` and rescales survivors by `1/(1-p)`. Identity in eval mode.
    pub fn dropout(&mut self, x: Var, p: f64) -> Result<Var> {
        if !(0.0..1.0).contains(&p) {
            return Err(Error::Config(format!("dropout rate {p} outside [0, 1)")));
        }
        if self.mode == Mode::Eval || p == 0.0 {
            return Ok(x);
        }
        let keep = 1.0 / (1.0 - p);
        let n = self.value(x).numel();
        let mask: Vec<f64> = (0..n)
            .map(|_| if self.rng.random::<f64>() < p { 0.0 } else { keep })
            .collect();
        let v = self.value(x);
        let data = v.data().iter().zip(&mask).map(|(a, m)| a * m).collect();
        let t = Tensor::new(v.shape().to_vec(), data)?;
        Ok(self.push(t, Op::Dropout { x, mask }))
    }

    // ----- reductions and normalisers ------------------------------------

    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        self.masked_softmax(x, None)
    }

    /// Softmax along the last axis. Entries where `allowed` is false receive
    /// exactly zero weight; every row must allow at least one entry.
    pub fn masked_softmax(&mut self, x: Var, allowed: Option<&Arc<Vec<bool>>>) -> Result<Var> {
        let v = self.value(x);
        let cols = v.cols();
        if let Some(mask) = allowed {
            if mask.len() != v.numel() {
                return Err(Error::dim("masked_softmax", v.shape(), &[mask.len()]));
            }
            if let Some(r) = mask.chunks(cols).position(|row| !row.iter().any(|&b| b)) {
                return Err(Error::Contract(format!("softmax row {r} is fully masked")));
            }
        }
        let mut out = vec![0.0; v.numel()];
        softmax_rows(v.data(), cols, allowed.map(|m| m.as_slice()), &mut out);
        let t = Tensor::new(v.shape().to_vec(), out)?;
        Ok(self.push(t, Op::Softmax(x)))
    }

    pub fn log_softmax(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x);
        let cols = v.cols();
        let mut out = v.data().to_vec();
        for row in out.chunks_mut(cols) {
            let lse = log_sum_exp(row);
            for e in row.iter_mut() {
                *e -= lse;
            }
        }
        let t = Tensor::new(v.shape().to_vec(), out)?;
        Ok(self.push(t, Op::LogSoftmax(x)))
    }

    /// `log Σ exp` over the last axis; the result drops that axis.
    pub fn log_sum_exp(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x);
        let cols = v.cols();
        let out: Vec<f64> = v.data().chunks(cols).map(log_sum_exp).collect();
        let shape = v.shape()[..v.ndim().saturating_sub(1)].to_vec();
        let t = Tensor::new(shape, out)?;
        Ok(self.push(t, Op::LogSumExp(x)))
    }

    /// Elementwise `log Σₖ exp(xₖ)` across same-shaped operands. All-`-inf`
    /// positions stay `-inf` and pass back a zero gradient.
    pub fn log_add_exp(&mut self, xs: &[Var]) -> Result<Var> {
        let first = *xs
            .first()
            .ok_or_else(|| Error::Contract("log_add_exp of zero operands".into()))?;
        for &x in &xs[1..] {
            self.same_shape(first, x, "log_add_exp")?;
        }
        let n = self.value(first).numel();
        let mut buf = vec![0.0; xs.len()];
        let out = (0..n)
            .map(|i| {
                for (b, &x) in buf.iter_mut().zip(xs) {
                    *b = self.value(x).data()[i];
                }
                log_sum_exp(&buf)
            })
            .collect();
        let t = Tensor::new(self.shape(first).to_vec(), out)?;
        Ok(self.push(t, Op::LogAddExp(xs.to_vec())))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum();
        self.push(Tensor::scalar(s), Op::SumAll(x))
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.value(x).numel() as f64;
        let s = self.sum(x);
        self.scale(s, 1.0 / n)
    }

    /// Sums the last axis, keeping it with extent 1.
    pub fn sum_last(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x);
        let cols = v.cols();
        let out: Vec<f64> = v.data().chunks(cols).map(|r| r.iter().sum()).collect();
        let mut shape = v.shape().to_vec();
        *shape.last_mut().ok_or_else(|| Error::dim("sum_last", &[], &[1]))? = 1;
        let t = Tensor::new(shape, out)?;
        Ok(self.push(t, Op::SumLast(x)))
    }

    /// Scales each row of `x[m×n]` by the matching entry of `w[m×1]`.
    pub fn mul_col(&mut self, x: Var, w: Var) -> Result<Var> {
        let (m, n) = self.dims2(x, "mul_col")?;
        if self.shape(w) != [m, 1] {
            return Err(Error::dim("mul_col", self.shape(x), self.shape(w)));
        }
        let wd = self.value(w).data();
        let mut out = self.value(x).data().to_vec();
        for (row, &s) in out.chunks_mut(n).zip(wd) {
            for v in row {
                *v *= s;
            }
        }
        let t = Tensor::new(vec![m, n], out)?;
        Ok(self.push(t, Op::MulCol { x, w }))
    }

    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let (m, n) = self.dims2(x, "layer_norm")?;
        if self.shape(gamma) != [n] || self.shape(beta) != [n] {
            return Err(Error::dim("layer_norm", self.shape(x), self.shape(gamma)));
        }
        let xd = self.value(x).data();
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let mut xhat = vec![0.0; m * n];
        let mut rstd = vec![0.0; m];
        let mut out = vec![0.0; m * n];
        for r in 0..m {
            let row = &xd[r * n..(r + 1) * n];
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            let rs = 1.0 / (var + eps).sqrt();
            rstd[r] = rs;
            for j in 0..n {
                let h = (row[j] - mean) * rs;
                xhat[r * n + j] = h;
                out[r * n + j] = h * g[j] + b[j];
            }
        }
        let t = Tensor::new(vec![m, n], out)?;
        Ok(self.push(
            t,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
        ))
    }

    // ----- structural -----------------------------------------------------

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| Error::Contract("concat of zero operands".into()))?;
        let (m, _) = self.dims2(first, "concat_cols")?;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (r, c) = self.dims2(p, "concat_cols")?;
            if r != m {
                return Err(Error::dim("concat_cols", self.shape(first), self.shape(p)));
            }
            widths.push(c);
        }
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(m * total);
        for r in 0..m {
            for (&p, &w) in parts.iter().zip(&widths) {
                out.extend_from_slice(&self.value(p).data()[r * w..(r + 1) * w]);
            }
        }
        let t = Tensor::new(vec![m, total], out)?;
        Ok(self.push(t, Op::ConcatCols(parts.to_vec())))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (m, n) = self.dims2(x, "slice_cols")?;
        if len == 0 || start + len > n {
            return Err(Error::dim("slice_cols", self.shape(x), &[start, len]));
        }
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(m * len);
        for r in 0..m {
            out.extend_from_slice(&src[r * n + start..r * n + start + len]);
        }
        let t = Tensor::new(vec![m, len], out)?;
        Ok(self.push(t, Op::SliceCols { x, start }))
    }

    /// Picks flat elements of `x` into a 1-D tensor; `None` slots take `fill`.
    pub fn gather(&mut self, x: Var, index: Vec<Option<usize>>, fill: f64) -> Result<Var> {
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(index.len());
        for ix in &index {
            match ix {
                Some(i) if *i < src.len() => out.push(src[*i]),
                Some(i) => return Err(Error::dim("gather", self.shape(x), &[*i])),
                None => out.push(fill),
            }
        }
        let t = Tensor::new(vec![index.len()], out)?;
        Ok(self.push(t, Op::Gather { x, index }))
    }

    /// Rows of `table[V×d]` selected by `ids`.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let (v, d) = self.dims2(table, "embedding")?;
        if ids.is_empty() {
            return Err(Error::Input("embedding lookup of an empty sequence".into()));
        }
        if let Some(&bad) = ids.iter().find(|&&i| i >= v) {
            return Err(Error::Input(format!("id {bad} outside embedding table of {v} rows")));
        }
        let src = self.value(table).data();
        let mut out = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            out.extend_from_slice(&src[i * d..(i + 1) * d]);
        }
        let t = Tensor::new(vec![ids.len(), d], out)?;
        Ok(self.push(
            t,
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
        ))
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var> {
        let t = self.value(x).clone().reshape(shape)?;
        Ok(self.push(t, Op::Reshape(x)))
    }

    /// `[a, b, rest...] → [b, a, rest...]`.
    pub fn swap_leading_axes(&mut self, x: Var) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if shape.len() < 2 {
            return Err(Error::dim("swap_leading_axes", &shape, &[0, 0]));
        }
        let (a, b) = (shape[0], shape[1]);
        let rest: usize = shape[2..].iter().product();
        let src = self.value(x).data();
        let mut out = vec![0.0; src.len()];
        for i in 0..a {
            for j in 0..b {
                let s = (i * b + j) * rest;
                let d = (j * a + i) * rest;
                out[d..d + rest].copy_from_slice(&src[s..s + rest]);
            }
        }
        let mut new_shape = shape.clone();
        new_shape.swap(0, 1);
        let t = Tensor::new(new_shape, out)?;
        Ok(self.push(t, Op::SwapLeading(x)))
    }

    /// 2-D convolution. `x[c_in, h, w]`, `w[c_out, c_in, k, k]`, `b[c_out]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, geom: ConvGeom) -> Result<Var> {
        let (c_in, h, wd) = match self.shape(x) {
            [c, h, w] => (*c, *h, *w),
            s => return Err(Error::dim("conv2d", s, &[0, 0, 0])),
        };
        let k = geom.kernel;
        if self.shape(w) != [self.shape(w)[0], c_in, k, k] || self.shape(w).len() != 4 {
            return Err(Error::dim("conv2d", self.shape(x), self.shape(w)));
        }
        let c_out = self.shape(w)[0];
        if self.shape(b) != [c_out] {
            return Err(Error::dim("conv2d", self.shape(w), self.shape(b)));
        }
        if h + 2 * geom.pad < k || wd + 2 * geom.pad < k {
            return Err(Error::Input(format!("conv2d input {h}×{wd} smaller than kernel {k}")));
        }
        let (ho, wo) = (geom.out_len(h), geom.out_len(wd));
        let cols = im2col(self.value(x).data(), c_in, h, wd, geom);
        let mut out = vec![0.0; c_out * ho * wo];
        gemm(c_out, c_in * k * k, ho * wo, self.value(w).data(), false, &cols, false, &mut out, false);
        let bias = self.value(b).data();
        for (co, row) in out.chunks_mut(ho * wo).enumerate() {
            for v in row {
                *v += bias[co];
            }
        }
        let t = Tensor::new(vec![c_out, ho, wo], out)?;
        Ok(self.push(t, Op::Conv2d { x, w, b, geom }))
    }

    #[cfg(test)]
    pub(crate) fn corrupted_square(&mut self, x: Var) -> Var {
        let t = self.value(x).map(|v| v * v);
        self.push(t, Op::CorruptedSquare(x))
    }

    // ----- backward -------------------------------------------------------

    /// Reverse-mode sweep from a scalar `loss`. Populates gradients of every
    /// reachable leaf that requires one. Calling it again without
    /// [`Graph::reset_grads`] is an error.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).numel() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        if self.backward_done {
            return Err(Error::Contract(
                "backward already ran on this graph; reset_grads before running it again".into(),
            ));
        }
        self.backward_done = true;
        self.grads = vec![None; self.nodes.len()];
        if !self.nodes[loss.0].requires_grad {
            return Ok(());
        }
        self.grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            if matches!(self.nodes[i].op, Op::Leaf) {
                continue;
            }
            let Some(gy) = self.grads[i].take() else {
                continue;
            };
            self.backprop_node(i, &gy);
        }
        Ok(())
    }

    /// Clears gradients so `backward` may run again.
    pub fn reset_grads(&mut self) {
        self.grads.clear();
        self.backward_done = false;
    }

    fn backprop_node(&mut self, i: usize, gy: &[f64]) {
        let nodes = &self.nodes;
        let grads = &mut self.grads;
        let node = &nodes[i];
        let val = |v: Var| nodes[v.0].value.data();
        let y = node.value.data();
        match &node.op {
            Op::Leaf => {}
            Op::MatMul { a, b, b_t } => {
                let (a, b, b_t) = (*a, *b, *b_t);
                let (m, k) = (nodes[a.0].value.shape()[0], nodes[a.0].value.shape()[1]);
                let n = node.value.shape()[1];
                if let Some(da) = slot(nodes, grads, a) {
                    // dA = dY · op(B)ᵀ
                    gemm(m, n, k, gy, false, val(b), !b_t, da, true);
                }
                if let Some(db) = slot(nodes, grads, b) {
                    if b_t {
                        // B is n×k: dB = dYᵀ · A
                        gemm(n, m, k, gy, true, val(a), false, db, true);
                    } else {
                        // B is k×n: dB = Aᵀ · dY
                        gemm(k, m, n, val(a), true, gy, false, db, true);
                    }
                }
            }
            Op::Add(a, b) => {
                let (a, b) = (*a, *b);
                if let Some(da) = slot(nodes, grads, a) {
                    axpy(da, gy, 1.0);
                }
                if let Some(db) = slot(nodes, grads, b) {
                    axpy(db, gy, 1.0);
                }
            }
            Op::Sub(a, b) => {
                let (a, b) = (*a, *b);
                if let Some(da) = slot(nodes, grads, a) {
                    axpy(da, gy, 1.0);
                }
                if let Some(db) = slot(nodes, grads, b) {
                    axpy(db, gy, -1.0);
                }
            }
            Op::Mul(a, b) => {
                let (a, b) = (*a, *b);
                if let Some(da) = slot(nodes, grads, a) {
                    for ((d, g), o) in da.iter_mut().zip(gy).zip(val(b)) {
                        *d += g * o;
                    }
                }
                if let Some(db) = slot(nodes, grads, b) {
                    for ((d, g), o) in db.iter_mut().zip(gy).zip(val(a)) {
                        *d += g * o;
                    }
                }
            }
            Op::AddBias { x, bias } => {
                let (x, bias) = (*x, *bias);
                if let Some(dx) = slot(nodes, grads, x) {
                    axpy(dx, gy, 1.0);
                }
                if let Some(db) = slot(nodes, grads, bias) {
                    let n = db.len();
                    for row in gy.chunks(n) {
                        axpy(db, row, 1.0);
                    }
                }
            }
            Op::Scale { x, c } => {
                let c = *c;
                if let Some(dx) = slot(nodes, grads, *x) {
                    axpy(dx, gy, c);
                }
            }
            Op::Exp(x) => {
                if let Some(dx) = slot(nodes, grads, *x) {
                    for ((d, g), yv) in dx.iter_mut().zip(gy).zip(y) {
                        *d += g * yv;
                    }
                }
            }
            Op::Log(x) => {
                let x = *x;
                if let Some(dx) = slot(nodes, grads, x) {
                    for ((d, g), xv) in dx.iter_mut().zip(gy).zip(val(x)) {
                        *d += g / xv;
                    }
                }
            }
            Op::Relu(x) => {
                if let Some(dx) = slot(nodes, grads, *x) {
                    for ((d, g), yv) in dx.iter_mut().zip(gy).zip(y) {
                        if *yv > 0.0 {
                            *d += g;
                        }
                    }
                }
            }
            Op::Dropout { x, mask } => {
                if let Some(dx) = slot(nodes, grads, *x) {
                    for ((d, g), m) in dx.iter_mut().zip(gy).zip(mask) {
                        *d += g * m;
                    }
                }
            }
            Op::Softmax(x) => {
                let cols = node.value.cols();
                if let Some(dx) = slot(nodes, grads, *x) {
                    for ((dr, gr), yr) in dx.chunks_mut(cols).zip(gy.chunks(cols)).zip(y.chunks(cols)) {
                        let dot: f64 = gr.iter().zip(yr).map(|(g, p)| g * p).sum();
                        for ((d, g), p) in dr.iter_mut().zip(gr).zip(yr) {
                            *d += p * (g - dot);
                        }
                    }
                }
            }
            Op::LogSoftmax(x) => {
                let cols = node.value.cols();
                if let Some(dx) = slot(nodes, grads, *x) {
                    for ((dr, gr), yr) in dx.chunks_mut(cols).zip(gy.chunks(cols)).zip(y.chunks(cols)) {
                        let total: f64 = gr.iter().sum();
                        for ((d, g), lp) in dr.iter_mut().zip(gr).zip(yr) {
                            *d += g - lp.exp() * total;
                        }
                    }
                }
            }
            Op::LogSumExp(x) => {
                let x = *x;
                let cols = nodes[x.0].value.cols();
                if let Some(dx) = slot(nodes, grads, x) {
                    for (r, (dr, xr)) in dx.chunks_mut(cols).zip(val(x).chunks(cols)).enumerate() {
                        if y[r] == f64::NEG_INFINITY {
                            continue;
                        }
                        for (d, xv) in dr.iter_mut().zip(xr) {
                            *d += gy[r] * (xv - y[r]).exp();
                        }
                    }
                }
            }
            Op::LogAddExp(xs) => {
                for &x in xs {
                    if let Some(dx) = slot(nodes, grads, x) {
                        for (j, d) in dx.iter_mut().enumerate() {
                            if y[j] != f64::NEG_INFINITY {
                                *d += gy[j] * (val(x)[j] - y[j]).exp();
                            }
                        }
                    }
                }
            }
            Op::SumAll(x) => {
                if let Some(dx) = slot(nodes, grads, *x) {
                    for d in dx.iter_mut() {
                        *d += gy[0];
                    }
                }
            }
            Op::SumLast(x) => {
                let x = *x;
                let cols = nodes[x.0].value.cols();
                if let Some(dx) = slot(nodes, grads, x) {
                    for (dr, g) in dx.chunks_mut(cols).zip(gy) {
                        for d in dr {
                            *d += g;
                        }
                    }
                }
            }
            Op::MulCol { x, w } => {
                let (x, w) = (*x, *w);
                let n = node.value.cols();
                if let Some(dx) = slot(nodes, grads, x) {
                    for ((dr, gr), s) in dx.chunks_mut(n).zip(gy.chunks(n)).zip(val(w)) {
                        for (d, g) in dr.iter_mut().zip(gr) {
                            *d += g * s;
                        }
                    }
                }
                if let Some(dw) = slot(nodes, grads, w) {
                    for ((d, gr), xr) in dw.iter_mut().zip(gy.chunks(n)).zip(val(x).chunks(n)) {
                        *d += gr.iter().zip(xr).map(|(g, v)| g * v).sum::<f64>();
                    }
                }
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                let (x, gamma, beta) = (*x, *gamma, *beta);
                let n = node.value.cols();
                if let Some(db) = slot(nodes, grads, beta) {
                    for row in gy.chunks(n) {
                        axpy(db, row, 1.0);
                    }
                }
                if let Some(dg) = slot(nodes, grads, gamma) {
                    for (gr, hr) in gy.chunks(n).zip(xhat.chunks(n)) {
                        for ((d, g), h) in dg.iter_mut().zip(gr).zip(hr) {
                            *d += g * h;
                        }
                    }
                }
                let gv = val(gamma);
                if let Some(dx) = slot(nodes, grads, x) {
                    for (r, ((dr, gr), hr)) in dx.chunks_mut(n).zip(gy.chunks(n)).zip(xhat.chunks(n)).enumerate() {
                        let mut mean_dh = 0.0;
                        let mut mean_dh_h = 0.0;
                        for j in 0..n {
                            let dh = gr[j] * gv[j];
                            mean_dh += dh;
                            mean_dh_h += dh * hr[j];
                        }
                        mean_dh /= n as f64;
                        mean_dh_h /= n as f64;
                        for j in 0..n {
                            let dh = gr[j] * gv[j];
                            dr[j] += rstd[r] * (dh - mean_dh - hr[j] * mean_dh_h);
                        }
                    }
                }
            }
            Op::ConcatCols(parts) => {
                let m = node.value.shape()[0];
                let total = node.value.cols();
                let mut offset = 0;
                for &p in parts {
                    let w = nodes[p.0].value.cols();
                    if let Some(dp) = slot(nodes, grads, p) {
                        for r in 0..m {
                            axpy(&mut dp[r * w..(r + 1) * w], &gy[r * total + offset..r * total + offset + w], 1.0);
                        }
                    }
                    offset += w;
                }
            }
            Op::SliceCols { x, start } => {
                let (x, start) = (*x, *start);
                let n = nodes[x.0].value.cols();
                let len = node.value.cols();
                if let Some(dx) = slot(nodes, grads, x) {
                    for (r, gr) in gy.chunks(len).enumerate() {
                        axpy(&mut dx[r * n + start..r * n + start + len], gr, 1.0);
                    }
                }
            }
            Op::Gather { x, index } => {
                if let Some(dx) = slot(nodes, grads, *x) {
                    for (g, ix) in gy.iter().zip(index) {
                        if let Some(j) = ix {
                            dx[*j] += g;
                        }
                    }
                }
            }
            Op::Embedding { table, ids } => {
                let d = node.value.cols();
                if let Some(dt) = slot(nodes, grads, *table) {
                    for (gr, &id) in gy.chunks(d).zip(ids) {
                        axpy(&mut dt[id * d..(id + 1) * d], gr, 1.0);
                    }
                }
            }
            Op::Reshape(x) => {
                if let Some(dx) = slot(nodes, grads, *x) {
                    axpy(dx, gy, 1.0);
                }
            }
            Op::Transpose(x) => {
                let (r, c) = (node.value.shape()[1], node.value.shape()[0]);
                if let Some(dx) = slot(nodes, grads, *x) {
                    for i in 0..r {
                        for j in 0..c {
                            dx[i * c + j] += gy[j * r + i];
                        }
                    }
                }
            }
            Op::SwapLeading(x) => {
                let shape = node.value.shape();
                // Output is [b, a, rest]; input was [a, b, rest].
                let (b, a) = (shape[0], shape[1]);
                let rest: usize = shape[2..].iter().product();
                if let Some(dx) = slot(nodes, grads, *x) {
                    for i in 0..a {
                        for j in 0..b {
                            let s = (j * a + i) * rest;
                            let d = (i * b + j) * rest;
                            axpy(&mut dx[d..d + rest], &gy[s..s + rest], 1.0);
                        }
                    }
                }
            }
            #[cfg(test)]
            Op::CorruptedSquare(x) => {
                let x = *x;
                if let Some(dx) = slot(nodes, grads, x) {
                    // Correct rule would be 2·x·g.
                    for ((d, g), xv) in dx.iter_mut().zip(gy).zip(val(x)) {
                        *d += g * xv;
                    }
                }
            }
            Op::Conv2d { x, w, b, geom } => {
                let (x, w, b, geom) = (*x, *w, *b, *geom);
                let [c_in, h, wd] = nodes[x.0].value.shape() else {
                    unreachable!("conv2d input is 3-D")
                };
                let (c_in, h, wd) = (*c_in, *h, *wd);
                let c_out = node.value.shape()[0];
                let spatial = node.value.shape()[1] * node.value.shape()[2];
                let kk = c_in * geom.kernel * geom.kernel;
                if let Some(db) = slot(nodes, grads, b) {
                    for (d, row) in db.iter_mut().zip(gy.chunks(spatial)) {
                        *d += row.iter().sum::<f64>();
                    }
                }
                let need_dw = nodes[w.0].requires_grad;
                let need_dx = nodes[x.0].requires_grad;
                if need_dw {
                    let cols = im2col(val(x), c_in, h, wd, geom);
                    let dw = slot(nodes, grads, w).expect("requires grad");
                    gemm(c_out, spatial, kk, gy, false, &cols, true, dw, true);
                }
                if need_dx {
                    let mut dcols = vec![0.0; kk * spatial];
                    gemm(kk, c_out, spatial, val(w), true, gy, false, &mut dcols, false);
                    let dx = slot(nodes, grads, x).expect("requires grad");
                    col2im_add(&dcols, c_in, h, wd, geom, dx);
                }
            }
        }
    }
}

/// Accumulation target for input `v`, or `None` when it needs no gradient.
fn slot<'a>(nodes: &[Node], grads: &'a mut [Option<Vec<f64>>], v: Var) -> Option<&'a mut Vec<f64>> {
    let n = &nodes[v.0];
    if !n.requires_grad {
        return None;
    }
    Some(grads[v.0].get_or_insert_with(|| vec![0.0; n.value.numel()]))
}

fn axpy(dst: &mut [f64], src: &[f64], alpha: f64) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += alpha * s;
    }
}

fn im2col(x: &[f64], c_in: usize, h: usize, w: usize, geom: ConvGeom) -> Vec<f64> {
    let k = geom.kernel;
    let (ho, wo) = (geom.out_len(h), geom.out_len(w));
    let mut cols = vec![0.0; c_in * k * k * ho * wo];
    for c in 0..c_in {
        for ki in 0..k {
            for kj in 0..k {
                let row = (c * k + ki) * k + kj;
                let dst = &mut cols[row * ho * wo..(row + 1) * ho * wo];
                for oh in 0..ho {
                    let ih = (oh * geom.stride + ki) as isize - geom.pad as isize;
                    if ih < 0 || ih >= h as isize {
                        continue;
                    }
                    for ow in 0..wo {
                        let iw = (ow * geom.stride + kj) as isize - geom.pad as isize;
                        if iw < 0 || iw >= w as isize {
                            continue;
                        }
                        dst[oh * wo + ow] = x[(c * h + ih as usize) * w + iw as usize];
                    }
                }
            }
        }
    }
    cols
}

fn col2im_add(cols: &[f64], c_in: usize, h: usize, w: usize, geom: ConvGeom, dx: &mut [f64]) {
    let k = geom.kernel;
    let (ho, wo) = (geom.out_len(h), geom.out_len(w));
    for c in 0..c_in {
        for ki in 0..k {
            for kj in 0..k {
                let row = (c * k + ki) * k + kj;
                let src = &cols[row * ho * wo..(row + 1) * ho * wo];
                for oh in 0..ho {
                    let ih = (oh * geom.stride + ki) as isize - geom.pad as isize;
                    if ih < 0 || ih >= h as isize {
                        continue;
                    }
                    for ow in 0..wo {
                        let iw = (ow * geom.stride + kj) as isize - geom.pad as isize;
                        if iw < 0 || iw >= w as isize {
                            continue;
                        }
                        dx[(c * h + ih as usize) * w + iw as usize] += src[oh * wo + ow];
                    }
                }
            }
        }
    }
}
