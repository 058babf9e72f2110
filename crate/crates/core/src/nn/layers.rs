use rand::Rng;

use super::params::{Binder, ParamStore};
use crate::autodiff::{ConvGeom, Graph, Tensor, Var};
use crate::error::{Error, Result};

/// `x·W + b` with `W[d_in×d_out]`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: String,
    pub bias: String,
    pub d_in: usize,
    pub d_out: usize,
}

impl Linear {
    pub fn new(prefix: &str, d_in: usize, d_out: usize) -> Self {
        Linear {
            weight: format!("{prefix}.w"),
            bias: format!("{prefix}.b"),
            d_in,
            d_out,
        }
    }

    pub fn init(&self, store: &mut ParamStore, rng: &mut impl Rng) {
        store.init_weight(&self.weight, &[self.d_in, self.d_out], rng);
        store.init_const(&self.bias, &[self.d_out], 0.0);
    }

    pub fn forward(&self, g: &mut Graph, p: &mut Binder, x: Var) -> Result<Var> {
        let w = p.get(g, &self.weight)?;
        let b = p.get(g, &self.bias)?;
        let y = g.matmul(x, w)?;
        g.add_bias(y, b)
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gamma: String,
    pub beta: String,
    pub dim: usize,
}

pub const LAYER_NORM_EPS: f64 = 1e-5;

impl LayerNorm {
    pub fn new(prefix: &str, dim: usize) -> Self {
        LayerNorm {
            gamma: format!("{prefix}.gamma"),
            beta: format!("{prefix}.beta"),
            dim,
        }
    }

    pub fn init(&self, store: &mut ParamStore) {
        store.init_const(&self.gamma, &[self.dim], 1.0);
        store.init_const(&self.beta, &[self.dim], 0.0);
    }

    pub fn forward(&self, g: &mut Graph, p: &mut Binder, x: Var) -> Result<Var> {
        let gamma = p.get(g, &self.gamma)?;
        let beta = p.get(g, &self.beta)?;
        g.layer_norm(x, gamma, beta, LAYER_NORM_EPS)
    }
}

/// Learned lookup table, scaled by `√d` on the way out.
#[derive(Clone, Debug)]
pub struct Embedding {
    pub table: String,
    pub vocab: usize,
    pub dim: usize,
}

impl Embedding {
    pub fn new(prefix: &str, vocab: usize, dim: usize) -> Self {
        Embedding {
            table: format!("{prefix}.table"),
            vocab,
            dim,
        }
    }

    pub fn init(&self, store: &mut ParamStore, rng: &mut impl Rng) {
        let std = 1.0 / (self.dim as f64).sqrt();
        store.insert(&self.table, Tensor::randn(&[self.vocab, self.dim], std, rng));
    }

    pub fn forward(&self, g: &mut Graph, p: &mut Binder, ids: &[usize]) -> Result<Var> {
        let table = p.get(g, &self.table)?;
        let e = g.embedding(table, ids)?;
        Ok(g.scale(e, (self.dim as f64).sqrt()))
    }
}

/// Position-wise feed-forward network: `W₂·ReLU(W₁·x + b₁) + b₂`.
#[derive(Clone, Debug)]
pub struct FeedForward {
    pub w1: Linear,
    pub w2: Linear,
}

impl FeedForward {
    pub fn new(prefix: &str, d_model: usize, ffn_dim: usize) -> Self {
        FeedForward {
            w1: Linear::new(&format!("{prefix}.w1"), d_model, ffn_dim),
            w2: Linear::new(&format!("{prefix}.w2"), ffn_dim, d_model),
        }
    }

    pub fn init(&self, store: &mut ParamStore, rng: &mut impl Rng) {
        self.w1.init(store, rng);
        self.w2.init(store, rng);
    }

    pub fn forward(&self, g: &mut Graph, p: &mut Binder, x: Var) -> Result<Var> {
        let h = self.w1.forward(g, p, x)?;
        let h = g.relu(h);
        self.w2.forward(g, p, h)
    }
}

/// `PE[pos, 2i] = sin(pos / 10000^(2i/d))`, `PE[pos, 2i+1] = cos(·)`.
pub fn sinusoidal_positional_encoding(max_len: usize, d_model: usize) -> Result<Tensor> {
    if d_model == 0 || d_model % 2 != 0 {
        return Err(Error::Config(format!(
            "positional encoding needs an even model width, got {d_model}"
        )));
    }
    if max_len == 0 {
        return Err(Error::Input("positional encoding for zero positions".into()));
    }
    let mut data = vec![0.0; max_len * d_model];
    for pos in 0..max_len {
        for i in 0..d_model / 2 {
            let angle = pos as f64 / 10000f64.powf((2 * i) as f64 / d_model as f64);
            data[pos * d_model + 2 * i] = angle.sin();
            data[pos * d_model + 2 * i + 1] = angle.cos();
        }
    }
    Tensor::new(vec![max_len, d_model], data)
}

/// Adds the sinusoidal table to a `[len×d]` sequence.
pub fn add_positional_encoding(g: &mut Graph, x: Var) -> Result<Var> {
    let (len, d) = (g.shape(x)[0], g.shape(x)[1]);
    let pe = g.constant(sinusoidal_positional_encoding(len, d)?);
    g.add(x, pe)
}

/// Frame count after one zero-padded stride-2 convolution: `⌈len/2⌉`.
pub fn halve(len: usize) -> usize {
    len.div_ceil(2)
}

/// Output length of the two-layer subsampler: `⌈⌈T/2⌉/2⌉`.
pub fn subsampled_len(frames: usize) -> usize {
    halve(halve(frames))
}

/// Shortest input the subsampler accepts.
pub const MIN_SUBSAMPLE_FRAMES: usize = 4;

/// Two 3×3 convolutions with stride 2 in time and frequency, ReLU after
/// each, then a linear projection of the flattened channel×frequency plane.
///
/// Each convolution zero-pads one cell on every border, so an axis of length
/// `n` becomes `⌈n/2⌉`; `T` frames come out as `⌈⌈T/2⌉/2⌉`.
#[derive(Clone, Debug)]
pub struct ConvSubsample {
    pub conv1_w: String,
    pub conv1_b: String,
    pub conv2_w: String,
    pub conv2_b: String,
    pub proj: Linear,
    pub channels: usize,
    pub d_feat: usize,
}

const SUBSAMPLE_GEOM: ConvGeom = ConvGeom {
    kernel: 3,
    stride: 2,
    pad: 1,
};

impl ConvSubsample {
    pub fn new(prefix: &str, d_feat: usize, channels: usize, d_model: usize) -> Self {
        let flat = channels * subsampled_len(d_feat);
        ConvSubsample {
            conv1_w: format!("{prefix}.conv1.w"),
            conv1_b: format!("{prefix}.conv1.b"),
            conv2_w: format!("{prefix}.conv2.w"),
            conv2_b: format!("{prefix}.conv2.b"),
            proj: Linear::new(&format!("{prefix}.proj"), flat, d_model),
            channels,
            d_feat,
        }
    }

    pub fn init(&self, store: &mut ParamStore, rng: &mut impl Rng) {
        let c = self.channels;
        // He initialisation suits the ReLU after each convolution.
        let he = |fan_in: usize| (2.0 / fan_in as f64).sqrt();
        store.insert(&self.conv1_w, Tensor::randn(&[c, 1, 3, 3], he(9), rng));
        store.init_const(&self.conv1_b, &[c], 0.0);
        store.insert(&self.conv2_w, Tensor::randn(&[c, c, 3, 3], he(9 * c), rng));
        store.init_const(&self.conv2_b, &[c], 0.0);
        self.proj.init(store, rng);
    }

    /// `features[T×d_feat]` → `[⌈⌈T/2⌉/2⌉ × d_model]`.
    pub fn forward(&self, g: &mut Graph, p: &mut Binder, features: Var) -> Result<Var> {
        let (t, f) = match g.shape(features) {
            [t, f] => (*t, *f),
            s => return Err(Error::dim("conv_subsample", s, &[0, self.d_feat])),
        };
        if f != self.d_feat {
            return Err(Error::dim("conv_subsample", &[t, f], &[t, self.d_feat]));
        }
        if t < MIN_SUBSAMPLE_FRAMES {
            return Err(Error::Input(format!(
                "{t} frames is too short for two stride-2 reductions (need {MIN_SUBSAMPLE_FRAMES})"
            )));
        }
        let x = g.reshape(features, vec![1, t, f])?;
        let (w1, b1) = (p.get(g, &self.conv1_w)?, p.get(g, &self.conv1_b)?);
        let h = g.conv2d(x, w1, b1, SUBSAMPLE_GEOM)?;
        let h = g.relu(h);
        let (w2, b2) = (p.get(g, &self.conv2_w)?, p.get(g, &self.conv2_b)?);
        let h = g.conv2d(h, w2, b2, SUBSAMPLE_GEOM)?;
        let h = g.relu(h);
        // [C, T', F'] → [T', C, F'] → [T', C·F']
        let (tp, fp) = (g.shape(h)[1], g.shape(h)[2]);
        let h = g.swap_leading_axes(h)?;
        let h = g.reshape(h, vec![tp, self.channels * fp])?;
        self.proj.forward(g, p, h)
    }
}
