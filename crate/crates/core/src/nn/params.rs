use std::collections::{BTreeMap, HashMap};

use rand::Rng;
use sha2::{Digest, Sha256};

use crate::autodiff::{grad_check_many, GradCheckReport, Graph, Tensor, Var};
use crate::error::{Error, Result};

/// Named parameter tensors, ordered by name.
///
/// Names follow `module.block-index.tensor-name`, e.g.
/// `acoustic_enc.3.attn.wq` or `a2p_frontend.0.conv1.w`; the tensor name may
/// itself be a dotted path inside the block.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    params: BTreeMap<String, Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) {
        self.params.insert(name.into(), value);
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.params.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.params.get_mut(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.params.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.params.iter()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.params.keys()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn num_scalars(&self) -> usize {
        self.params.values().map(Tensor::numel).sum()
    }

    /// Parameters whose name starts with any of `prefixes`.
    pub fn subset(&self, prefixes: &[&str]) -> ParamStore {
        ParamStore {
            params: self
                .params
                .iter()
                .filter(|(k, _)| prefixes.iter().any(|p| k.starts_with(p)))
                .map(|(k, v)| (k.clone(), v.clone()))
                .collect(),
        }
    }

    /// Inserts every entry of `other`, replacing existing names.
    pub fn merge(&mut self, other: ParamStore) {
        self.params.extend(other.params);
    }

    /// SHA-256 over names, shapes and the exact bit patterns of the data.
    pub fn digest(&self) -> String {
        let mut h = Sha256::new();
        for (name, t) in &self.params {
            h.update((name.len() as u64).to_le_bytes());
            h.update(name.as_bytes());
            h.update((t.ndim() as u64).to_le_bytes());
            for &d in t.shape() {
                h.update((d as u64).to_le_bytes());
            }
            for v in t.data() {
                h.update(v.to_bits().to_le_bytes());
            }
        }
        hex_string(&h.finalize())
    }

    /// Xavier-normal weight of shape `shape`, with fans taken from the first
    /// two extents times the receptive field.
    pub fn init_weight(&mut self, name: &str, shape: &[usize], rng: &mut impl Rng) {
        let receptive: usize = shape[2..].iter().product();
        let (fan_a, fan_b) = (shape[0] * receptive, shape[1] * receptive);
        let std = (2.0 / (fan_a + fan_b) as f64).sqrt();
        self.insert(name, Tensor::randn(shape, std, rng));
    }

    pub fn init_const(&mut self, name: &str, shape: &[usize], value: f64) {
        self.insert(name, Tensor::full(shape, value));
    }
}

pub(crate) fn hex_string(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// Binds stored parameters into a graph as leaves, once per name.
///
/// Parameters rejected by the trainability predicate enter the graph as
/// constants and never receive gradients.
pub struct Binder<'a> {
    store: &'a ParamStore,
    trainable: Box<dyn Fn(&str) -> bool + 'a>,
    bound: HashMap<String, Var>,
}

impl<'a> Binder<'a> {
    /// Every parameter trainable.
    pub fn new(store: &'a ParamStore) -> Self {
        Self::with_trainable(store, |_| true)
    }

    /// Nothing trainable; for inference.
    pub fn frozen(store: &'a ParamStore) -> Self {
        Self::with_trainable(store, |_| false)
    }

    pub fn with_trainable(store: &'a ParamStore, trainable: impl Fn(&str) -> bool + 'a) -> Self {
        Binder {
            store,
            trainable: Box::new(trainable),
            bound: HashMap::new(),
        }
    }

    pub fn store(&self) -> &ParamStore {
        self.store
    }

    pub fn get(&mut self, g: &mut Graph, name: &str) -> Result<Var> {
        if let Some(&v) = self.bound.get(name) {
            return Ok(v);
        }
        let value = self
            .store
            .get(name)
            .ok_or_else(|| Error::Checkpoint(format!("missing parameter `{name}`")))?
            .clone();
        let v = g.leaf(value, (self.trainable)(name));
        self.bound.insert(name.to_string(), v);
        Ok(v)
    }

    /// Registers an existing graph node as the value of `name`.
    pub fn bind_existing(&mut self, name: &str, var: Var) {
        self.bound.insert(name.to_string(), var);
    }

    /// Gradients of every trainable parameter bound so far. Parameters bound
    /// but unreachable from the loss get zeros.
    pub fn gradients(&self, g: &Graph) -> BTreeMap<String, Tensor> {
        self.bound
            .iter()
            .filter(|(name, _)| (self.trainable)(name))
            .map(|(name, &v)| {
                let grad = g.grad(v).unwrap_or_else(|| Tensor::zeros(g.shape(v)));
                (name.clone(), grad)
            })
            .collect()
    }
}

/// Finite-difference check of a parameterised block with respect to its
/// inputs and every parameter in `store`.
pub fn grad_check_block<F>(
    store: &ParamStore,
    inputs: &[Tensor],
    f: F,
    h: f64,
    tol: f64,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &mut Binder, &[Var]) -> Result<Var>,
{
    let names: Vec<&String> = store.names().collect();
    let mut all: Vec<Tensor> = inputs.to_vec();
    all.extend(store.iter().map(|(_, t)| t.clone()));
    grad_check_many(
        |g, vars| {
            let mut binder = Binder::new(store);
            for (name, &v) in names.iter().zip(&vars[inputs.len()..]) {
                binder.bind_existing(name, v);
            }
            f(g, &mut binder, &vars[..inputs.len()])
        },
        &all,
        h,
        tol,
    )
}
