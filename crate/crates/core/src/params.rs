use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use sha2::{Digest, Sha256};

use crate::tape::{Gradients, Tape, Var};
use crate::{Error, Result, Rng, Tensor};

/// Named weights of one model, iterated in name order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamSet {
    tensors: BTreeMap<String, Tensor>,
}

/// Per-parameter gradient buffers keyed like the [`ParamSet`] they belong to.
pub type ParamGrads = BTreeMap<String, Vec<f32>>;

impl ParamSet {
    pub fn new() -> Self {
        ParamSet::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor) {
        self.tensors.insert(name.into(), tensor);
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.tensors
            .get(name)
            .ok_or_else(|| Error::NotFound(format!("parameter `{name}`")))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        self.tensors
            .get_mut(name)
            .ok_or_else(|| Error::NotFound(format!("parameter `{name}`")))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.tensors.iter()
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn numel(&self) -> usize {
        self.tensors.values().map(Tensor::numel).sum()
    }

    /// Gaussian weights with standard deviation `sqrt(2 / fan_in)`.
    pub fn init_he(&mut self, name: &str, shape: &[usize], fan_in: usize, rng: &mut Rng) {
        let std = libm::sqrtf(2.0 / fan_in as f32);
        let numel = shape.iter().product();
        let data = (0..numel).map(|_| rng.normal() * std).collect();
        self.insert(name, Tensor::new(shape, data).expect("init shape"));
    }

    pub fn init_const(&mut self, name: &str, shape: &[usize], value: f32) {
        self.insert(name, Tensor::full(shape, value));
    }

    /// SHA-256 over names, shapes and little-endian values.
    pub fn content_hash(&self) -> [u8; 32] {
        let mut hasher = Sha256::new();
        for (name, t) in &self.tensors {
            hasher.update((name.len() as u64).to_le_bytes());
            hasher.update(name.as_bytes());
            hasher.update((t.shape().len() as u64).to_le_bytes());
            for &d in t.shape() {
                hasher.update((d as u64).to_le_bytes());
            }
            for v in t.data() {
                hasher.update(v.to_le_bytes());
            }
        }
        hasher.finalize().into()
    }

    pub fn hash_hex(&self) -> String {
        hex(&self.content_hash())
    }

    /// True when every value matches bit for bit.
    pub fn bit_eq(&self, other: &ParamSet) -> bool {
        self.tensors.len() == other.tensors.len()
            && self.tensors.iter().zip(&other.tensors).all(|((na, a), (nb, b))| {
                na == nb
                    && a.shape() == b.shape()
                    && a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits())
            })
    }

    /// Prefixes every name, e.g. to store two models in one container.
    pub fn prefixed(&self, prefix: &str) -> ParamSet {
        ParamSet {
            tensors: self
                .tensors
                .iter()
                .map(|(k, v)| (format!("{prefix}{k}"), v.clone()))
                .collect(),
        }
    }

    /// Entries whose name starts with `prefix`, with the prefix removed.
    pub fn strip_prefix(&self, prefix: &str) -> ParamSet {
        ParamSet {
            tensors: self
                .tensors
                .iter()
                .filter_map(|(k, v)| k.strip_prefix(prefix).map(|s| (s.to_string(), v.clone())))
                .collect(),
        }
    }

    pub fn merge(&mut self, other: ParamSet) {
        self.tensors.extend(other.tensors);
    }
}

pub fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// Parameters placed on a tape as leaves.
#[derive(Debug, Clone)]
pub struct Bound {
    vars: BTreeMap<String, Var>,
}

impl Bound {
    pub fn var(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| Error::NotFound(format!("bound parameter `{name}`")))
    }

    /// The parameters under `prefix`, addressed without it.
    pub fn scoped(&self, prefix: &str) -> Bound {
        Bound {
            vars: self
                .vars
                .iter()
                .filter_map(|(k, &v)| k.strip_prefix(prefix).map(|s| (s.to_string(), v)))
                .collect(),
        }
    }

    /// Moves the gradient of every bound parameter out of `grads`.
    pub fn collect(&self, grads: &mut Gradients) -> ParamGrads {
        self.vars.iter().map(|(k, &v)| (k.clone(), grads.take(v))).collect()
    }
}

impl Tape {
    /// Binds every tensor of `params` as a leaf; `trainable` controls
    /// whether gradients flow into them.
    pub fn bind(&mut self, params: &ParamSet, trainable: bool) -> Bound {
        Bound {
            vars: params
                .iter()
                .map(|(k, t)| (k.clone(), self.leaf(t.clone(), trainable)))
                .collect(),
        }
    }
}
