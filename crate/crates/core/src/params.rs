//! Named parameter storage and graph binding.

use std::collections::BTreeMap;

use rand::Rng;
use sha2::{Digest, Sha256};

use crate::autograd::{Gradients, Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Ordered map of named parameters. Iteration order is lexicographic by
/// name, which fixes every reduction that walks the store.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    params: BTreeMap<String, Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_map(params: BTreeMap<String, Tensor>) -> Self {
        Self { params }
    }

    pub fn as_map(&self) -> &BTreeMap<String, Tensor> {
        &self.params
    }

    pub fn into_map(self) -> BTreeMap<String, Tensor> {
        self.params
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) {
        self.params.insert(name.into(), t);
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.params.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.params.get_mut(name)
    }

    pub fn remove(&mut self, name: &str) -> Option<Tensor> {
        self.params.remove(name)
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

    pub fn numel(&self) -> usize {
        self.params.values().map(Tensor::len).sum()
    }

    /// Parameters whose name starts with `prefix`.
    pub fn subset(&self, prefix: &str) -> ParamStore {
        ParamStore {
            params: self
                .params
                .iter()
                .filter(|(k, _)| k.starts_with(prefix))
                .map(|(k, v)| (k.clone(), v.clone()))
                .collect(),
        }
    }

    /// Copies every entry of `other` into `self`, replacing existing names.
    pub fn extend(&mut self, other: ParamStore) {
        self.params.extend(other.params);
    }

    pub fn round_to_f32(&mut self) {
        for t in self.params.values_mut() {
            t.round_to_f32();
        }
    }

    pub fn all_finite(&self) -> bool {
        self.params.values().all(Tensor::all_finite)
    }

    /// Checks that every expected `(name, shape)` is present with that shape
    /// and that nothing else is.
    pub fn validate_shapes(&self, expected: &BTreeMap<String, Vec<usize>>) -> Result<()> {
        for (name, shape) in expected {
            let t = self
                .params
                .get(name)
                .ok_or_else(|| Error::MissingArray(name.clone()))?;
            if t.shape() != shape.as_slice() {
                return Err(Error::ArrayMismatch {
                    name: name.clone(),
                    expected: shape.clone(),
                    actual: t.shape().to_vec(),
                });
            }
        }
        if let Some(extra) = self.params.keys().find(|k| !expected.contains_key(*k)) {
            return Err(Error::UnexpectedArray(extra.clone()));
        }
        Ok(())
    }

    /// SHA-256 over names, shapes and the `f32` little-endian bytes of every
    /// entry, hex encoded.
    pub fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        for (name, t) in &self.params {
            h.update((name.len() as u64).to_le_bytes());
            h.update(name.as_bytes());
            h.update((t.shape().len() as u64).to_le_bytes());
            for d in t.shape() {
                h.update((*d as u64).to_le_bytes());
            }
            for v in t.data() {
                h.update((*v as f32).to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }

    /// Binds every parameter into `g`, trainable or constant.
    pub fn bind(&self, g: &mut Graph, trainable: bool) -> ParamVars {
        let mut pv = ParamVars::default();
        self.bind_into(g, &mut pv, |_| trainable);
        pv
    }

    /// Binds with a per-name trainability predicate.
    pub fn bind_into(&self, g: &mut Graph, pv: &mut ParamVars, trainable: impl Fn(&str) -> bool) {
        for (name, t) in &self.params {
            let v = if trainable(name) {
                g.param(t.clone())
            } else {
                g.constant(t.clone())
            };
            pv.vars.insert(name.clone(), (v, trainable(name)));
        }
    }
}

/// How a parameter is initialized.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Init {
    Zeros,
    Ones,
    Normal(f64),
    /// Glorot uniform.
    Xavier {
        fan_in: usize,
        fan_out: usize,
    },
    /// Kaiming normal for ReLU layers.
    He {
        fan_in: usize,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub init: Init,
}

impl ParamSpec {
    pub fn new(name: impl Into<String>, shape: &[usize], init: Init) -> Self {
        Self {
            name: name.into(),
            shape: shape.to_vec(),
            init,
        }
    }
}

pub fn shapes_of(specs: &[ParamSpec]) -> BTreeMap<String, Vec<usize>> {
    specs
        .iter()
        .map(|s| (s.name.clone(), s.shape.clone()))
        .collect()
}

/// Draws every spec in list order from `rng`, then snaps to `f32`.
pub fn init_params(specs: &[ParamSpec], rng: &mut impl Rng) -> ParamStore {
    let mut store = ParamStore::new();
    for spec in specs {
        let t = match spec.init {
            Init::Zeros => Tensor::zeros(&spec.shape),
            Init::Ones => Tensor::filled(&spec.shape, 1.0),
            Init::Normal(std) => Tensor::randn(&spec.shape, std, rng),
            Init::Xavier { fan_in, fan_out } => {
                let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
                Tensor::uniform(&spec.shape, bound, rng)
            }
            Init::He { fan_in } => Tensor::randn(&spec.shape, (2.0 / fan_in as f64).sqrt(), rng),
        };
        store.insert(spec.name.clone(), t);
    }
    store.round_to_f32();
    store
}

/// Graph handles for a bound [`ParamStore`].
#[derive(Debug, Default, Clone)]
pub struct ParamVars {
    vars: BTreeMap<String, (Var, bool)>,
}

impl ParamVars {
    /// Looks up a bound parameter. Names are produced by the model builders
    /// and validated at load time, so a miss is a programming error.
    pub fn get(&self, name: &str) -> Var {
        match self.vars.get(name) {
            Some((v, _)) => *v,
            None => panic!("parameter `{name}` is not bound"),
        }
    }

    pub fn contains(&self, name: &str) -> bool {
        self.vars.contains_key(name)
    }

    /// Gradients of every trainable bound parameter. Trainable parameters the
    /// loss does not depend on get explicit zeros.
    pub fn collect_grads(&self, g: &Graph, grads: &Gradients) -> BTreeMap<String, Tensor> {
        self.vars
            .iter()
            .filter(|(_, (_, trainable))| *trainable)
            .map(|(name, (v, _))| {
                let t = grads
                    .get(*v)
                    .cloned()
                    .unwrap_or_else(|| Tensor::zeros(g.shape(*v)));
                (name.clone(), t)
            })
            .collect()
    }
}
