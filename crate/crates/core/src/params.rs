//! Named parameter storage and its binding onto a tape.
//!
//! Every learnable tensor and every running statistic lives in a
//! [`ParamStore`] under a stable dotted key such as
//! `enc1.conv2.depthwise`. Blocks declare their keys through
//! [`ParamDef`]s, so the key set of a model is a pure function of its
//! configuration and checkpoints can be transferred key by key.

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Init {
    Zeros,
    Ones,
    /// N(0, 2 / fan_in)
    He {
        fan_in: usize,
    },
    /// N(0, 1 / fan_in)
    Lecun {
        fan_in: usize,
    },
}

/// Declaration of one stored tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamDef {
    pub key: String,
    pub shape: Vec<usize>,
    pub init: Init,
    /// Running statistics are stored but not optimized.
    pub trainable: bool,
}

impl ParamDef {
    pub fn new(key: impl Into<String>, shape: &[usize], init: Init) -> Self {
        Self {
            key: key.into(),
            shape: shape.to_vec(),
            init,
            trainable: true,
        }
    }

    pub fn buffer(key: impl Into<String>, shape: &[usize], init: Init) -> Self {
        Self {
            trainable: false,
            ..Self::new(key, shape, init)
        }
    }

    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }

    fn materialize(&self, seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ key_hash(&self.key));
        match self.init {
            Init::Zeros => Tensor::zeros(&self.shape),
            Init::Ones => Tensor::ones(&self.shape),
            Init::He { fan_in } => {
                Tensor::normal(&self.shape, (2.0 / fan_in as f64).sqrt(), &mut rng)
            }
            Init::Lecun { fan_in } => {
                Tensor::normal(&self.shape, (1.0 / fan_in as f64).sqrt(), &mut rng)
            }
        }
    }
}

/// FNV-1a; gives every key an independent random stream.
fn key_hash(key: &str) -> u64 {
    key.bytes().fold(0xcbf2_9ce4_8422_2325, |h, b| {
        (h ^ u64::from(b)).wrapping_mul(0x100_0000_01b3)
    })
}

/// Key → tensor map holding parameters and running statistics.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    tensors: BTreeMap<String, Tensor>,
    trainable: BTreeMap<String, bool>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Deterministic initialization of `defs`. Each tensor draws from a
    /// stream seeded by `(seed, key)`, so adding or removing keys never
    /// perturbs the values of the others.
    pub fn initialize(defs: &[ParamDef], seed: u64) -> Result<Self> {
        let mut store = Self::new();
        for d in defs {
            if store.tensors.contains_key(&d.key) {
                return Err(Error::invalid(format!("duplicate parameter key {}", d.key)));
            }
            store.insert(&d.key, d.materialize(seed), d.trainable);
        }
        Ok(store)
    }

    pub fn insert(&mut self, key: &str, value: Tensor, trainable: bool) {
        self.tensors.insert(key.to_string(), value);
        self.trainable.insert(key.to_string(), trainable);
    }

    pub fn get(&self, key: &str) -> Result<&Tensor> {
        self.tensors
            .get(key)
            .ok_or_else(|| Error::KeyMismatch(format!("missing parameter `{key}`")))
    }

    /// Replaces the value of an existing key; the shape must match.
    pub fn set(&mut self, key: &str, value: Tensor) -> Result<()> {
        let slot = self
            .tensors
            .get_mut(key)
            .ok_or_else(|| Error::KeyMismatch(format!("missing parameter `{key}`")))?;
        if slot.shape() != value.shape() {
            return Err(Error::shape(format!(
                "`{key}` has shape {:?}, replacement has {:?}",
                slot.shape(),
                value.shape()
            )));
        }
        *slot = value;
        Ok(())
    }

    pub fn contains(&self, key: &str) -> bool {
        self.tensors.contains_key(key)
    }

    pub fn is_trainable(&self, key: &str) -> bool {
        self.trainable.get(key).copied().unwrap_or(false)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    /// Keys in sorted order.
    pub fn keys(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.tensors.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn trainable_keys(&self) -> impl Iterator<Item = &str> {
        self.tensors
            .keys()
            .filter(|k| self.is_trainable(k))
            .map(String::as_str)
    }

    /// Number of trainable scalars.
    pub fn trainable_count(&self) -> usize {
        self.iter()
            .filter(|(k, _)| self.is_trainable(k))
            .map(|(_, t)| t.len())
            .sum()
    }

    /// Puts every tensor on `tape`; trainable ones become differentiable
    /// leaves when `differentiable` is set.
    pub fn bind(&self, tape: &Tape, differentiable: bool) -> Bound<'_> {
        let vars = self
            .tensors
            .iter()
            .filter(|(k, _)| self.is_trainable(k))
            .map(|(k, t)| (k.clone(), tape.input(t.clone(), differentiable)))
            .collect();
        Bound { vars, store: self }
    }
}

/// A [`ParamStore`] whose trainable tensors live on a tape.
pub struct Bound<'a> {
    vars: BTreeMap<String, Var>,
    store: &'a ParamStore,
}

impl<'a> Bound<'a> {
    /// Binds caller-provided vars for the trainable keys of `store`.
    pub fn from_vars(store: &'a ParamStore, vars: impl IntoIterator<Item = (String, Var)>) -> Self {
        Self {
            vars: vars.into_iter().collect(),
            store,
        }
    }

    pub fn var(&self, key: &str) -> Result<&Var> {
        self.vars
            .get(key)
            .ok_or_else(|| Error::KeyMismatch(format!("missing trainable parameter `{key}`")))
    }

    /// Non-trainable tensor (running statistics).
    pub fn buffer(&self, key: &str) -> Result<&'a Tensor> {
        self.store.get(key)
    }

    pub fn vars(&self) -> impl Iterator<Item = (&str, &Var)> {
        self.vars.iter().map(|(k, v)| (k.as_str(), v))
    }
}

/// Per-forward mode and side outputs.
#[derive(Debug)]
pub struct ForwardCtx {
    pub training: bool,
    pub bn_momentum: f64,
    /// Running-statistic replacements produced in training mode.
    pub bn_updates: Vec<(String, Tensor)>,
}

impl ForwardCtx {
    pub fn inference() -> Self {
        Self {
            training: false,
            bn_momentum: 0.1,
            bn_updates: Vec::new(),
        }
    }

    pub fn training(bn_momentum: f64) -> Self {
        Self {
            training: true,
            bn_momentum,
            bn_updates: Vec::new(),
        }
    }

    /// Writes the collected running-statistic updates into `store`.
    pub fn apply_updates(&mut self, store: &mut ParamStore) -> Result<()> {
        for (k, v) in self.bn_updates.drain(..) {
            store.set(&k, v)?;
        }
        Ok(())
    }
}
