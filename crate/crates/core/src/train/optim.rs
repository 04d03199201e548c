use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::Tensor;

/// Bias-corrected Adam over the trainable tensors of a store.
#[derive(Clone, Debug)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: u64,
    m: BTreeMap<String, Tensor>,
    v: BTreeMap<String, Tensor>,
}

impl Default for Adam {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }
}

impl Adam {
    pub fn steps(&self) -> u64 {
        self.t
    }

    /// One update. `grads` must hold exactly the trainable keys of `store`;
    /// nothing is written unless every gradient is finite.
    pub fn step(
        &mut self,
        store: &mut ParamStore,
        grads: &BTreeMap<String, Tensor>,
        lr: f64,
    ) -> Result<()> {
        let keys: Vec<&str> = store.trainable_keys().collect();
        if keys.len() != grads.len() || keys.iter().any(|k| !grads.contains_key(*k)) {
            let missing: Vec<&&str> = keys.iter().filter(|k| !grads.contains_key(**k)).collect();
            let extra: Vec<&String> = grads
                .keys()
                .filter(|k| !keys.contains(&k.as_str()))
                .collect();
            return Err(Error::KeyMismatch(format!(
                "gradients missing {missing:?}, unexpected {extra:?}"
            )));
        }
        for (k, g) in grads {
            if g.shape() != store.get(k)?.shape() {
                return Err(Error::shape(format!(
                    "gradient of `{k}` has shape {:?}",
                    g.shape()
                )));
            }
            if !g.is_finite() {
                return Err(Error::NonFinite("adam gradient"));
            }
        }
        self.t += 1;
        let (b1, b2) = (self.beta1, self.beta2);
        let c1 = 1.0 - b1.powi(self.t as i32);
        let c2 = 1.0 - b2.powi(self.t as i32);
        for (k, g) in grads {
            let m = self
                .m
                .entry(k.clone())
                .or_insert_with(|| Tensor::zeros(g.shape()));
            let v = self
                .v
                .entry(k.clone())
                .or_insert_with(|| Tensor::zeros(g.shape()));
            let mut p = store.get(k)?.clone();
            for (((pi, mi), vi), &gi) in p
                .data_mut()
                .iter_mut()
                .zip(m.data_mut())
                .zip(v.data_mut())
                .zip(g.data())
            {
                *mi = b1 * *mi + (1.0 - b1) * gi;
                *vi = b2 * *vi + (1.0 - b2) * gi * gi;
                *pi -= lr * (*mi / c1) / ((*vi / c2).sqrt() + self.eps);
            }
            store.set(k, p)?;
        }
        Ok(())
    }
}

/// Smallest learning rate the plateau rule will produce.
pub const MIN_LR: f64 = 1e-7;

/// Learning-rate reduction on a validation plateau and early stopping.
/// Scores are higher-is-better.
#[derive(Clone, Debug)]
pub struct Plateau {
    pub patience: usize,
    pub factor: f64,
    pub stop_patience: usize,
    best: f64,
    since_best: usize,
    since_reduce: usize,
}

impl Plateau {
    pub fn new(patience: usize, factor: f64, stop_patience: usize) -> Self {
        Self {
            patience,
            factor,
            stop_patience,
            best: f64::NEG_INFINITY,
            since_best: 0,
            since_reduce: 0,
        }
    }

    /// Records one epoch's score and returns the learning rate for the
    /// next epoch. Reduction happens when the best score is `patience`
    /// epochs old, then waits another `patience` epochs.
    pub fn observe(&mut self, score: f64, lr: f64) -> f64 {
        if score > self.best {
            self.best = score;
            self.since_best = 0;
            self.since_reduce = 0;
            return lr;
        }
        self.since_best += 1;
        self.since_reduce += 1;
        if self.since_reduce >= self.patience {
            self.since_reduce = 0;
            return (lr * self.factor).max(MIN_LR);
        }
        lr
    }

    pub fn improved(&self) -> bool {
        self.since_best == 0
    }

    pub fn should_stop(&self) -> bool {
        self.since_best >= self.stop_patience
    }

    pub fn best(&self) -> f64 {
        self.best
    }
}

/// Learning rate after each score of `history`, starting from `lr`.
pub fn lr_schedule(history: &[f64], lr: f64, patience: usize, factor: f64) -> f64 {
    let mut p = Plateau::new(patience, factor, usize::MAX);
    history.iter().fold(lr, |lr, &s| p.observe(s, lr))
}
