//! Named parameter storage and the AdamW optimizer.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autograd::{Grads, Mat};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct ParamId(pub usize);

#[derive(Clone, Copy, Debug)]
pub enum Init {
    Zeros,
    Ones,
    /// Gaussian with the given standard deviation.
    Normal(f64),
    /// Gaussian scaled by `1/sqrt(fan_in)`, where fan-in is the row count.
    FanIn,
}

#[derive(Clone, Debug)]
struct Entry {
    name: String,
    value: Mat,
    trainable: bool,
}

#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    entries: Vec<Entry>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add<R: Rng>(
        &mut self,
        name: impl Into<String>,
        shape: (usize, usize),
        init: Init,
        trainable: bool,
        rng: &mut R,
    ) -> ParamId {
        let value = match init {
            Init::Zeros => Mat::zeros(shape),
            Init::Ones => Mat::ones(shape),
            Init::Normal(std) => Mat::from_shape_simple_fn(shape, || std * rng.sample::<f64, _>(StandardNormal)),
            Init::FanIn => {
                let std = 1.0 / (shape.0 as f64).sqrt();
                Mat::from_shape_simple_fn(shape, || std * rng.sample::<f64, _>(StandardNormal))
            }
        };
        self.insert(name, value, trainable)
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Mat, trainable: bool) -> ParamId {
        let name = name.into();
        debug_assert!(self.find(&name).is_none(), "duplicate parameter {name}");
        self.entries.push(Entry {
            name,
            value,
            trainable,
        });
        ParamId(self.entries.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.entries.iter().position(|e| e.name == name).map(ParamId)
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id.0].name
    }

    pub fn value(&self, id: ParamId) -> &Mat {
        &self.entries[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Mat {
        &mut self.entries[id.0].value
    }

    pub fn is_trainable(&self, id: ParamId) -> bool {
        self.entries[id.0].trainable
    }

    pub fn set_trainable(&mut self, id: ParamId, trainable: bool) {
        self.entries[id.0].trainable = trainable;
    }

    /// Mark every parameter whose name starts with `prefix`.
    pub fn set_trainable_prefix(&mut self, prefix: &str, trainable: bool) {
        for e in &mut self.entries {
            if e.name.starts_with(prefix) {
                e.trainable = trainable;
            }
        }
    }

    pub fn num_scalars(&self) -> usize {
        self.entries.iter().map(|e| e.value.len()).sum()
    }

    /// SHA-256 over names and little-endian values of the selected parameters.
    pub fn digest(&self, filter: impl Fn(&str, bool) -> bool) -> String {
        let mut h = Sha256::new();
        for e in &self.entries {
            if !filter(&e.name, e.trainable) {
                continue;
            }
            h.update(e.name.as_bytes());
            for v in e.value.iter() {
                h.update(v.to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }

    /// Digest of all frozen parameters.
    pub fn frozen_digest(&self) -> String {
        self.digest(|_, trainable| !trainable)
    }

    pub(crate) fn shapes(&self) -> Vec<(String, (usize, usize), bool)> {
        self.entries
            .iter()
            .map(|e| (e.name.clone(), e.value.dim(), e.trainable))
            .collect()
    }
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Global gradient-norm clip; 0 disables.
    pub clip_norm: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 2e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
            clip_norm: 5.0,
        }
    }
}

/// AdamW with decoupled weight decay. Decay is skipped for 1-row parameters
/// (biases, norms, gates).
#[derive(Clone, Debug)]
pub struct Adam {
    pub config: AdamConfig,
    step: u64,
    m: Vec<Option<Mat>>,
    v: Vec<Option<Mat>>,
}

impl Adam {
    pub fn new(config: AdamConfig) -> Self {
        Self {
            config,
            step: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// Apply one update at learning rate `lr`; frozen parameters are skipped
    /// even if a gradient is present.
    pub fn step(&mut self, store: &mut ParamStore, grads: &Grads, lr: f64) {
        self.step += 1;
        if self.m.len() < store.len() {
            self.m.resize(store.len(), None);
            self.v.resize(store.len(), None);
        }
        let c = &self.config;
        let clip = if c.clip_norm > 0.0 {
            let n = grads.sq_norm().sqrt();
            if n > c.clip_norm {
                c.clip_norm / n
            } else {
                1.0
            }
        } else {
            1.0
        };
        let bc1 = 1.0 - c.beta1.powi(self.step as i32);
        let bc2 = 1.0 - c.beta2.powi(self.step as i32);
        for (id, g) in grads.iter() {
            if !store.is_trainable(id) {
                continue;
            }
            let m = self.m[id.0].get_or_insert_with(|| Mat::zeros(g.dim()));
            let v = self.v[id.0].get_or_insert_with(|| Mat::zeros(g.dim()));
            let decay = if g.nrows() > 1 { c.weight_decay } else { 0.0 };
            let p = store.value_mut(id);
            ndarray::Zip::from(p)
                .and(m)
                .and(v)
                .and(g)
                .for_each(|p, m, v, &g| {
                    let g = g * clip;
                    *m = c.beta1 * *m + (1.0 - c.beta1) * g;
                    *v = c.beta2 * *v + (1.0 - c.beta2) * g * g;
                    let mhat = *m / bc1;
                    let vhat = *v / bc2;
                    *p -= lr * (mhat / (vhat.sqrt() + c.eps) + decay * *p);
                });
        }
    }
}
