use std::collections::BTreeMap;

use rand::Rng as _;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::Matrix;
use crate::error::{Error, Result};
use crate::seeds::Rng;

pub type ParamId = usize;

#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub name: String,
    pub value: Matrix,
    /// Whether weight decay applies.
    pub decay: bool,
}

/// Shape record of one parameter, as stored in checkpoint manifests.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamShape {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    pub decay: bool,
}

/// Named parameters in insertion order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    params: Vec<Param>,
    index: BTreeMap<String, ParamId>,
}

pub type Grads = Vec<Option<Matrix>>;

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Matrix, decay: bool) -> ParamId {
        let name = name.into();
        assert!(!self.index.contains_key(&name), "duplicate parameter `{name}`");
        let id = self.params.len();
        self.index.insert(name.clone(), id);
        self.params.push(Param { name, value, decay });
        id
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied()
    }

    pub fn expect(&self, name: &str) -> ParamId {
        self.id(name)
            .unwrap_or_else(|| panic!("missing parameter `{name}`"))
    }

    pub fn get(&self, id: ParamId) -> &Param {
        &self.params[id]
    }

    pub fn value(&self, id: ParamId) -> &Matrix {
        &self.params[id].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Matrix {
        &mut self.params[id].value
    }

    pub fn by_name(&self, name: &str) -> Option<&Param> {
        self.id(name).map(|i| &self.params[i])
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param> {
        self.params.iter()
    }

    pub fn scalar_count(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    pub fn shapes(&self) -> Vec<ParamShape> {
        self.params
            .iter()
            .map(|p| ParamShape {
                name: p.name.clone(),
                rows: p.value.rows,
                cols: p.value.cols,
                decay: p.decay,
            })
            .collect()
    }

    /// Little-endian concatenation of all values in parameter order.
    pub fn to_blob(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.scalar_count() * 8);
        for p in &self.params {
            for x in &p.value.data {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        out
    }

    pub fn from_blob(shapes: &[ParamShape], blob: &[u8]) -> Result<Self> {
        let need: usize = shapes.iter().map(|s| s.rows * s.cols * 8).sum();
        if blob.len() != need {
            return Err(Error::Checkpoint(format!(
                "parameter blob has {} bytes, manifest expects {need}",
                blob.len()
            )));
        }
        let mut store = ParamStore::new();
        let mut chunks = blob.chunks_exact(8);
        for s in shapes {
            let data = (&mut chunks)
                .take(s.rows * s.cols)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
                .collect();
            if store.id(&s.name).is_some() {
                return Err(Error::Checkpoint(format!("duplicate parameter `{}`", s.name)));
            }
            store.add(s.name.clone(), Matrix::from_vec(s.rows, s.cols, data), s.decay);
        }
        Ok(store)
    }
}

/// `U(-bound, bound)` entries.
pub fn uniform(rows: usize, cols: usize, bound: f64, rng: &mut Rng) -> Matrix {
    Matrix::from_fn(rows, cols, |_, _| rng.random_range(-bound..bound))
}

/// Affine weight init scaled by fan-in.
pub fn fan_in_uniform(rows: usize, cols: usize, rng: &mut Rng) -> Matrix {
    uniform(rows, cols, 1.0 / (rows.max(1) as f64).sqrt(), rng)
}

pub fn normal(rows: usize, cols: usize, sd: f64, rng: &mut Rng) -> Matrix {
    let dist = Normal::new(0.0, sd).expect("finite sd");
    Matrix::from_fn(rows, cols, |_, _| dist.sample(rng))
}

/// Adam with decoupled weight decay.
#[derive(Debug, Clone)]
pub struct AdamW {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    step: u64,
    m: Vec<Option<Matrix>>,
    v: Vec<Option<Matrix>>,
}

impl AdamW {
    pub fn new(lr: f64, weight_decay: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            step: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// One update. Parameters without a gradient or with `frozen(id)` set are
    /// left untouched, moments included.
    pub fn step(&mut self, store: &mut ParamStore, grads: &Grads, frozen: impl Fn(ParamId) -> bool) {
        self.step += 1;
        if self.m.len() < store.len() {
            self.m.resize(store.len(), None);
            self.v.resize(store.len(), None);
        }
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        for (id, g) in grads.iter().enumerate() {
            let Some(g) = g else { continue };
            if frozen(id) {
                continue;
            }
            let p = &mut store.params[id];
            let m = self.m[id].get_or_insert_with(|| Matrix::zeros(g.rows, g.cols));
            let v = self.v[id].get_or_insert_with(|| Matrix::zeros(g.rows, g.cols));
            let decay = if p.decay { self.lr * self.weight_decay } else { 0.0 };
            for (((w, &gi), mi), vi) in p
                .value
                .data
                .iter_mut()
                .zip(&g.data)
                .zip(m.data.iter_mut())
                .zip(v.data.iter_mut())
            {
                *mi = self.beta1 * *mi + (1.0 - self.beta1) * gi;
                *vi = self.beta2 * *vi + (1.0 - self.beta2) * gi * gi;
                let update = (*mi / bc1) / ((*vi / bc2).sqrt() + self.eps);
                *w -= decay * *w + self.lr * update;
            }
        }
    }
}
