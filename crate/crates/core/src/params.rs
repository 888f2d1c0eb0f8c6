//! Named parameter storage, the Adam optimizer and checkpoint files.
//!
//! # Checkpoint format
//!
//! A checkpoint is a UTF-8 JSON document:
//!
//! ```json
//! {
//!   "format": "specstg-params",
//!   "version": 1,
//!   "tensors": [ { "name": "gru.w_z1", "shape": [3, 64], "data": [ ... ] } ]
//! }
//! ```
//!
//! Tensors appear in registration order, data is row-major, and floats are
//! written in shortest round-trip form, so saving the same parameters twice
//! yields identical bytes.

use std::collections::HashMap;
use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Gradients, Tape, Tensor, Var};

pub const CHECKPOINT_FORMAT: &str = "specstg-params";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Index of a parameter inside a [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
    index: HashMap<String, usize>,
}

/// Tape handles for every parameter of a store, valid for one tape.
#[derive(Debug, Clone)]
pub struct Bound(Vec<Var>);

impl Bound {
    pub fn get(&self, id: ParamId) -> Var {
        self.0[id.0]
    }
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers a trainable tensor. Names must be unique.
    pub fn insert(&mut self, name: &str, tensor: Tensor) -> Result<ParamId> {
        if self.index.contains_key(name) {
            return Err(Error::Usage(format!("duplicate parameter name {name}")));
        }
        let id = self.tensors.len();
        self.names.push(name.to_string());
        self.tensors.push(tensor.with_grad());
        self.index.insert(name.to_string(), id);
        Ok(ParamId(id))
    }

    /// Gaussian init with standard deviation `std`.
    pub fn insert_normal<R: Rng>(
        &mut self,
        name: &str,
        shape: &[usize],
        std: f64,
        rng: &mut R,
    ) -> Result<ParamId> {
        let len = shape.iter().product();
        let dist = Normal::new(0.0, std).map_err(|e| Error::Config(e.to_string()))?;
        let data = (0..len).map(|_| dist.sample(rng)).collect();
        self.insert(name, Tensor::new(shape.to_vec(), data)?)
    }

    pub fn insert_zeros(&mut self, name: &str, shape: &[usize]) -> Result<ParamId> {
        self.insert(name, Tensor::zeros(shape))
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied().map(ParamId)
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.tensors[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.tensors.len()).map(ParamId)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    /// Places every parameter on `tape` as a gradient-tracking leaf.
    pub fn bind(&self, tape: &mut Tape) -> Result<Bound> {
        self.tensors
            .iter()
            .map(|t| tape.leaf(t))
            .collect::<Result<Vec<_>>>()
            .map(Bound)
    }

    /// Same as [`bind`](Self::bind) but without gradient tracking.
    pub fn bind_frozen(&self, tape: &mut Tape) -> Result<Bound> {
        self.tensors
            .iter()
            .map(|t| tape.constant(t.shape().to_vec(), t.data().to_vec()))
            .collect::<Result<Vec<_>>>()
            .map(Bound)
    }

    /// Adds gradients from a backward pass into each parameter's buffer.
    pub fn accumulate(&mut self, bound: &Bound, grads: &Gradients) {
        for (t, &v) in self.tensors.iter_mut().zip(&bound.0) {
            let Some(g) = grads.get(v) else { continue };
            match &mut t.grad {
                Some(acc) => acc.iter_mut().zip(g).for_each(|(a, b)| *a += b),
                slot @ None => *slot = Some(g.to_vec()),
            }
        }
    }

    pub fn zero_grad(&mut self) {
        self.tensors.iter_mut().for_each(Tensor::zero_grad);
    }

    pub fn clear_grad(&mut self) {
        self.tensors.iter_mut().for_each(|t| t.grad = None);
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        Checkpoint {
            format: CHECKPOINT_FORMAT.to_string(),
            version: CHECKPOINT_VERSION,
            tensors: self
                .names
                .iter()
                .zip(&self.tensors)
                .map(|(n, t)| NamedTensor {
                    name: n.clone(),
                    shape: t.shape().to_vec(),
                    data: t.data().to_vec(),
                })
                .collect(),
        }
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        ck.validate()?;
        let mut store = ParamStore::new();
        for nt in &ck.tensors {
            store.insert(&nt.name, Tensor::new(nt.shape.clone(), nt.data.clone())?)?;
        }
        Ok(store)
    }

    /// Copies values from `other`, which must hold the same names and shapes.
    pub fn load_values(&mut self, other: &ParamStore) -> Result<()> {
        if other.names != self.names {
            return Err(Error::Config(
                "checkpoint parameter names differ from the model".into(),
            ));
        }
        for (dst, src) in self.tensors.iter_mut().zip(&other.tensors) {
            if dst.shape() != src.shape() {
                return Err(Error::Config(format!(
                    "checkpoint shape {:?} differs from model shape {:?}",
                    src.shape(),
                    dst.shape()
                )));
            }
            dst.data_mut().copy_from_slice(src.data());
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_checkpoint().save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_checkpoint(&Checkpoint::load(path)?)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NamedTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Checkpoint {
    pub format: String,
    pub version: u32,
    pub tensors: Vec<NamedTensor>,
}

impl Checkpoint {
    fn validate(&self) -> Result<()> {
        if self.format != CHECKPOINT_FORMAT || self.version != CHECKPOINT_VERSION {
            return Err(Error::Config(format!(
                "unsupported checkpoint {} v{}",
                self.format, self.version
            )));
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string(self)?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let ck: Checkpoint = serde_json::from_str(&text)?;
        ck.validate()?;
        Ok(ck)
    }
}

/// Adam with bias correction.
#[derive(Debug, Clone)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(beta1: f64, beta2: f64, eps: f64) -> Self {
        Adam {
            beta1,
            beta2,
            eps,
            step: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// One update of every parameter, then zeroes the gradient buffers.
    pub fn step(&mut self, params: &mut ParamStore, lr: f64) -> Result<()> {
        if let Some(id) = params.ids().find(|&id| params.get(id).grad.is_none()) {
            return Err(Error::Usage(format!(
                "parameter {} has no gradient; run backward first",
                params.name(id)
            )));
        }
        if self.m.is_empty() {
            self.m = params.tensors.iter().map(|t| vec![0.0; t.len()]).collect();
            self.v = self.m.clone();
        }
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        for (i, t) in params.tensors.iter_mut().enumerate() {
            let grad = t.grad.take().expect("checked above");
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for (j, p) in t.data_mut().iter_mut().enumerate() {
                let g = grad[j];
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * g;
                v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * g * g;
                let m_hat = m[j] / bc1;
                let v_hat = v[j] / bc2;
                *p -= lr * m_hat / (v_hat.sqrt() + self.eps);
            }
            t.grad = Some(vec![0.0; grad.len()]);
        }
        Ok(())
    }
}

impl Default for Adam {
    fn default() -> Self {
        Adam::new(0.9, 0.999, 1e-8)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn single(p: f64, g: f64) -> ParamStore {
        let mut s = ParamStore::new();
        let id = s
            .insert("p", Tensor::new(vec![1], vec![p]).unwrap())
            .unwrap();
        s.get_mut(id).grad = Some(vec![g]);
        s
    }

    #[test]
    fn first_adam_step_moves_by_lr() {
        // m̂ = g, v̂ = g², so the step is lr·g/(|g| + eps) ≈ lr.
        let mut s = single(1.0, 1.0);
        Adam::default().step(&mut s, 0.1).unwrap();
        let p = s.get(s.id("p").unwrap()).data()[0];
        assert!((p - 0.9).abs() < 1e-8, "{p}");
        assert_eq!(s.get(s.id("p").unwrap()).grad.as_deref(), Some(&[0.0][..]));
    }

    #[test]
    fn zero_gradient_leaves_parameter() {
        let mut s = single(1.0, 0.0);
        Adam::default().step(&mut s, 0.1).unwrap();
        assert_eq!(s.get(s.id("p").unwrap()).data()[0], 1.0);
    }

    #[test]
    fn missing_gradient_is_usage_error() {
        let mut s = ParamStore::new();
        s.insert("p", Tensor::scalar(1.0)).unwrap();
        assert!(matches!(
            Adam::default().step(&mut s, 0.1),
            Err(Error::Usage(_))
        ));
    }

    #[test]
    fn two_steps_decrease_convex_quadratic() {
        // f(p) = (p - 3)², gradient 2(p - 3)
        let loss = |p: f64| (p - 3.0) * (p - 3.0);
        let mut s = single(0.0, 0.0);
        let id = s.id("p").unwrap();
        let mut adam = Adam::default();
        let mut prev = loss(0.0);
        for _ in 0..2 {
            let p = s.get(id).data()[0];
            s.get_mut(id).grad = Some(vec![2.0 * (p - 3.0)]);
            adam.step(&mut s, 0.1).unwrap();
            let now = loss(s.get(id).data()[0]);
            assert!(now < prev);
            prev = now;
        }
    }

    #[test]
    fn checkpoint_round_trip_is_stable() {
        let mut s = ParamStore::new();
        s.insert(
            "a",
            Tensor::new(vec![2, 2], vec![0.1, -2.5, 1e-300, 3.0]).unwrap(),
        )
        .unwrap();
        s.insert(
            "b",
            Tensor::new(vec![3], vec![1.0 / 3.0, 2.0, -0.0]).unwrap(),
        )
        .unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p1 = dir.path().join("one.json");
        let p2 = dir.path().join("two.json");
        s.save(&p1).unwrap();
        let loaded = ParamStore::load(&p1).unwrap();
        loaded.save(&p2).unwrap();
        assert_eq!(std::fs::read(&p1).unwrap(), std::fs::read(&p2).unwrap());
        for id in s.ids() {
            assert_eq!(s.get(id).data(), loaded.get(id).data());
        }
        assert!(s.insert("a", Tensor::scalar(0.0)).is_err());
    }

    #[test]
    fn rejects_foreign_checkpoint() {
        let ck = Checkpoint {
            format: "other".into(),
            version: 1,
            tensors: vec![],
        };
        assert!(ParamStore::from_checkpoint(&ck).is_err());
    }
}
