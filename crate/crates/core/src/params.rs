//! Named parameter tensors, initialization and the AdamW optimizer.

use std::collections::HashMap;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::Matrix;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Matrix>,
    by_name: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Matrix) -> ParamId {
        let name = name.into();
        assert!(
            !self.by_name.contains_key(&name),
            "duplicate parameter `{name}`"
        );
        self.by_name.insert(name.clone(), self.values.len());
        self.names.push(name);
        self.values.push(value);
        ParamId(self.values.len() - 1)
    }

    /// `fan_in x fan_out` matrix drawn from `U(-1/sqrt(fan_in), 1/sqrt(fan_in))`.
    pub fn add_uniform(
        &mut self,
        name: impl Into<String>,
        fan_in: usize,
        fan_out: usize,
        rng: &mut impl Rng,
    ) -> ParamId {
        self.add(name, uniform(fan_in, fan_out, fan_in, rng))
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Matrix {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Matrix {
        &mut self.values[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).map(|&i| ParamId(i))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Matrix)> {
        self.names.iter().map(String::as_str).zip(&self.values)
    }

    pub fn values(&self) -> &[Matrix] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [Matrix] {
        &mut self.values
    }

    pub fn total_len(&self) -> usize {
        self.values.iter().map(Matrix::len).sum()
    }

    pub fn zeros_like(&self) -> Vec<Matrix> {
        self.values
            .iter()
            .map(|m| Matrix::zeros(m.rows(), m.cols()))
            .collect()
    }

    /// Binds a parameter onto a graph.
    pub fn bind(&self, g: &mut Graph, id: ParamId) -> Var {
        g.param(id.0, &self.values[id.0])
    }

    /// Replaces every tensor with the same-named one from `other`, checking
    /// that names and shapes agree exactly.
    pub fn load_from(&mut self, named: &[(String, Matrix)]) -> Result<()> {
        if named.len() != self.values.len() {
            return Err(Error::Checkpoint(format!(
                "expected {} tensors, found {}",
                self.values.len(),
                named.len()
            )));
        }
        for (name, value) in named {
            let idx = *self
                .by_name
                .get(name)
                .ok_or_else(|| Error::Checkpoint(format!("unexpected tensor `{name}`")))?;
            if self.values[idx].shape() != value.shape() {
                return Err(Error::Checkpoint(format!(
                    "tensor `{name}` has shape {:?}, model expects {:?}",
                    value.shape(),
                    self.values[idx].shape()
                )));
            }
            self.values[idx] = value.clone();
        }
        Ok(())
    }
}

pub(crate) fn uniform(rows: usize, cols: usize, fan_in: usize, rng: &mut impl Rng) -> Matrix {
    let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
    let data = (0..rows * cols)
        .map(|_| rng.random_range(-bound..bound))
        .collect();
    Matrix::from_vec(rows, cols, data).expect("uniform shape")
}

pub(crate) fn normal(rows: usize, cols: usize, std: f64, rng: &mut impl Rng) -> Matrix {
    let dist = Normal::new(0.0, std).expect("valid std");
    let data = (0..rows * cols).map(|_| dist.sample(rng)).collect();
    Matrix::from_vec(rows, cols, data).expect("normal shape")
}

/// An affine map `x·W + b` with `W: in x out`.
#[derive(Clone, Copy, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Linear {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let weight = store.add_uniform(format!("{name}.weight"), fan_in, fan_out, rng);
        let bias = store.add(format!("{name}.bias"), uniform(1, fan_out, fan_in, rng));
        Self { weight, bias }
    }

    pub fn forward(&self, store: &ParamStore, g: &mut Graph, x: Var) -> Var {
        let w = store.bind(g, self.weight);
        let b = store.bind(g, self.bias);
        let y = g.matmul(x, w);
        g.add_row(y, b)
    }

    /// Plain evaluation on a matrix, no tape.
    pub fn apply(&self, store: &ParamStore, x: &Matrix) -> Matrix {
        let mut y = x.matmul(store.get(self.weight));
        let b = store.get(self.bias).as_slice();
        for r in 0..y.rows() {
            for (v, bb) in y.row_mut(r).iter_mut().zip(b) {
                *v += bb;
            }
        }
        y
    }
}

/// Learned gain and bias applied after row standardization.
#[derive(Clone, Copy, Debug)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize) -> Self {
        Self {
            gain: store.add(format!("{name}.gain"), Matrix::filled(1, dim, 1.0)),
            bias: store.add(format!("{name}.bias"), Matrix::zeros(1, dim)),
        }
    }

    pub fn forward(&self, store: &ParamStore, g: &mut Graph, x: Var) -> Var {
        let n = g.layer_norm_rows(x);
        let gain = store.bind(g, self.gain);
        let bias = store.bind(g, self.bias);
        let y = g.mul_row(n, gain);
        g.add_row(y, bias)
    }
}

#[derive(Clone, Copy, Debug)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

#[derive(Clone, Debug)]
pub struct AdamW {
    pub config: AdamWConfig,
    first: Vec<Matrix>,
    second: Vec<Matrix>,
    t: u64,
}

impl AdamW {
    pub fn new(store: &ParamStore, config: AdamWConfig) -> Self {
        Self {
            config,
            first: store.zeros_like(),
            second: store.zeros_like(),
            t: 0,
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.t
    }

    /// One decoupled-weight-decay Adam update at learning rate `lr`.
    pub fn step(&mut self, store: &mut ParamStore, grads: &[Matrix], lr: f64) {
        self.t += 1;
        let c = self.config;
        let bc1 = 1.0 - c.beta1.powi(self.t as i32);
        let bc2 = 1.0 - c.beta2.powi(self.t as i32);
        for ((p, g), (m, v)) in store
            .values_mut()
            .iter_mut()
            .zip(grads)
            .zip(self.first.iter_mut().zip(self.second.iter_mut()))
        {
            let p = p.as_mut_slice();
            let g = g.as_slice();
            let m = m.as_mut_slice();
            let v = v.as_mut_slice();
            for i in 0..p.len() {
                m[i] = c.beta1 * m[i] + (1.0 - c.beta1) * g[i];
                v[i] = c.beta2 * v[i] + (1.0 - c.beta2) * g[i] * g[i];
                let mh = m[i] / bc1;
                let vh = v[i] / bc2;
                p[i] *= 1.0 - lr * c.weight_decay;
                p[i] -= lr * mh / (vh.sqrt() + c.eps);
            }
        }
    }
}

pub fn global_norm(grads: &[Matrix]) -> f64 {
    grads.iter().map(Matrix::sum_sq).sum::<f64>().sqrt()
}

/// Rescales `grads` so their joint L2 norm is at most `max_norm`. Returns the
/// norm before clipping.
pub fn clip_global_norm(grads: &mut [Matrix], max_norm: f64) -> f64 {
    let norm = global_norm(grads);
    if norm > max_norm {
        let k = max_norm / (norm + 1e-6);
        for g in grads.iter_mut() {
            g.scale_in_place(k);
        }
    }
    norm
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;

    #[test]
    fn clipping_caps_the_global_norm() {
        let mut grads = vec![Matrix::filled(2, 2, 3.0), Matrix::filled(1, 3, -4.0)];
        let before = clip_global_norm(&mut grads, 1.0);
        assert!((before - (36.0f64 + 48.0).sqrt()).abs() < 1e-12);
        assert!(global_norm(&grads) <= 1.0);
        let mut small = vec![Matrix::filled(1, 1, 0.5)];
        clip_global_norm(&mut small, 1.0);
        assert_eq!(small[0].item(), 0.5);
    }

    #[test]
    fn zero_learning_rate_leaves_parameters_bitwise_unchanged() {
        let mut r = rng::seeded(1);
        let mut store = ParamStore::new();
        Linear::new(&mut store, "l", 3, 2, &mut r);
        let before = store.clone();
        let mut opt = AdamW::new(&store, AdamWConfig::default());
        let grads = vec![Matrix::filled(3, 2, 0.7), Matrix::filled(1, 2, -0.2)];
        opt.step(&mut store, &grads, 0.0);
        for (a, b) in before.values().iter().zip(store.values()) {
            assert_eq!(a, b);
        }
    }

    #[test]
    fn adamw_descends_a_quadratic() {
        let mut store = ParamStore::new();
        let id = store.add("x", Matrix::filled(1, 2, 3.0));
        let mut opt = AdamW::new(
            &store,
            AdamWConfig {
                weight_decay: 0.0,
                ..AdamWConfig::default()
            },
        );
        for _ in 0..2000 {
            let grads = vec![store.get(id).map(|v| 2.0 * v)];
            opt.step(&mut store, &grads, 0.01);
        }
        assert!(store.get(id).sum_sq() < 1e-4);
    }

    #[test]
    fn load_from_validates_names_and_shapes() {
        let mut store = ParamStore::new();
        store.add("a", Matrix::zeros(2, 2));
        assert!(store
            .load_from(&[("a".into(), Matrix::zeros(2, 3))])
            .is_err());
        assert!(store
            .load_from(&[("b".into(), Matrix::zeros(2, 2))])
            .is_err());
        store
            .load_from(&[("a".into(), Matrix::filled(2, 2, 1.0))])
            .unwrap();
        assert_eq!(store.values()[0].sum(), 4.0);
    }
}
