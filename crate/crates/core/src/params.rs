//! Named parameter storage, gradient accumulation and the Adam optimiser.

use indexmap::IndexMap;
use ndarray::Array2;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::tape::{Gradients, Tape, Var};

/// Trainable parameters plus non-trainable buffers (batch-norm running
/// statistics), both keyed by stable dotted names.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    params: IndexMap<String, Array2<f64>>,
    buffers: IndexMap<String, Array2<f64>>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Array2<f64>) {
        self.params.insert(name.into(), value);
    }

    pub fn insert_buffer(&mut self, name: impl Into<String>, value: Array2<f64>) {
        self.buffers.insert(name.into(), value);
    }

    pub fn get(&self, name: &str) -> Option<&Array2<f64>> {
        self.params.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Array2<f64>> {
        self.params.get_mut(name)
    }

    pub fn buffer(&self, name: &str) -> Option<&Array2<f64>> {
        self.buffers.get(name)
    }

    pub fn buffer_mut(&mut self, name: &str) -> Option<&mut Array2<f64>> {
        self.buffers.get_mut(name)
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.params.get_index_of(name)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Total number of trainable scalars.
    pub fn num_scalars(&self) -> usize {
        self.params.values().map(|a| a.len()).sum()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Array2<f64>)> {
        self.params.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_buffers(&self) -> impl Iterator<Item = (&str, &Array2<f64>)> {
        self.buffers.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn values_mut(&mut self) -> impl Iterator<Item = &mut Array2<f64>> {
        self.params.values_mut()
    }

    pub fn param_at(&self, idx: usize) -> &Array2<f64> {
        &self.params[idx]
    }

    pub fn name_at(&self, idx: usize) -> &str {
        self.params.get_index(idx).map(|(k, _)| k.as_str()).unwrap_or("")
    }
}

/// Parameter initialisers.
pub mod init {
    use super::*;

    /// Glorot-uniform `fan_in × fan_out` weight.
    pub fn xavier<R: Rng>(rng: &mut R, fan_in: usize, fan_out: usize) -> Array2<f64> {
        let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
        Array2::from_shape_fn((fan_in, fan_out), |_| rng.gen_range(-a..a))
    }

    pub fn uniform<R: Rng>(rng: &mut R, rows: usize, cols: usize, a: f64) -> Array2<f64> {
        Array2::from_shape_fn((rows, cols), |_| rng.gen_range(-a..a))
    }

    pub fn normal<R: Rng>(rng: &mut R, rows: usize, cols: usize, std: f64) -> Array2<f64> {
        let d = Normal::new(0.0, std).expect("positive std");
        Array2::from_shape_fn((rows, cols), |_| d.sample(rng))
    }

    pub fn zeros(cols: usize) -> Array2<f64> {
        Array2::zeros((1, cols))
    }

    pub fn ones(cols: usize) -> Array2<f64> {
        Array2::ones((1, cols))
    }
}

/// Maps parameter names to tape leaves, creating each leaf on first use so
/// that a parameter shared between several layers appears exactly once.
pub struct Binder<'p> {
    store: &'p ParamStore,
    bound: Vec<Option<Var>>,
}

impl<'p> Binder<'p> {
    pub fn new(store: &'p ParamStore) -> Self {
        Self { store, bound: vec![None; store.len()] }
    }

    pub fn store(&self) -> &'p ParamStore {
        self.store
    }

    /// Leaf for parameter `name`. Panics on unknown names: model code and
    /// parameter construction are kept in lock-step.
    pub fn get(&mut self, tape: &mut Tape<'p>, name: &str) -> Var {
        let idx = self.store.index_of(name).unwrap_or_else(|| panic!("unknown parameter {name}"));
        if let Some(v) = self.bound[idx] {
            return v;
        }
        let v = tape.param(self.store.param_at(idx));
        self.bound[idx] = Some(v);
        v
    }

    pub fn buffer(&self, name: &str) -> &'p Array2<f64> {
        self.store.buffer(name).unwrap_or_else(|| panic!("unknown buffer {name}"))
    }

    /// Add this binder's parameter gradients into `into`.
    pub fn collect(&self, grads: &Gradients, into: &mut GradStore) {
        for (idx, v) in self.bound.iter().enumerate() {
            if let Some(v) = v {
                if let Some(g) = grads.get(*v) {
                    into.add(idx, g);
                }
            }
        }
    }
}

/// Gradients aligned with a [`ParamStore`]'s parameter order.
#[derive(Debug, Clone)]
pub struct GradStore {
    grads: Vec<Option<Array2<f64>>>,
}

impl GradStore {
    pub fn new(store: &ParamStore) -> Self {
        Self { grads: vec![None; store.len()] }
    }

    pub fn add(&mut self, idx: usize, g: &Array2<f64>) {
        match &mut self.grads[idx] {
            Some(e) => *e += g,
            slot @ None => *slot = Some(g.clone()),
        }
    }

    pub fn merge(&mut self, other: &GradStore) {
        for (idx, g) in other.grads.iter().enumerate() {
            if let Some(g) = g {
                self.add(idx, g);
            }
        }
    }

    pub fn get(&self, idx: usize) -> Option<&Array2<f64>> {
        self.grads[idx].as_ref()
    }

    pub fn by_name<'s>(&'s self, store: &ParamStore, name: &str) -> Option<&'s Array2<f64>> {
        store.index_of(name).and_then(|i| self.get(i))
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }

    /// Flatten into one vector following parameter order (zeros where absent).
    pub fn flatten(&self, store: &ParamStore) -> Vec<f64> {
        let mut out = Vec::with_capacity(store.num_scalars());
        for (idx, (_, p)) in store.iter().enumerate() {
            match self.get(idx) {
                Some(g) => out.extend(g.iter().copied()),
                None => out.extend(std::iter::repeat(0.0).take(p.len())),
            }
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// Adam moments for every parameter.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub step: u64,
    m: Vec<Array2<f64>>,
    v: Vec<Array2<f64>>,
}

impl AdamState {
    pub fn new(store: &ParamStore) -> Self {
        let zeros: Vec<_> = store.iter().map(|(_, p)| Array2::zeros(p.raw_dim())).collect();
        Self { step: 0, m: zeros.clone(), v: zeros }
    }

    /// One bias-corrected Adam update. Parameters without a gradient are
    /// treated as having a zero gradient.
    pub fn update(&mut self, store: &mut ParamStore, grads: &GradStore, lr: f64, cfg: &AdamConfig) {
        self.step += 1;
        let bc1 = 1.0 - cfg.beta1.powi(self.step as i32);
        let bc2 = 1.0 - cfg.beta2.powi(self.step as i32);
        for (idx, p) in store.values_mut().enumerate() {
            let m = &mut self.m[idx];
            let v = &mut self.v[idx];
            match grads.get(idx) {
                Some(g) => {
                    ndarray::Zip::from(&mut *m).and(&mut *v).and(g).for_each(|m, v, &g| {
                        *m = cfg.beta1 * *m + (1.0 - cfg.beta1) * g;
                        *v = cfg.beta2 * *v + (1.0 - cfg.beta2) * g * g;
                    });
                }
                None => {
                    m.mapv_inplace(|x| cfg.beta1 * x);
                    v.mapv_inplace(|x| cfg.beta2 * x);
                }
            }
            if lr == 0.0 {
                continue;
            }
            ndarray::Zip::from(p).and(&*m).and(&*v).for_each(|p, &m, &v| {
                *p -= lr * (m / bc1) / ((v / bc2).sqrt() + cfg.eps);
            });
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn shared_parameter_binds_once() {
        let mut store = ParamStore::new();
        store.insert("w", array![[2.0]]);
        let mut tape = Tape::new();
        let mut b = Binder::new(&store);
        let a = b.get(&mut tape, "w");
        let c = b.get(&mut tape, "w");
        assert_eq!(a, c);
        let y = tape.mul(a, c);
        let one = Array2::ones((1, 1));
        let g = tape.backward(&[(y, &one)]);
        let mut gs = GradStore::new(&store);
        b.collect(&g, &mut gs);
        assert_eq!(gs.get(0).unwrap()[[0, 0]], 4.0);
    }

    #[test]
    fn adam_moves_against_gradient() {
        let mut store = ParamStore::new();
        store.insert("w", array![[1.0, -1.0]]);
        let mut st = AdamState::new(&store);
        let mut gs = GradStore::new(&store);
        gs.add(0, &array![[0.5, -0.5]]);
        st.update(&mut store, &gs, 0.1, &AdamConfig::default());
        let w = store.get("w").unwrap();
        assert!((w[[0, 0]] - 0.9).abs() < 1e-6);
        assert!((w[[0, 1]] + 0.9).abs() < 1e-6);
    }

    #[test]
    fn zero_learning_rate_leaves_parameters() {
        let mut store = ParamStore::new();
        store.insert("w", array![[1.0, -1.0]]);
        let before = store.clone();
        let mut st = AdamState::new(&store);
        let mut gs = GradStore::new(&store);
        gs.add(0, &array![[0.5, -0.5]]);
        st.update(&mut store, &gs, 0.0, &AdamConfig::default());
        st.update(&mut store, &gs, 0.0, &AdamConfig::default());
        assert_eq!(store, before);
    }
}
