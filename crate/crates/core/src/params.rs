//! Named parameter tensors and the Adam optimizer with decoupled weight decay.

use ndarray::{Array2, Zip};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::graph::Mat;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Flat, ordered collection of named matrices.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Mat>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Mat) -> ParamId {
        let name = name.into();
        debug_assert!(!self.names.contains(&name), "duplicate parameter {name}");
        self.names.push(name);
        self.values.push(value);
        ParamId(self.values.len() - 1)
    }

    /// Uniform fan-in initialization `U(-1/sqrt(fan_in), 1/sqrt(fan_in))`.
    pub fn add_uniform<R: Rng>(
        &mut self,
        name: impl Into<String>,
        shape: (usize, usize),
        fan_in: usize,
        rng: &mut R,
    ) -> ParamId {
        let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
        let m = Array2::from_shape_fn(shape, |_| rng.random_range(-bound..bound));
        self.add(name, m)
    }

    pub fn add_normal<R: Rng>(
        &mut self,
        name: impl Into<String>,
        shape: (usize, usize),
        std: f64,
        rng: &mut R,
    ) -> ParamId {
        let m = Array2::from_shape_fn(shape, |_| {
            let x: f64 = StandardNormal.sample(rng);
            x * std
        });
        self.add(name, m)
    }

    pub fn add_const(&mut self, name: impl Into<String>, shape: (usize, usize), v: f64) -> ParamId {
        self.add(name, Array2::from_elem(shape, v))
    }

    pub fn get(&self, id: ParamId) -> &Mat {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Mat {
        &mut self.values[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    /// Total scalar count.
    pub fn numel(&self) -> usize {
        self.values.iter().map(|m| m.len()).sum()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Mat)> {
        self.names
            .iter()
            .zip(&self.values)
            .enumerate()
            .map(|(i, (n, v))| (ParamId(i), n.as_str(), v))
    }
}

/// Adam with decoupled weight decay (`p -= lr * wd * p` before the moment step).
#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    pub m: Vec<Option<Mat>>,
    pub v: Vec<Option<Mat>>,
}

impl Default for Adam {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }
}

impl Adam {
    pub fn new() -> Self {
        Self::default()
    }

    /// One update. Parameters without a gradient are left untouched.
    pub fn update(
        &mut self,
        store: &mut ParamStore,
        grads: &[Option<Mat>],
        lr: f64,
        weight_decay: f64,
    ) {
        self.step += 1;
        if self.m.len() < store.len() {
            self.m.resize_with(store.len(), || None);
            self.v.resize_with(store.len(), || None);
        }
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        let (b1, b2, eps) = (self.beta1, self.beta2, self.eps);
        for (i, g) in grads.iter().enumerate() {
            let Some(g) = g else { continue };
            let p = &mut store.values[i];
            let m = self.m[i].get_or_insert_with(|| Array2::zeros(g.dim()));
            let v = self.v[i].get_or_insert_with(|| Array2::zeros(g.dim()));
            Zip::from(p).and(m).and(v).and(g).for_each(|p, m, v, &g| {
                *p -= lr * weight_decay * *p;
                *m = b1 * *m + (1.0 - b1) * g;
                *v = b2 * *v + (1.0 - b2) * g * g;
                *p -= lr * (*m / bc1) / ((*v / bc2).sqrt() + eps);
            });
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn zero_lr_leaves_parameters_unchanged() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut store = ParamStore::new();
        let id = store.add_uniform("w", (3, 3), 3, &mut rng);
        let before = store.clone();
        let mut adam = Adam::new();
        let g = vec![Some(Array2::ones((3, 3)))];
        adam.update(&mut store, &g, 0.0, 0.0);
        assert_eq!(store.get(id), before.get(id));
    }

    #[test]
    fn first_step_moves_by_lr_against_gradient_sign() {
        let mut store = ParamStore::new();
        let id = store.add("w", array![[1.0, -1.0]]);
        let mut adam = Adam::new();
        adam.update(&mut store, &[Some(array![[2.0, -0.5]])], 0.1, 0.0);
        let w = store.get(id);
        assert!((w[[0, 0]] - 0.9).abs() < 1e-6);
        assert!((w[[0, 1]] + 0.9).abs() < 1e-6);
    }

    #[test]
    fn missing_gradient_skips_weight_decay() {
        let mut store = ParamStore::new();
        let a = store.add("a", array![[1.0]]);
        let b = store.add("b", array![[1.0]]);
        let mut adam = Adam::new();
        adam.update(&mut store, &[None, Some(array![[0.0]])], 0.1, 0.5);
        assert_eq!(store.get(a)[[0, 0]], 1.0);
        assert!((store.get(b)[[0, 0]] - 0.95).abs() < 1e-12);
    }
}
