//! Parameter storage, initialization, and the momentum-SGD optimizer.

use std::sync::Arc;

use ndarray::{Array1, Array2, ArrayD};
use rand::Rng;

use crate::error::{Error, Result};

/// Handle to one parameter tensor in a [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamId(pub(crate) usize);

struct Entry {
    name: String,
    value: Arc<ArrayD<f64>>,
}

/// Owns every trainable tensor of a model, in registration order.
#[derive(Default)]
pub struct ParamStore {
    entries: Vec<Entry>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: &str, value: ArrayD<f64>) -> ParamId {
        self.entries.push(Entry {
            name: name.to_string(),
            value: Arc::new(value),
        });
        ParamId(self.entries.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &ArrayD<f64> {
        &self.entries[id.0].value
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id.0].name
    }

    pub(crate) fn shared(&self, id: ParamId) -> Arc<ArrayD<f64>> {
        Arc::clone(&self.entries[id.0].value)
    }

    /// Mutable access; clones only if a tape still holds the value.
    pub fn value_mut(&mut self, id: ParamId) -> &mut ArrayD<f64> {
        Arc::make_mut(&mut self.entries[id.0].value)
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &ArrayD<f64>)> {
        self.entries.iter().map(|e| (e.name.as_str(), &*e.value))
    }

    /// Total number of scalar parameters.
    pub fn num_scalars(&self) -> usize {
        self.entries.iter().map(|e| e.value.len()).sum()
    }

    /// Replace a stored value; shapes must match.
    pub fn set(&mut self, id: ParamId, value: ArrayD<f64>) -> Result<()> {
        if value.shape() != self.get(id).shape() {
            return Err(Error::InvalidShape(format!(
                "parameter '{}' expects shape {:?}, got {:?}",
                self.name(id),
                self.get(id).shape(),
                value.shape()
            )));
        }
        self.entries[id.0].value = Arc::new(value);
        Ok(())
    }

    pub fn id_by_name(&self, name: &str) -> Option<ParamId> {
        self.entries
            .iter()
            .position(|e| e.name == name)
            .map(ParamId)
    }
}

/// Gradient accumulator aligned with a [`ParamStore`].
pub struct GradBuffer {
    grads: Vec<ArrayD<f64>>,
}

impl GradBuffer {
    pub fn zeros_like(store: &ParamStore) -> Self {
        Self {
            grads: store
                .entries
                .iter()
                .map(|e| ArrayD::zeros(e.value.raw_dim()))
                .collect(),
        }
    }

    pub fn zero(&mut self) {
        for g in &mut self.grads {
            g.fill(0.0);
        }
    }

    pub fn accumulate(&mut self, id: ParamId, delta: &ArrayD<f64>) {
        self.grads[id.0] += delta;
    }

    pub fn get(&self, id: ParamId) -> &ArrayD<f64> {
        &self.grads[id.0]
    }

    pub fn scale(&mut self, c: f64) {
        for g in &mut self.grads {
            g.mapv_inplace(|v| v * c);
        }
    }

    pub fn global_norm(&self) -> f64 {
        self.grads
            .iter()
            .map(|g| g.iter().map(|v| v * v).sum::<f64>())
            .sum::<f64>()
            .sqrt()
    }

    /// Clip to a maximum global L2 norm; returns the pre-clip norm.
    pub fn clip_global_norm(&mut self, max_norm: f64) -> f64 {
        let norm = self.global_norm();
        if max_norm > 0.0 && norm > max_norm {
            self.scale(max_norm / norm);
        }
        norm
    }
}

/// Xavier-uniform matrix init.
pub fn xavier_uniform<R: Rng>(rng: &mut R, rows: usize, cols: usize) -> ArrayD<f64> {
    let limit = (6.0 / (rows + cols) as f64).sqrt();
    Array2::from_shape_fn((rows, cols), |_| rng.random_range(-limit..limit)).into_dyn()
}

pub fn zeros_vec(len: usize) -> ArrayD<f64> {
    Array1::<f64>::zeros(len).into_dyn()
}

/// Stochastic gradient descent with classical momentum:
/// `v <- mu*v - lr*g`, `p <- p + v`.
pub struct SgdMomentum {
    pub learning_rate: f64,
    pub momentum: f64,
    velocity: Vec<ArrayD<f64>>,
}

impl SgdMomentum {
    pub fn new(store: &ParamStore, learning_rate: f64, momentum: f64) -> Self {
        Self {
            learning_rate,
            momentum,
            velocity: store
                .entries
                .iter()
                .map(|e| ArrayD::zeros(e.value.raw_dim()))
                .collect(),
        }
    }

    pub fn step(&mut self, store: &mut ParamStore, grads: &GradBuffer) {
        for id in 0..store.len() {
            let v = &mut self.velocity[id];
            v.zip_mut_with(&grads.grads[id], |vi, &gi| {
                *vi = self.momentum * *vi - self.learning_rate * gi;
            });
            store.value_mut(ParamId(id)).zip_mut_with(v, |p, &vi| *p += vi);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn sgd_momentum_matches_hand_rollout() {
        let mut store = ParamStore::new();
        let id = store.add("p", array![1.0, 2.0].into_dyn());
        let mut grads = GradBuffer::zeros_like(&store);
        grads.accumulate(id, &array![0.5, -1.0].into_dyn());

        let mut opt = SgdMomentum::new(&store, 0.1, 0.9);
        opt.step(&mut store, &grads);
        // v1 = -0.1*g, p1 = p0 + v1
        assert_eq!(store.get(id).as_slice().unwrap(), &[0.95, 2.1]);
        opt.step(&mut store, &grads);
        // v2 = 0.9*v1 - 0.1*g = [-0.095, 0.19]
        let p = store.get(id).as_slice().unwrap().to_vec();
        assert!((p[0] - 0.855).abs() < 1e-12);
        assert!((p[1] - 2.29).abs() < 1e-12);
    }

    #[test]
    fn clip_rescales_long_gradients() {
        let mut store = ParamStore::new();
        let id = store.add("p", array![0.0, 0.0].into_dyn());
        let mut grads = GradBuffer::zeros_like(&store);
        grads.accumulate(id, &array![3.0, 4.0].into_dyn());
        let norm = grads.clip_global_norm(1.0);
        assert!((norm - 5.0).abs() < 1e-12);
        assert!((grads.get(id)[0] - 0.6).abs() < 1e-12);
        assert!((grads.get(id)[1] - 0.8).abs() < 1e-12);
    }
}
