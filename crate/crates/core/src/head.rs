//! Anticipation head: a fixed-capacity queue of recent fused features and the
//! two-layer classifier that turns the queue into a per-frame risk score.

use std::collections::VecDeque;

use ndarray::Array1;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::params::{xavier_uniform, zeros_vec, ParamId, ParamStore};

/// Newest-first queue with capacity `k`; slots beyond `fill_count` read as
/// zero vectors. Generic so training can queue tape variables.
#[derive(Debug, Clone)]
pub struct FeatureQueue<T: Clone> {
    entries: VecDeque<T>,
    capacity: usize,
}

impl<T: Clone> FeatureQueue<T> {
    pub fn new(capacity: usize) -> Self {
        assert!(capacity >= 1, "queue capacity must be >= 1");
        Self {
            entries: VecDeque::with_capacity(capacity),
            capacity,
        }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn fill_count(&self) -> usize {
        self.entries.len()
    }

    /// Insert at the newest slot, evicting and returning the oldest entry
    /// when full.
    pub fn push(&mut self, item: T) -> Option<T> {
        self.entries.push_front(item);
        if self.entries.len() > self.capacity {
            self.entries.pop_back()
        } else {
            None
        }
    }

    /// All `k` slots newest-first, padding unfilled slots with `zero`.
    pub fn slots(&self, zero: &T) -> Vec<T> {
        let mut out: Vec<T> = self.entries.iter().cloned().collect();
        while out.len() < self.capacity {
            out.push(zero.clone());
        }
        out
    }

    pub fn iter(&self) -> impl Iterator<Item = &T> {
        self.entries.iter()
    }
}

/// Per-frame accident risk in `[0, 1]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RiskScore {
    pub value: f64,
    pub frame_index: usize,
}

/// Two fully connected layers over the concatenated queue, then a sigmoid.
pub struct ClassifierParams {
    pub queue_size: usize,
    pub fused_dim: usize,
    pub hidden_dim: usize,
    w1: ParamId,
    b1: ParamId,
    w2: ParamId,
    b2: ParamId,
}

impl ClassifierParams {
    pub fn init(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        queue_size: usize,
        fused_dim: usize,
        hidden_dim: usize,
    ) -> Self {
        Self {
            queue_size,
            fused_dim,
            hidden_dim,
            w1: store.add(
                "classifier.w1",
                xavier_uniform(rng, hidden_dim, queue_size * fused_dim),
            ),
            b1: store.add("classifier.b1", zeros_vec(hidden_dim)),
            w2: store.add("classifier.w2", xavier_uniform(rng, 1, hidden_dim)),
            b2: store.add("classifier.b2", zeros_vec(1)),
        }
    }

    /// Classify the queue slots (newest first, length `k`) into a risk
    /// probability (0-d tape node).
    pub fn forward_t(&self, tape: &mut Tape, store: &ParamStore, slots: &[Var]) -> Result<Var> {
        if slots.len() != self.queue_size {
            return Err(Error::InvalidShape(format!(
                "classifier expects {} queue slots, got {}",
                self.queue_size,
                slots.len()
            )));
        }
        for s in slots {
            if tape.value(*s).len() != self.fused_dim {
                return Err(Error::InvalidShape(format!(
                    "queue slot has length {}, expected {}",
                    tape.value(*s).len(),
                    self.fused_dim
                )));
            }
        }
        let cat = tape.concat(slots);
        let w1 = tape.param(store, self.w1);
        let b1 = tape.param(store, self.b1);
        let h = tape.affine(w1, b1, cat);
        let h = tape.relu(h);
        let w2 = tape.param(store, self.w2);
        let b2 = tape.param(store, self.b2);
        let logit = tape.affine(w2, b2, h);
        let logit = tape.reshape(logit, &[]);
        Ok(tape.sigmoid(logit))
    }

    /// Push `fused` into the queue and classify the updated queue.
    pub fn push_and_classify(
        &self,
        store: &ParamStore,
        queue: &FeatureQueue<Array1<f64>>,
        fused: Array1<f64>,
        frame_index: usize,
    ) -> Result<(FeatureQueue<Array1<f64>>, RiskScore)> {
        if fused.len() != self.fused_dim {
            return Err(Error::InvalidShape(format!(
                "fused feature has length {}, expected {}",
                fused.len(),
                self.fused_dim
            )));
        }
        let mut next = queue.clone();
        next.push(fused);
        let zero = Array1::<f64>::zeros(self.fused_dim);
        let mut tape = Tape::new();
        let slots: Vec<Var> = next
            .slots(&zero)
            .into_iter()
            .map(|v| tape.constant(v.into_dyn()))
            .collect();
        let prob = self.forward_t(&mut tape, store, &slots)?;
        Ok((
            next,
            RiskScore {
                value: tape.scalar_value(prob),
                frame_index,
            },
        ))
    }
}
