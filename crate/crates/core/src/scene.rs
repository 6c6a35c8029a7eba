//! Recurrent scene-level encoding: global pooling of the backbone map into a
//! GRU that carries scene dynamics across frames.

use ndarray::Array1;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Tape, Var};
use crate::detector::FeatureMap;
use crate::error::{Error, Result};
use crate::params::{xavier_uniform, zeros_vec, ParamId, ParamStore};

/// Hidden scene state for one video stream.
#[derive(Debug, Clone)]
pub struct SceneState {
    pub hidden: Array1<f64>,
    /// Number of updates applied; 0 for a fresh stream.
    pub frame_index: usize,
}

impl SceneState {
    /// Zero-initialized state, as used at the start of every video.
    pub fn initial(hidden_dim: usize) -> Self {
        Self {
            hidden: Array1::zeros(hidden_dim),
            frame_index: 0,
        }
    }
}

/// Global average pool over the spatial dimensions; one value per channel.
pub fn pool_backbone(map: &FeatureMap) -> Array1<f64> {
    let (c, h, w) = map.values.dim();
    let mut out = Array1::<f64>::zeros(c);
    for ci in 0..c {
        out[ci] = map.values.index_axis(ndarray::Axis(0), ci).sum() / (h * w) as f64;
    }
    out
}

/// Single-layer GRU cell parameters.
pub struct GruParams {
    pub input_dim: usize,
    pub hidden_dim: usize,
    wz: ParamId,
    uz: ParamId,
    bz: ParamId,
    wr: ParamId,
    ur: ParamId,
    br: ParamId,
    wh: ParamId,
    uh: ParamId,
    bh: ParamId,
}

impl GruParams {
    pub fn init(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        input_dim: usize,
        hidden_dim: usize,
    ) -> Self {
        Self {
            input_dim,
            hidden_dim,
            wz: store.add("gru.wz", xavier_uniform(rng, hidden_dim, input_dim)),
            uz: store.add("gru.uz", xavier_uniform(rng, hidden_dim, hidden_dim)),
            bz: store.add("gru.bz", zeros_vec(hidden_dim)),
            wr: store.add("gru.wr", xavier_uniform(rng, hidden_dim, input_dim)),
            ur: store.add("gru.ur", xavier_uniform(rng, hidden_dim, hidden_dim)),
            br: store.add("gru.br", zeros_vec(hidden_dim)),
            wh: store.add("gru.wh", xavier_uniform(rng, hidden_dim, input_dim)),
            uh: store.add("gru.uh", xavier_uniform(rng, hidden_dim, hidden_dim)),
            bh: store.add("gru.bh", zeros_vec(hidden_dim)),
        }
    }

    /// One GRU update on the tape:
    /// `z = σ(Wz x + Uz h + bz)`, `r = σ(Wr x + Ur h + br)`,
    /// `h̃ = tanh(Wh x + Uh (r ⊙ h) + bh)`, `h' = (1 − z) ⊙ h + z ⊙ h̃`.
    pub fn step_t(&self, tape: &mut Tape, store: &ParamStore, x: Var, h: Var) -> Result<Var> {
        if tape.value(x).len() != self.input_dim {
            return Err(Error::InvalidShape(format!(
                "gru input has length {}, expected {}",
                tape.value(x).len(),
                self.input_dim
            )));
        }
        if tape.value(h).len() != self.hidden_dim {
            return Err(Error::InvalidShape(format!(
                "gru hidden has length {}, expected {}",
                tape.value(h).len(),
                self.hidden_dim
            )));
        }
        let gate = |tape: &mut Tape, w, u, b, x, h| {
            let wx = tape.matvec(w, x);
            let uh = tape.matvec(u, h);
            let s = tape.add(wx, uh);
            let b = tape.add(s, b);
            b
        };
        let wz = tape.param(store, self.wz);
        let uz = tape.param(store, self.uz);
        let bz = tape.param(store, self.bz);
        let pre_z = gate(tape, wz, uz, bz, x, h);
        let z = tape.sigmoid(pre_z);

        let wr = tape.param(store, self.wr);
        let ur = tape.param(store, self.ur);
        let br = tape.param(store, self.br);
        let pre_r = gate(tape, wr, ur, br, x, h);
        let r = tape.sigmoid(pre_r);

        let wh = tape.param(store, self.wh);
        let uh = tape.param(store, self.uh);
        let bh = tape.param(store, self.bh);
        let rh = tape.mul(r, h);
        let wx = tape.matvec(wh, x);
        let urh = tape.matvec(uh, rh);
        let s = tape.add(wx, urh);
        let pre_c = tape.add(s, bh);
        let cand = tape.tanh(pre_c);

        let keep = tape.one_minus(z);
        let kept = tape.mul(keep, h);
        let new = tape.mul(z, cand);
        Ok(tape.add(kept, new))
    }

    /// Value-level update of a [`SceneState`].
    pub fn scene_step(
        &self,
        store: &ParamStore,
        state: &SceneState,
        pooled: &Array1<f64>,
    ) -> Result<SceneState> {
        let mut tape = Tape::new();
        let x = tape.constant(pooled.clone().into_dyn());
        let h = tape.constant(state.hidden.clone().into_dyn());
        let out = self.step_t(&mut tape, store, x, h)?;
        Ok(SceneState {
            hidden: tape
                .value(out)
                .clone()
                .into_dimensionality::<ndarray::Ix1>()
                .unwrap(),
            frame_index: state.frame_index + 1,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::GradBuffer;
    use ndarray::{array, Array3};
    use rand::{Rng, SeedableRng};

    #[test]
    fn pool_backbone_is_plain_mean() {
        let map = FeatureMap {
            stride: 8,
            values: Array3::from_shape_vec((1, 2, 2), vec![1.0, 2.0, 3.0, 4.0]).unwrap(),
        };
        assert_eq!(pool_backbone(&map), array![2.5]);

        let constant = FeatureMap {
            stride: 8,
            values: Array3::from_elem((3, 4, 5), -0.75),
        };
        assert_eq!(pool_backbone(&constant), array![-0.75, -0.75, -0.75]);

        let zeros = FeatureMap {
            stride: 8,
            values: Array3::zeros((1, 4, 4)),
        };
        assert_eq!(pool_backbone(&zeros), array![0.0]);
    }

    fn zeroed_gru(input_dim: usize, hidden_dim: usize) -> (ParamStore, GruParams) {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let gru = GruParams::init(&mut store, &mut rng, input_dim, hidden_dim);
        for id in store.ids().collect::<Vec<_>>() {
            store.value_mut(id).fill(0.0);
        }
        (store, gru)
    }

    #[test]
    fn zero_params_halve_the_hidden_state() {
        // z = σ(0) = 0.5 and h̃ = 0, so h' = 0.5 h.
        let (store, gru) = zeroed_gru(3, 4);
        let state = SceneState {
            hidden: array![1.0, -2.0, 0.5, 4.0],
            frame_index: 7,
        };
        let next = gru
            .scene_step(&store, &state, &array![0.0, 0.0, 0.0])
            .unwrap();
        assert_eq!(next.hidden, array![0.5, -1.0, 0.25, 2.0]);
        assert_eq!(next.frame_index, 8);
    }

    #[test]
    fn initial_state_is_zero() {
        let s = SceneState::initial(5);
        assert_eq!(s.frame_index, 0);
        assert!(s.hidden.iter().all(|v| *v == 0.0));
        assert_eq!(s.hidden.len(), 5);
    }

    #[test]
    fn dimension_mismatch_rejected() {
        let (store, gru) = zeroed_gru(3, 4);
        let state = SceneState::initial(4);
        let err = gru.scene_step(&store, &state, &array![1.0, 2.0]).unwrap_err();
        assert_eq!(err.kind(), "invalid-shape");
    }

    #[test]
    fn hidden_stays_in_unit_interval_from_zero_init() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let gru = GruParams::init(&mut store, &mut rng, 4, 6);
        let mut state = SceneState::initial(6);
        for t in 0..50 {
            let x = Array1::from_shape_fn(4, |i| ((t * 7 + i) as f64 * 0.37).sin() * 3.0);
            state = gru.scene_step(&store, &state, &x).unwrap();
            assert!(state.hidden.iter().all(|v| v.abs() < 1.0), "escaped at t={t}");
        }
        assert_eq!(state.frame_index, 50);
    }

    #[test]
    fn repeated_sequences_are_identical() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let gru = GruParams::init(&mut store, &mut rng, 3, 5);
        let inputs: Vec<Array1<f64>> = (0..10)
            .map(|t| Array1::from_shape_fn(3, |i| ((t + i) as f64).cos()))
            .collect();
        let run = |inputs: &[Array1<f64>]| {
            let mut s = SceneState::initial(5);
            let mut trace = Vec::new();
            for x in inputs {
                s = gru.scene_step(&store, &s, x).unwrap();
                trace.push(s.hidden.clone());
            }
            trace
        };
        assert_eq!(run(&inputs), run(&inputs));
    }

    #[test]
    fn gru_gradients_match_finite_differences() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let gru = GruParams::init(&mut store, &mut rng, 3, 4);
        let x_id = store.add(
            "x",
            ndarray::ArrayD::from_shape_fn(ndarray::IxDyn(&[3]), |_| rng.random_range(-1.0..1.0)),
        );
        let h_id = store.add(
            "h",
            ndarray::ArrayD::from_shape_fn(ndarray::IxDyn(&[4]), |_| rng.random_range(-0.9..0.9)),
        );

        let forward = |s: &ParamStore| {
            let mut tape = Tape::new();
            let x = tape.param(s, x_id);
            let h = tape.param(s, h_id);
            let out = gru.step_t(&mut tape, s, x, h).unwrap();
            let sum = tape.sum(out);
            tape.scalar_value(sum)
        };

        let mut tape = Tape::new();
        let x = tape.param(&store, x_id);
        let h = tape.param(&store, h_id);
        let out = gru.step_t(&mut tape, &store, x, h).unwrap();
        let sum = tape.sum(out);
        let grads = tape.backward(sum);
        let mut buf = GradBuffer::zeros_like(&store);
        tape.accumulate_param_grads(&grads, &mut buf);

        let report = crate::gradcheck::check_gradients(&mut store, &buf, forward, None);
        assert!(report.max_rel_error < 1e-4, "{report:?}");
    }
}
