//! Central finite-difference gradient checking.
//!
//! The numeric side never touches the tape's backward pass: it only re-runs
//! the caller's forward closure at perturbed parameter values, so it is an
//! independent oracle for the analytic gradients.

use crate::params::{GradBuffer, ParamId, ParamStore};

/// Worst relative error found by [`check_gradients`].
#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub checked_coords: usize,
    pub worst_param: Option<String>,
}

/// Compare `analytic` (one gradient per store parameter) against central
/// finite differences of `f`.
///
/// `f` must be a pure function of the store contents. Every coordinate is
/// checked when `max_coords_per_param` is `None`; otherwise an evenly strided
/// subset per parameter. The relative error for a coordinate is
/// `|a - n| / max(1, |a|, |n|)`.
pub fn check_gradients<F>(
    store: &mut ParamStore,
    analytic: &GradBuffer,
    mut f: F,
    max_coords_per_param: Option<usize>,
) -> GradCheckReport
where
    F: FnMut(&ParamStore) -> f64,
{
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        checked_coords: 0,
        worst_param: None,
    };
    let ids: Vec<ParamId> = store.ids().collect();
    for id in ids {
        let len = store.get(id).len();
        let stride = match max_coords_per_param {
            Some(cap) if len > cap => len.div_ceil(cap),
            _ => 1,
        };
        for flat in (0..len).step_by(stride) {
            let orig = store.get(id).as_slice().unwrap()[flat];
            let h = 1e-5 * orig.abs().max(1.0);

            store.value_mut(id).as_slice_mut().unwrap()[flat] = orig + h;
            let plus = f(store);
            store.value_mut(id).as_slice_mut().unwrap()[flat] = orig - h;
            let minus = f(store);
            store.value_mut(id).as_slice_mut().unwrap()[flat] = orig;

            let numeric = (plus - minus) / (2.0 * h);
            let a = analytic.get(id).as_slice().unwrap()[flat];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1.0);
            report.checked_coords += 1;
            if rel > report.max_rel_error {
                report.max_rel_error = rel;
                report.worst_param = Some(format!("{}[{}]", store.name(id), flat));
            }
        }
    }
    report
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Tape;
    use ndarray::array;

    #[test]
    fn quadratic_gradient_checks_out() {
        let mut store = ParamStore::new();
        let x = store.add("x", array![0.7, -1.3, 2.2].into_dyn());

        let forward = |s: &ParamStore| {
            let mut tape = Tape::new();
            let xv = tape.param(s, x);
            let sq = tape.mul(xv, xv);
            let out = tape.sum(sq);
            tape.scalar_value(out)
        };

        let mut tape = Tape::new();
        let xv = tape.param(&store, x);
        let sq = tape.mul(xv, xv);
        let out = tape.sum(sq);
        let grads = tape.backward(out);
        let mut buf = GradBuffer::zeros_like(&store);
        tape.accumulate_param_grads(&grads, &mut buf);

        let report = check_gradients(&mut store, &buf, forward, None);
        assert!(report.max_rel_error < 1e-8, "{report:?}");
    }
}
