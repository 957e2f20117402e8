//! Central finite-difference checks of taped parameter gradients.

use crate::autodiff::params::ParamStore;
use crate::autodiff::tape::{Tape, Var};

/// Denominator floor for relative errors, so that gradients which are zero
/// up to rounding compare as equal.
pub const REL_FLOOR: f64 = 1e-8;

#[derive(Clone, Debug)]
pub struct GradCheck {
    pub analytic: Vec<f64>,
    pub numeric: Vec<f64>,
    pub indices: Vec<usize>,
    pub max_rel: f64,
    pub worst: Option<usize>,
}

pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(REL_FLOOR)
}

/// Compares reverse-mode gradients of `loss` against central differences
/// over every parameter.
pub fn check_param_grads(store: &ParamStore, eps: f64, loss: impl Fn(&Tape, &ParamStore) -> Var) -> GradCheck {
    let all: Vec<usize> = (0..store.len()).collect();
    check_param_grads_at(store, &all, eps, loss)
}

/// As [`check_param_grads`], restricted to flat parameter `indices`.
pub fn check_param_grads_at(
    store: &ParamStore,
    indices: &[usize],
    eps: f64,
    loss: impl Fn(&Tape, &ParamStore) -> Var,
) -> GradCheck {
    let tape = Tape::new();
    let l = loss(&tape, store);
    let grads = tape.backward(l).expect("loss must be a scalar on its tape").param_grads(store);
    let eval = |s: &ParamStore| {
        let t = Tape::new();
        let v = loss(&t, s);
        t.item(v)
    };
    let mut work = store.clone();
    let mut analytic = Vec::with_capacity(indices.len());
    let mut numeric = Vec::with_capacity(indices.len());
    let (mut max_rel, mut worst) = (0.0, None);
    for &i in indices {
        let orig = work.values()[i];
        work.values_mut()[i] = orig + eps;
        let up = eval(&work);
        work.values_mut()[i] = orig - eps;
        let down = eval(&work);
        work.values_mut()[i] = orig;
        let fd = (up - down) / (2.0 * eps);
        let r = rel_err(grads[i], fd);
        if r > max_rel || r.is_nan() {
            max_rel = r;
            worst = Some(i);
        }
        analytic.push(grads[i]);
        numeric.push(fd);
    }
    GradCheck {
        analytic,
        numeric,
        indices: indices.to_vec(),
        max_rel,
        worst,
    }
}
