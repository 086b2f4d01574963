//! Central finite-difference verification of graph gradients.

use rand::seq::index::sample;
use rand::Rng;

use crate::error::Result;
use crate::graph::{Graph, Var};
use crate::params::{ParamId, ParamStore};
use crate::tensor::Tensor;

/// Default step for central differences in 64-bit arithmetic.
pub const FD_STEP: f64 = 1e-5;

/// Magnitudes below this are compared absolutely rather than relatively.
/// Round-off in a central difference of an O(10) loss at `FD_STEP` is about
/// 1e-10, so exactly-zero gradients need a floor well above that.
pub const REL_FLOOR: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq)]
pub struct GradReport {
    pub max_rel_err: f64,
    /// (input index, flat element index) of the worst entry.
    pub worst: (usize, usize),
    pub analytic: f64,
    pub numeric: f64,
    pub checked: usize,
}

pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(REL_FLOOR)
}

/// Compares reverse-mode gradients of the scalar built by `f` against central
/// differences with step `h`, perturbing every element of every input.
pub fn check_gradients<F>(inputs: &[Tensor], h: f64, f: F) -> Result<GradReport>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let eval = |vals: &[Tensor]| -> Result<f64> {
        let mut g = Graph::new();
        let vars: Vec<Var> = vals.iter().map(|t| g.leaf(t.clone(), false)).collect();
        let out = f(&mut g, &vars)?;
        Ok(g.scalar_value(out))
    };

    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone(), true)).collect();
    let root = f(&mut g, &vars)?;
    let grads = g.backward(root)?;

    let mut report = GradReport {
        max_rel_err: 0.0,
        worst: (0, 0),
        analytic: 0.0,
        numeric: 0.0,
        checked: 0,
    };
    let mut work: Vec<Tensor> = inputs.to_vec();
    for (i, v) in vars.iter().enumerate() {
        let analytic = grads.get_or_zero(&g, *v);
        for e in 0..inputs[i].len() {
            let orig = inputs[i].data()[e];
            work[i].data_mut()[e] = orig + h;
            let plus = eval(&work)?;
            work[i].data_mut()[e] = orig - h;
            let minus = eval(&work)?;
            work[i].data_mut()[e] = orig;
            let numeric = (plus - minus) / (2.0 * h);
            let a = analytic.data()[e];
            let err = rel_err(a, numeric);
            report.checked += 1;
            if err > report.max_rel_err || report.checked == 1 {
                report.max_rel_err = err;
                report.worst = (i, e);
                report.analytic = a;
                report.numeric = numeric;
            }
        }
    }
    Ok(report)
}

/// Like [`check_gradients`] but over stored parameters: the scalar built by
/// `f` on a store-bound graph is differentiated with respect to `ids`, and up
/// to `per_param` randomly chosen elements of each are perturbed in place.
/// Every parameter's trainable flag and gradient buffer are left as found.
pub fn check_param_gradients<F, R>(
    store: &mut ParamStore,
    ids: &[ParamId],
    per_param: usize,
    h: f64,
    rng: &mut R,
    f: F,
) -> Result<GradReport>
where
    F: Fn(&mut Graph) -> Result<Var>,
    R: Rng + ?Sized,
{
    let eval = |store: &ParamStore| -> Result<f64> {
        let mut g = Graph::with_params(store);
        let out = f(&mut g)?;
        Ok(g.scalar_value(out))
    };
    let saved: Vec<(bool, Tensor)> = store.iter().map(|(_, p)| (p.trainable, p.grad.clone())).collect();
    store.set_trainable("", false);
    for &id in ids {
        store.get_mut(id).trainable = true;
    }
    store.zero_grad();
    let grads = {
        let mut g = Graph::with_params(store);
        let root = f(&mut g)?;
        g.backward(root)?
    };
    store.accumulate(&grads);
    let analytic: Vec<Tensor> = ids.iter().map(|&id| store.get(id).grad.clone()).collect();

    let mut report = GradReport {
        max_rel_err: 0.0,
        worst: (0, 0),
        analytic: 0.0,
        numeric: 0.0,
        checked: 0,
    };
    let mut outcome = Ok(());
    'outer: for (i, &id) in ids.iter().enumerate() {
        let len = store.get(id).value.len();
        let elems: Vec<usize> = if per_param >= len {
            (0..len).collect()
        } else {
            sample(rng, len, per_param).into_vec()
        };
        for e in elems {
            let orig = store.get(id).value.data()[e];
            store.get_mut(id).value.data_mut()[e] = orig + h;
            let plus = eval(store);
            store.get_mut(id).value.data_mut()[e] = orig - h;
            let minus = eval(store);
            store.get_mut(id).value.data_mut()[e] = orig;
            let (plus, minus) = match (plus, minus) {
                (Ok(p), Ok(m)) => (p, m),
                (Err(err), _) | (_, Err(err)) => {
                    outcome = Err(err);
                    break 'outer;
                }
            };
            let numeric = (plus - minus) / (2.0 * h);
            let a = analytic[i].data()[e];
            let err = rel_err(a, numeric);
            report.checked += 1;
            if err > report.max_rel_err || report.checked == 1 {
                report.max_rel_err = err;
                report.worst = (i, e);
                report.analytic = a;
                report.numeric = numeric;
            }
        }
    }
    let all: Vec<ParamId> = store.iter().map(|(id, _)| id).collect();
    for (id, (trainable, grad)) in all.into_iter().zip(saved) {
        let p = store.get_mut(id);
        p.trainable = trainable;
        p.grad = grad;
    }
    outcome.map(|_| report)
}
