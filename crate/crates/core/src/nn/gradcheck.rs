//! Central finite-difference checks of tape gradients.

use super::graph::{Graph, Var};
use super::params::{ParamId, ParamStore};
use super::tensor::Tensor;

pub const FD_STEP: f64 = 1e-5;

/// Relative error `|a - n| / (|a| + |n|)` over the probed coordinates as
/// vectors, so single near-zero coordinates do not dominate. The
/// denominator is floored at `ABS_FLOOR`: gradients that vanish
/// identically (a key bias under softmax shift invariance, say) are then
/// judged by their absolute finite-difference noise.
pub fn relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let diff: f64 = analytic.iter().zip(numeric).map(|(a, n)| (a - n) * (a - n)).sum::<f64>().sqrt();
    let scale: f64 = analytic.iter().map(|a| a * a).sum::<f64>().sqrt() + numeric.iter().map(|n| n * n).sum::<f64>().sqrt();
    diff / scale.max(ABS_FLOOR)
}

pub const ABS_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone)]
pub struct ParamCheck {
    pub name: String,
    pub rel_error: f64,
    pub coords: usize,
    /// Coordinates passed over because the stencil crossed a kink.
    pub skipped: usize,
}

/// Central difference of `eval` along one coordinate, or `None` when either
/// side of the stencil lands on a different smooth piece than `base`.
fn central(base: &[bool], eval: &mut dyn FnMut(f64) -> (f64, Vec<bool>)) -> Option<f64> {
    let (plus, pp) = eval(FD_STEP);
    let (minus, pm) = eval(-FD_STEP);
    (pp == base && pm == base).then(|| (plus - minus) / (2.0 * FD_STEP))
}

/// Checks the gradient of the scalar built by `build` w.r.t. each parameter
/// in `store`, probing at most `max_coords` coordinates per tensor (spread
/// evenly across it). A probe whose stencil straddles a kink of a
/// piecewise-linear op moves to the next coordinate.
pub fn check_params(
    store: &mut ParamStore,
    max_coords: usize,
    build: &dyn Fn(&mut Graph, &ParamStore) -> Var,
) -> Vec<ParamCheck> {
    let mut g = Graph::new();
    let out = build(&mut g, store);
    let grads = g.backward(out);
    let analytic: Vec<(ParamId, Tensor)> = g.param_grads(&grads);
    let base = g.branch_pattern();
    drop(g);
    let eval = |store: &ParamStore| {
        let mut g = Graph::new();
        let out = build(&mut g, store);
        (g.value(out).item(), g.branch_pattern())
    };
    let mut report = Vec::new();
    for id in store.ids().collect::<Vec<_>>() {
        let n = store.get(id).len();
        let zero = Tensor::zeros(store.get(id).rows(), store.get(id).cols());
        let grad = analytic.iter().find(|(i, _)| *i == id).map(|(_, t)| t).unwrap_or(&zero).clone();
        let stride = n.div_ceil(max_coords).max(1);
        let mut a = Vec::new();
        let mut num = Vec::new();
        let mut skipped = 0;
        for start in (0..n).step_by(stride) {
            for j in start..(start + stride).min(n) {
                let orig = store.get(id).data()[j];
                let d = central(&base, &mut |h| {
                    store.get_mut(id).data_mut()[j] = orig + h;
                    let r = eval(store);
                    store.get_mut(id).data_mut()[j] = orig;
                    r
                });
                match d {
                    Some(d) => {
                        num.push(d);
                        a.push(grad.data()[j]);
                        break;
                    }
                    None => skipped += 1,
                }
            }
        }
        report.push(ParamCheck { name: store.name(id).to_string(), rel_error: relative_error(&a, &num), coords: a.len(), skipped });
    }
    report
}

/// Checks gradients w.r.t. explicit input tensors of a function. Every
/// coordinate is probed except those whose stencil straddles a kink.
pub fn check_inputs(inputs: &[Tensor], build: &dyn Fn(&mut Graph, &[Var]) -> Var) -> Vec<f64> {
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone())).collect();
    let out = build(&mut g, &vars);
    let grads = g.backward(out);
    let analytic: Vec<Tensor> = vars
        .iter()
        .map(|&v| grads.wrt(v).cloned().unwrap_or_else(|| Tensor::zeros(g.shape(v).0, g.shape(v).1)))
        .collect();
    let base = g.branch_pattern();
    let eval = |inputs: &[Tensor]| {
        let mut g = Graph::new();
        let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone())).collect();
        let out = build(&mut g, &vars);
        (g.value(out).item(), g.branch_pattern())
    };
    let mut work: Vec<Tensor> = inputs.to_vec();
    let mut errs = Vec::new();
    for (i, a) in analytic.iter().enumerate() {
        let mut an = Vec::with_capacity(a.len());
        let mut num = Vec::with_capacity(a.len());
        for j in 0..a.len() {
            let orig = work[i].data()[j];
            let d = central(&base, &mut |h| {
                work[i].data_mut()[j] = orig + h;
                let r = eval(&work);
                work[i].data_mut()[j] = orig;
                r
            });
            if let Some(d) = d {
                num.push(d);
                an.push(a.data()[j]);
            }
        }
        errs.push(relative_error(&an, &num));
    }
    errs
}
