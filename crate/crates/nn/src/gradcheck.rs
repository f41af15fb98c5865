//! Central finite-difference oracle, evaluated in f64.
//!
//! Test support: the analytic gradient comes from [`Graph::backward`], the
//! numerical one from re-running the forward pass with perturbed parameters.
//! Inputs that need checking are registered in the store like parameters.
//!
//! [`Graph::backward`]: crate::Graph::backward

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::graph::Var;
use crate::params::{Ctx, ParamId, ParamStore};
use crate::Result;

#[derive(Debug, Clone)]
pub struct CheckOptions {
    pub step: f64,
    /// Denominator floor of the relative error.
    pub floor: f64,
    /// Coordinates sampled per tensor; `None` checks all of them.
    pub per_tensor: Option<usize>,
    pub seed: u64,
}

impl Default for CheckOptions {
    fn default() -> Self {
        Self {
            step: 1e-5,
            floor: 1e-5,
            per_tensor: Some(16),
            seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Mismatch {
    pub param: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

#[derive(Debug, Clone)]
pub struct CheckReport {
    pub checked: usize,
    pub max_rel_error: f64,
    pub worst: Option<Mismatch>,
    /// Largest |numeric gradient| seen; guards against vacuous checks.
    pub max_abs_numeric: f64,
}

impl CheckReport {
    pub fn passes(&self, tol: f64) -> bool {
        self.checked > 0 && self.max_rel_error < tol
    }
}

pub fn rel_error(a: f64, n: f64, floor: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(floor)
}

/// Analytic gradient of `loss` for each parameter in `wrt`.
pub fn analytic<F>(store: &ParamStore<f64>, wrt: &[ParamId], loss: &F) -> Result<Vec<Vec<f64>>>
where
    F: Fn(&mut Ctx<f64>) -> Result<Var>,
{
    let mut cx = Ctx::train(store);
    let l = loss(&mut cx)?;
    cx.graph.backward(l)?;
    Ok(wrt
        .iter()
        .map(|&id| {
            cx.param_grad(id)
                .unwrap_or_else(|| vec![0.0; store.get(id).numel()])
        })
        .collect())
}

fn eval<F>(store: &ParamStore<f64>, loss: &F) -> Result<f64>
where
    F: Fn(&mut Ctx<f64>) -> Result<Var>,
{
    let mut cx = Ctx::infer(store);
    let l = loss(&mut cx)?;
    Ok(cx.graph.scalar(l))
}

/// Central difference of `loss` with respect to one coordinate.
pub fn numeric<F>(
    store: &mut ParamStore<f64>,
    id: ParamId,
    index: usize,
    step: f64,
    loss: &F,
) -> Result<f64>
where
    F: Fn(&mut Ctx<f64>) -> Result<Var>,
{
    let orig = store.get(id).data()[index];
    store.get_mut(id).data_mut()[index] = orig + step;
    let plus = eval(store, loss)?;
    store.get_mut(id).data_mut()[index] = orig - step;
    let minus = eval(store, loss)?;
    store.get_mut(id).data_mut()[index] = orig;
    Ok((plus - minus) / (2.0 * step))
}

/// Compares analytic and numerical gradients for every parameter in `wrt`.
pub fn check<F>(
    store: &ParamStore<f64>,
    wrt: &[ParamId],
    opts: &CheckOptions,
    loss: F,
) -> Result<CheckReport>
where
    F: Fn(&mut Ctx<f64>) -> Result<Var>,
{
    let grads = analytic(store, wrt, &loss)?;
    let mut work = store.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut report = CheckReport {
        checked: 0,
        max_rel_error: 0.0,
        worst: None,
        max_abs_numeric: 0.0,
    };
    for (&id, g) in wrt.iter().zip(&grads) {
        let n = g.len();
        let idxs: Vec<usize> = match opts.per_tensor {
            Some(k) if k < n => sample(&mut rng, n, k).into_vec(),
            _ => (0..n).collect(),
        };
        for i in idxs {
            let num = numeric(&mut work, id, i, opts.step, &loss)?;
            let err = rel_error(g[i], num, opts.floor);
            report.checked += 1;
            report.max_abs_numeric = report.max_abs_numeric.max(num.abs());
            if (err > report.max_rel_error || report.worst.is_none()) && err >= report.max_rel_error
            {
                report.max_rel_error = err;
                report.worst = Some(Mismatch {
                    param: store.name(id).to_string(),
                    index: i,
                    analytic: g[i],
                    numeric: num,
                });
            }
        }
    }
    Ok(report)
}

/// All parameter ids of a store.
pub fn all_ids<T: crate::Scalar>(store: &ParamStore<T>) -> Vec<ParamId> {
    store.ids().collect()
}
