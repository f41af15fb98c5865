//! Diagonal Gaussian policy with a state-independent log standard deviation.

use strider_nn::{Ctx, Scalar, Var};

use crate::Result;

pub const LN_2PI: f64 = 1.837_877_066_409_345_5;

/// `log N(a; mean, diag(exp(log_std))^2)`.
pub fn log_prob(a: &[f64], mean: &[f64], log_std: &[f64]) -> f64 {
    a.iter()
        .zip(mean)
        .zip(log_std)
        .map(|((a, m), s)| {
            let z = (a - m) * (-s).exp();
            -0.5 * z * z - s - 0.5 * LN_2PI
        })
        .sum()
}

/// `sum(log_std + 0.5 ln(2 pi e))`.
pub fn entropy(log_std: &[f64]) -> f64 {
    log_std.iter().map(|s| s + 0.5 * (LN_2PI + 1.0)).sum()
}

/// Row log-probabilities `[n, 1]` of `actions [n, k]` under `mean [n, k]`
/// and `log_std [k]`.
pub fn log_prob_graph<T: Scalar>(
    cx: &mut Ctx<T>,
    actions: Var,
    mean: Var,
    log_std: Var,
) -> Result<Var> {
    let shape = cx.graph.shape(mean).to_vec();
    let k = shape[shape.len() - 1];
    let n = cx.graph.value(mean).len() / k.max(1);
    let neg = cx.graph.scale(log_std, -1.0);
    let inv_std = cx.graph.exp(neg);
    let d = cx.graph.sub(actions, mean)?;
    let z = cx.graph.mul_row(d, inv_std)?;
    let z2 = cx.graph.square(z);
    let z2 = cx.graph.scale(z2, -0.5);
    let ones = cx.graph.input(vec![T::one(); n * k], &[n, k])?;
    let s = cx.graph.mul_row(ones, log_std)?;
    let per = cx.graph.sub(z2, s)?;
    let rows = cx.graph.sum_cols(per);
    Ok(cx.graph.add_const(rows, -0.5 * LN_2PI * k as f64))
}

/// Entropy of the policy as a scalar node.
pub fn entropy_graph<T: Scalar>(cx: &mut Ctx<T>, log_std: Var) -> Var {
    let k = cx.graph.value(log_std).len();
    let s = cx.graph.sum(log_std);
    cx.graph.add_const(s, 0.5 * (LN_2PI + 1.0) * k as f64)
}

/// Negated mean of `min(r A, clip(r, 1 - eps, 1 + eps) A)`.
pub fn clipped_surrogate<T: Scalar>(
    cx: &mut Ctx<T>,
    ratio: Var,
    advantages: Var,
    clip: f64,
) -> Result<Var> {
    let unclipped = cx.graph.mul(ratio, advantages)?;
    let r = cx.graph.clamp(ratio, 1.0 - clip, 1.0 + clip);
    let clipped = cx.graph.mul(r, advantages)?;
    let m = cx.graph.minimum(unclipped, clipped)?;
    let mean = cx.graph.mean(m);
    Ok(cx.graph.scale(mean, -1.0))
}
