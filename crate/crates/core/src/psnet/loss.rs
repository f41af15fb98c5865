use serde::{Deserialize, Serialize};
use strider_nn::{Ctx, Scalar, Var};

use super::PsNet;
use crate::{Error, Result};

/// `0.5 * sum(mu^2 + exp(lv) - 1 - lv)` per row, averaged over rows.
pub fn kl_standard_normal<T: Scalar>(cx: &mut Ctx<T>, mean: Var, log_var: Var) -> Result<Var> {
    let rows = cx.graph.shape(mean)[0].max(1);
    let m2 = cx.graph.square(mean);
    let var = cx.graph.exp(log_var);
    let a = cx.graph.add(m2, var)?;
    let a = cx.graph.sub(a, log_var)?;
    let a = cx.graph.add_const(a, -1.0);
    let s = cx.graph.sum(a);
    Ok(cx.graph.scale(s, 0.5 / rows as f64))
}

/// Mean squared error over all elements.
pub fn mse<T: Scalar>(cx: &mut Ctx<T>, pred: Var, target: Var) -> Result<Var> {
    let d = cx.graph.sub(pred, target)?;
    let d = cx.graph.square(d);
    Ok(cx.graph.mean(d))
}

#[derive(Debug, Clone, Copy)]
pub struct ReconTerms {
    pub kl: Var,
    pub obs: Var,
    pub velocity: Var,
    /// Absent when the front-depth term is ablated.
    pub depth: Option<Var>,
    pub total: Var,
}

/// Reconstruction loss; targets are `[n, 45]`, `[n, 3]` and `[n, 256]`.
#[allow(clippy::too_many_arguments)]
pub fn reconstruction_loss<T: Scalar>(
    cx: &mut Ctx<T>,
    mean: Var,
    log_var: Var,
    obs_pred: Var,
    obs_target: Var,
    vel_pred: Var,
    vel_target: Var,
    depth: Option<(Var, Var)>,
) -> Result<ReconTerms> {
    let kl = kl_standard_normal(cx, mean, log_var)?;
    let obs = mse(cx, obs_pred, obs_target)?;
    let velocity = mse(cx, vel_pred, vel_target)?;
    let mut total = cx.graph.add(kl, obs)?;
    total = cx.graph.add(total, velocity)?;
    let depth = match depth {
        Some((p, t)) => {
            let d = mse(cx, p, t)?;
            total = cx.graph.add(total, d)?;
            Some(d)
        }
        None => None,
    };
    Ok(ReconTerms {
        kl,
        obs,
        velocity,
        depth,
        total,
    })
}

fn mean_cosine<T: Scalar>(cx: &mut Ctx<T>, a: Var, b: Var) -> Result<Var> {
    let a = cx.graph.l2_normalize(a)?;
    let b = cx.graph.l2_normalize(b)?;
    let p = cx.graph.mul(a, b)?;
    let c = cx.graph.sum_cols(p);
    Ok(cx.graph.mean(c))
}

/// Symmetric negative cosine with stop-gradient targets:
/// `-cos(P(z_c), sg(zhat_c)) - cos(P(zhat_c), sg(z_c))`, averaged over rows.
pub fn contrastive_loss<T: Scalar>(
    cx: &mut Ctx<T>,
    net: &PsNet,
    zhat_c: Var,
    z_c: Var,
) -> Result<Var> {
    contrastive_split(cx, &|cx, z| net.predict(cx, z), zhat_c, zhat_c, z_c, z_c)
}

/// Predictor shared by both branches.
pub type Predictor<'a, T> = dyn Fn(&mut Ctx<T>, Var) -> Result<Var> + 'a;

/// As [`contrastive_loss`], with the predictor inputs and the stop-gradient
/// targets given separately.
pub fn contrastive_split<T: Scalar>(
    cx: &mut Ctx<T>,
    predict: &Predictor<T>,
    zhat_live: Var,
    zhat_target: Var,
    z_live: Var,
    z_target: Var,
) -> Result<Var> {
    for v in [zhat_live, zhat_target, z_live, z_target] {
        let w = *cx.graph.shape(v).last().unwrap_or(&0);
        if cx
            .graph
            .value(v)
            .chunks(w.max(1))
            .any(|r| r.iter().all(|x| *x == T::zero()))
        {
            return Err(Error::Invalid(
                "contrastive input has a zero-norm row".into(),
            ));
        }
    }
    let p = predict(cx, z_live)?;
    let p_hat = predict(cx, zhat_live)?;
    let t_hat = cx.graph.stop_gradient(zhat_target);
    let t = cx.graph.stop_gradient(z_target);
    let a = mean_cosine(cx, p, t_hat)?;
    let b = mean_cosine(cx, p_hat, t)?;
    let s = cx.graph.add(a, b)?;
    Ok(cx.graph.scale(s, -1.0))
}

/// Unweighted sum of whichever terms are present.
pub fn mixed_loss<T: Scalar>(
    cx: &mut Ctx<T>,
    recon: Option<Var>,
    contrast: Option<Var>,
) -> Result<Option<Var>> {
    Ok(match (recon, contrast) {
        (Some(r), Some(c)) => Some(cx.graph.add(r, c)?),
        (r, c) => r.or(c),
    })
}

/// Mean over channels of the per-channel standard deviation of the
/// l2-normalised rows of `batch` (`n` rows of width `d`).
pub fn collapse_metric(batch: &[f32], d: usize) -> Result<f64> {
    if d == 0 || !batch.len().is_multiple_of(d) {
        return Err(Error::Invalid(format!(
            "batch of {} values is not a multiple of {d}",
            batch.len()
        )));
    }
    let n = batch.len() / d;
    if n < 2 {
        return Err(Error::Invalid(
            "collapse metric needs at least two vectors".into(),
        ));
    }
    let mut sum = vec![0.0f64; d];
    let mut sq = vec![0.0f64; d];
    for row in batch.chunks(d) {
        let norm = row.iter().map(|v| (*v as f64).powi(2)).sum::<f64>().sqrt();
        if norm == 0.0 || !norm.is_finite() {
            return Err(Error::Invalid("cannot normalise a zero-norm code".into()));
        }
        for (c, v) in row.iter().enumerate() {
            let x = *v as f64 / norm;
            sum[c] += x;
            sq[c] += x * x;
        }
    }
    let nf = n as f64;
    let std: f64 = (0..d)
        .map(|c| (sq[c] / nf - (sum[c] / nf).powi(2)).max(0.0).sqrt())
        .sum();
    Ok(std / d as f64)
}

/// Scalar loss terms of one evaluation, for logging.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub surrogate: f64,
    pub value: f64,
    pub entropy: f64,
    pub kl: f64,
    pub obs: f64,
    pub velocity: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub depth: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub contrastive: Option<f64>,
    pub reconstruction: f64,
    pub mixed: f64,
    pub total: f64,
}
