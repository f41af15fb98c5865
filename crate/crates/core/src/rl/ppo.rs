use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use strider_nn::blocks::gaussian_noise;
use strider_nn::optim::{clip_grad_norm, Adam};
use strider_nn::{Ctx, Grads, ParamStore, Scalar, Var};

use super::buffer::{Minibatch, RolloutBuffer, VELOCITY_DIM};
use super::policy::{clipped_surrogate, entropy_graph, log_prob_graph};
use crate::config::PpoConfig;
use crate::psnet::{
    collapse_metric, contrastive_loss, mixed_loss, mse, reconstruction_loss, LossBreakdown, PsNet,
    ACTION_DIM, DEPTH_DIM,
};
use crate::sim::observe::{FRONT_FACE_DIM, HISTORY_DIM, PRIVILEGED_DIM, PROPRIO_DIM, VISION_DIM};
use crate::{Error, Result};

/// Graph of the combined objective for one minibatch.
#[derive(Debug, Clone)]
pub struct CombinedLoss {
    pub total: Var,
    pub breakdown: LossBreakdown,
    /// Contrastive code of the standard encoder, `[rows, d]`.
    pub zhat_c: Vec<f32>,
}

fn scalar<T: Scalar>(cx: &Ctx<T>, v: Var) -> f64 {
    cx.graph.scalar(v).as_f64()
}

/// Clipped surrogate + value MSE + entropy bonus + the variant's PS-Net
/// loss, all in one graph. `eps_seed` draws the VAE noise.
pub fn combined_loss<T: Scalar>(
    cx: &mut Ctx<T>,
    net: &PsNet,
    mb: &Minibatch,
    ppo: &PpoConfig,
    eps_seed: u64,
) -> Result<CombinedLoss> {
    let n = mb.rows();
    let g = &mut cx.graph;
    let hist = g.input_f32(&mb.history, &[n, HISTORY_DIM])?;
    let depth = g.input_f32(&mb.depth, &[n, DEPTH_DIM])?;
    let state = g.input_f32(&mb.state, &[n, PRIVILEGED_DIM])?;
    let vision = g.input_f32(&mb.vision, &[n, VISION_DIM])?;
    let actions = g.input_f32(&mb.actions, &[n, ACTION_DIM])?;
    let old_lp = g.input_f32(&mb.old_log_probs, &[n, 1])?;
    let adv = g.input_f32(&mb.advantages, &[n, 1])?;
    let returns = g.input_f32(&mb.returns, &[n, 1])?;
    let mut h = g.input_f32(&mb.h0, &[mb.envs, net.gru_dim()])?;

    let features = net.standard_features(cx, hist, depth)?;
    let mut outs = Vec::with_capacity(mb.steps);
    for t in 0..mb.steps {
        let starts = &mb.starts[t * mb.envs..(t + 1) * mb.envs];
        if starts.iter().any(|&s| s) {
            let keep: Vec<f32> = starts.iter().map(|&s| if s { 0.0 } else { 1.0 }).collect();
            let mask = cx.graph.input_f32(&keep, &[mb.envs, 1])?;
            h = cx.graph.mul_col(h, mask)?;
        }
        let f = cx.graph.slice_rows(features, t * mb.envs, mb.envs)?;
        h = net.gru_step(cx, h, f)?;
        outs.push(h);
    }
    let hs = cx.graph.concat_rows(&outs)?;
    let eps = gaussian_noise(eps_seed, n * net.cfg.state_dim);
    let eps = cx.graph.input_f32(&eps, &[n, net.cfg.state_dim])?;
    let latent = net.latent(cx, hs, eps)?;
    let mean = net.policy_mean(cx, hist, &latent)?;
    let log_std = cx.p(net.log_std);

    let lp = log_prob_graph(cx, actions, mean, log_std)?;
    let d = cx.graph.sub(lp, old_lp)?;
    let ratio = cx.graph.exp(d);
    let surrogate = clipped_surrogate(cx, ratio, adv, ppo.clip)?;
    let value = net.value(cx, state, vision)?;
    let value_loss = mse(cx, value, returns)?;
    let entropy = entropy_graph(cx, log_std);

    let mut breakdown = LossBreakdown {
        surrogate: scalar(cx, surrogate),
        value: scalar(cx, value_loss),
        entropy: scalar(cx, entropy),
        ..Default::default()
    };

    let recon = if net.variant.uses_reconstruction() {
        let obs_pred = net.decode_obs(cx, &latent)?;
        let obs_t = cx.graph.input_f32(&mb.next_obs, &[n, PROPRIO_DIM])?;
        let vel_t = cx.graph.input_f32(&mb.velocity, &[n, VELOCITY_DIM])?;
        let depth_pair = if net.variant.uses_depth_reconstruction() {
            let p = net.decode_depth(cx, &latent)?;
            let t = cx.graph.input_f32(&mb.front, &[n, FRONT_FACE_DIM])?;
            Some((p, t))
        } else {
            None
        };
        let r = reconstruction_loss(
            cx,
            latent.state.mean,
            latent.state.log_var,
            obs_pred,
            obs_t,
            latent.velocity,
            vel_t,
            depth_pair,
        )?;
        breakdown.kl = scalar(cx, r.kl);
        breakdown.obs = scalar(cx, r.obs);
        breakdown.velocity = scalar(cx, r.velocity);
        breakdown.depth = r.depth.map(|v| scalar(cx, v));
        breakdown.reconstruction = scalar(cx, r.total);
        Some(r.total)
    } else {
        None
    };
    let contrast = if net.variant.uses_contrastive() {
        let z_c = net.encode_surroundings(cx, state, vision)?;
        let c = contrastive_loss(cx, net, latent.contrast, z_c)?;
        breakdown.contrastive = Some(scalar(cx, c));
        Some(c)
    } else {
        None
    };

    let vl = cx.graph.scale(value_loss, ppo.value_coef);
    let en = cx.graph.scale(entropy, -ppo.entropy_coef);
    let mut total = cx.graph.add(surrogate, vl)?;
    total = cx.graph.add(total, en)?;
    if let Some(m) = mixed_loss(cx, recon, contrast)? {
        breakdown.mixed = scalar(cx, m);
        total = cx.graph.add(total, m)?;
    }
    breakdown.total = scalar(cx, total);
    let zhat_c = cx
        .graph
        .value(latent.contrast)
        .iter()
        .map(|v| v.as_f32())
        .collect();
    Ok(CombinedLoss {
        total,
        breakdown,
        zhat_c,
    })
}

/// Aggregates over the minibatch steps of one update.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct UpdateStats {
    pub losses: LossBreakdown,
    /// Collapse metric of the standard encoder's contrastive code.
    pub collapse: Option<f64>,
    pub grad_norm: f64,
    pub steps: usize,
    pub skipped: usize,
}

/// Result of one gradient step.
#[derive(Debug, Clone)]
pub struct StepOutcome {
    pub breakdown: LossBreakdown,
    pub grad_norm: f64,
    pub zhat_c: Vec<f32>,
}

/// One combined forward/backward pass and optimizer step. Returns `None`
/// and leaves the parameters untouched when the loss or gradients are not
/// finite.
pub fn gradient_step(
    net: &PsNet,
    store: &mut ParamStore<f32>,
    adam: &mut Adam,
    mb: &Minibatch,
    ppo: &PpoConfig,
    eps_seed: u64,
) -> Result<Option<StepOutcome>> {
    let mut grads = Grads::zeros_like(store);
    let out = {
        let mut cx = Ctx::train(store);
        let out = combined_loss(&mut cx, net, mb, ppo, eps_seed)?;
        if !out.breakdown.total.is_finite() {
            return Ok(None);
        }
        cx.graph.backward(out.total)?;
        cx.accumulate(&mut grads);
        out
    };
    if !grads.is_finite() {
        return Ok(None);
    }
    let norm = clip_grad_norm(&mut grads, ppo.max_grad_norm);
    adam.step(store, &grads);
    Ok(Some(StepOutcome {
        breakdown: out.breakdown,
        grad_norm: norm as f64,
        zhat_c: out.zhat_c,
    }))
}

fn accumulate(sum: &mut LossBreakdown, x: &LossBreakdown) {
    sum.surrogate += x.surrogate;
    sum.value += x.value;
    sum.entropy += x.entropy;
    sum.kl += x.kl;
    sum.obs += x.obs;
    sum.velocity += x.velocity;
    sum.depth = x.depth.map(|d| sum.depth.unwrap_or(0.0) + d);
    sum.contrastive = x.contrastive.map(|c| sum.contrastive.unwrap_or(0.0) + c);
    sum.reconstruction += x.reconstruction;
    sum.mixed += x.mixed;
    sum.total += x.total;
}

fn divide(sum: &mut LossBreakdown, k: f64) {
    for v in [
        &mut sum.surrogate,
        &mut sum.value,
        &mut sum.entropy,
        &mut sum.kl,
        &mut sum.obs,
        &mut sum.velocity,
        &mut sum.reconstruction,
        &mut sum.mixed,
        &mut sum.total,
    ] {
        *v /= k;
    }
    if let Some(d) = sum.depth.as_mut() {
        *d /= k;
    }
    if let Some(c) = sum.contrastive.as_mut() {
        *c /= k;
    }
}

/// Epochs over env-partitioned minibatches of a finished buffer.
pub fn ppo_update(
    net: &PsNet,
    store: &mut ParamStore<f32>,
    adam: &mut Adam,
    buf: &RolloutBuffer,
    ppo: &PpoConfig,
    rng: &mut ChaCha8Rng,
) -> Result<UpdateStats> {
    if !buf.envs.is_multiple_of(ppo.minibatches) {
        return Err(Error::Config(format!(
            "{} envs do not split into {} minibatches",
            buf.envs, ppo.minibatches
        )));
    }
    let per = buf.envs / ppo.minibatches;
    let mut stats = UpdateStats::default();
    let mut collapse = Vec::new();
    for _ in 0..ppo.epochs {
        let mut order: Vec<usize> = (0..buf.envs).collect();
        order.shuffle(rng);
        for group in order.chunks(per) {
            let mb = buf.minibatch(group);
            let seed = rng.gen();
            match gradient_step(net, store, adam, &mb, ppo, seed)? {
                Some(o) => {
                    accumulate(&mut stats.losses, &o.breakdown);
                    stats.grad_norm += o.grad_norm;
                    stats.steps += 1;
                    if let Ok(c) = collapse_metric(&o.zhat_c, net.cfg.contrast_dim) {
                        collapse.push(c);
                    }
                }
                None => stats.skipped += 1,
            }
        }
    }
    if stats.steps > 0 {
        divide(&mut stats.losses, stats.steps as f64);
        stats.grad_norm /= stats.steps as f64;
    }
    if !collapse.is_empty() {
        stats.collapse = Some(collapse.iter().sum::<f64>() / collapse.len() as f64);
    }
    Ok(stats)
}
