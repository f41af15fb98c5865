//! Pseudo-siamese encoders, the critic encoder and the policy head.
//!
//! The standard encoder reads only the observation history and the front
//! depth image. The surroundings and critic encoders read the privileged
//! state and vision; they share no parameters with each other or with the
//! standard encoder.

pub mod loss;

use serde::{Deserialize, Serialize};
use strider_nn::blocks::{
    mean_tokens, Builder, Cnn, CnnConfig, CrossAttentionBlock, GaussianHead, GaussianSample,
    GruCell, Linear, Mlp, SelfAttentionBlock,
};
use strider_nn::{Ctx, Init, ParamId, ParamStore, Scalar, Var};

use crate::percept::{FACE_RES, FOOT_SAMPLES, FRONT_HEIGHT, FRONT_WIDTH};
use crate::sim::observe::{HISTORY_DIM, PRIVILEGED_DIM, PROPRIO_DIM, VISION_DIM};
use crate::{Error, Result};

pub use loss::{
    collapse_metric, contrastive_loss, contrastive_split, kl_standard_normal, mixed_loss, mse,
    reconstruction_loss, LossBreakdown, ReconTerms,
};

pub const ACTION_DIM: usize = 12;
pub const DEPTH_DIM: usize = FRONT_WIDTH * FRONT_HEIGHT;
const FACES: usize = 5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    #[default]
    Full,
    NoContrastive,
    NoReconstruction,
    NoCrossAttention,
    Baseline,
}

impl Variant {
    pub const ALL: [Variant; 5] = [
        Self::Full,
        Self::NoContrastive,
        Self::NoReconstruction,
        Self::NoCrossAttention,
        Self::Baseline,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Self::Full => "full",
            Self::NoContrastive => "no_contrastive",
            Self::NoReconstruction => "no_reconstruction",
            Self::NoCrossAttention => "no_cross_attention",
            Self::Baseline => "baseline",
        }
    }

    pub fn uses_contrastive(self) -> bool {
        matches!(
            self,
            Self::Full | Self::NoReconstruction | Self::NoCrossAttention
        )
    }

    pub fn uses_reconstruction(self) -> bool {
        self != Self::Baseline
    }

    /// Whether the front-depth term is part of the reconstruction loss.
    pub fn uses_depth_reconstruction(self) -> bool {
        matches!(
            self,
            Self::Full | Self::NoContrastive | Self::NoCrossAttention
        )
    }
}

impl std::str::FromStr for Variant {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::Invalid(format!("unknown ablation variant `{s}`")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NetConfig {
    pub token: usize,
    pub heads: usize,
    pub history_hidden: usize,
    pub depth_stages: Vec<usize>,
    pub face_stages: Vec<usize>,
    pub gru: usize,
    pub velocity_dim: usize,
    pub state_dim: usize,
    pub vision_dim: usize,
    pub contrast_dim: usize,
    pub predictor_hidden: usize,
    pub policy_hidden: Vec<usize>,
    pub head_hidden: usize,
    pub init_log_std: f32,
}

impl Default for NetConfig {
    fn default() -> Self {
        Self {
            token: 64,
            heads: 2,
            history_hidden: 128,
            depth_stages: vec![4, 8, 8],
            face_stages: vec![4, 8],
            gru: 128,
            velocity_dim: 3,
            state_dim: 16,
            vision_dim: 32,
            contrast_dim: 16,
            predictor_hidden: 8,
            policy_hidden: vec![128, 128],
            head_hidden: 64,
            init_log_std: -1.0,
        }
    }
}

impl NetConfig {
    pub fn latent_dim(&self) -> usize {
        self.velocity_dim + self.state_dim + self.vision_dim + self.contrast_dim
    }
}

/// Latent heads of the standard encoder.
#[derive(Debug, Clone, Copy)]
pub struct Latent {
    pub velocity: Var,
    pub state: GaussianSample,
    pub vision: Var,
    pub contrast: Var,
    /// `[v, mu, z_f, z_c]`, the part the policy reads.
    pub policy_input: Var,
}

/// Image CNN plus an MLP for the foot probes, one token per face and one
/// for the probes.
#[derive(Debug, Clone)]
struct VisionTokens {
    faces: Cnn,
    feet: Mlp,
}

impl VisionTokens {
    fn new(b: &mut Builder, name: &str, cfg: &NetConfig) -> Result<Self> {
        let faces = Cnn::new(
            b,
            &format!("{name}.faces"),
            CnnConfig {
                height: FACE_RES,
                width: FACE_RES,
                channels: 1,
                stages: cfg.face_stages.clone(),
                kernel: 3,
                embed: cfg.token,
            },
        )?;
        let feet = Mlp::new(
            b,
            &format!("{name}.feet"),
            &[FOOT_SAMPLES, cfg.token, cfg.token],
        )?;
        Ok(Self { faces, feet })
    }

    /// `[n, 1300] -> [n * 6, token]`, rows grouped per element.
    fn forward<T: Scalar>(&self, cx: &mut Ctx<T>, m: Var, d: usize) -> Result<Var> {
        let n = cx.graph.shape(m)[0];
        let faces = cx.graph.slice_cols(m, 0, FACES * FACE_RES * FACE_RES)?;
        let faces = cx.graph.reshape(faces, &[n * FACES, FACE_RES * FACE_RES])?;
        let ft = self.faces.forward(cx, faces)?;
        let ft = cx.graph.reshape(ft, &[n, FACES * d])?;
        let feet = cx
            .graph
            .slice_cols(m, FACES * FACE_RES * FACE_RES, FOOT_SAMPLES)?;
        let fe = self.feet.forward(cx, feet)?;
        let all = cx.graph.concat_cols(&[ft, fe])?;
        Ok(cx.graph.reshape(all, &[n * (FACES + 1), d])?)
    }
}

#[derive(Debug, Clone)]
enum Fusion {
    Cross(CrossAttentionBlock),
    SelfAttn(SelfAttentionBlock),
}

/// All network modules. Parameters live in a separate [`ParamStore`].
#[derive(Debug, Clone)]
pub struct PsNet {
    pub cfg: NetConfig,
    pub variant: Variant,
    // standard encoder
    history: Mlp,
    depth: Cnn,
    fuse: SelfAttentionBlock,
    pub gru: GruCell,
    velocity: Linear,
    state: GaussianHead,
    vision: Linear,
    contrast: Linear,
    // decoders
    obs_decoder: Mlp,
    depth_decoder: Mlp,
    // surroundings encoder
    sur_tokens: VisionTokens,
    sur_query: Mlp,
    sur_fusion: Fusion,
    sur_head: Mlp,
    predictor: Mlp,
    // critic
    critic_tokens: VisionTokens,
    critic_state: Mlp,
    critic_fuse: SelfAttentionBlock,
    critic_head: Mlp,
    // policy
    policy: Mlp,
    pub log_std: ParamId,
}

/// Name prefixes of the parameter groups.
pub const STANDARD_PREFIX: &str = "standard.";
pub const SURROUNDINGS_PREFIX: &str = "surroundings.";
pub const CRITIC_PREFIX: &str = "critic.";
pub const POLICY_PREFIX: &str = "policy.";

impl PsNet {
    /// Builds the modules and registers fresh parameters in `store`.
    pub fn build(
        cfg: &NetConfig,
        variant: Variant,
        store: &mut ParamStore<f32>,
        seed: u64,
    ) -> Result<Self> {
        let mut b = Builder::new(store, seed);
        let d = cfg.token;
        let s = "standard";
        let history = Mlp::new(
            &mut b,
            &format!("{s}.history"),
            &[HISTORY_DIM, cfg.history_hidden, d],
        )?;
        let depth = Cnn::new(
            &mut b,
            &format!("{s}.depth"),
            CnnConfig {
                height: FRONT_HEIGHT,
                width: FRONT_WIDTH,
                channels: 1,
                stages: cfg.depth_stages.clone(),
                kernel: 3,
                embed: d,
            },
        )?;
        let fuse = SelfAttentionBlock::new(&mut b, &format!("{s}.fuse"), d, cfg.heads)?;
        let gru = GruCell::new(&mut b, &format!("{s}.gru"), 2 * d, cfg.gru)?;
        let velocity = Linear::new(&mut b, &format!("{s}.velocity"), cfg.gru, cfg.velocity_dim)?;
        let state = GaussianHead::new(&mut b, &format!("{s}.state"), cfg.gru, cfg.state_dim)?;
        let vision = Linear::new(&mut b, &format!("{s}.vision"), cfg.gru, cfg.vision_dim)?;
        let contrast = Linear::new(&mut b, &format!("{s}.contrast"), cfg.gru, cfg.contrast_dim)?;

        let obs_decoder = Mlp::new(
            &mut b,
            "decoder.obs",
            &[cfg.state_dim, cfg.head_hidden, PROPRIO_DIM],
        )?;
        let depth_decoder = Mlp::new(
            &mut b,
            "decoder.depth",
            &[cfg.vision_dim, 2 * cfg.head_hidden, FACE_RES * FACE_RES],
        )?;

        let s = "surroundings";
        let sur_tokens = VisionTokens::new(&mut b, &format!("{s}.vision"), cfg)?;
        let sur_query = Mlp::new(&mut b, &format!("{s}.query"), &[PRIVILEGED_DIM, d, d])?;
        let sur_fusion = if variant == Variant::NoCrossAttention {
            Fusion::SelfAttn(SelfAttentionBlock::new(
                &mut b,
                &format!("{s}.fuse"),
                d,
                cfg.heads,
            )?)
        } else {
            Fusion::Cross(CrossAttentionBlock::new(
                &mut b,
                &format!("{s}.cross"),
                d,
                cfg.heads,
            )?)
        };
        let sur_head = Mlp::new(
            &mut b,
            &format!("{s}.head"),
            &[d, cfg.head_hidden, cfg.contrast_dim],
        )?;
        let predictor = Mlp::new(
            &mut b,
            "predictor",
            &[cfg.contrast_dim, cfg.predictor_hidden, cfg.contrast_dim],
        )?;

        let c = "critic";
        let critic_tokens = VisionTokens::new(&mut b, &format!("{c}.vision"), cfg)?;
        let critic_state = Mlp::new(&mut b, &format!("{c}.state"), &[PRIVILEGED_DIM, d, d])?;
        let critic_fuse = SelfAttentionBlock::new(&mut b, &format!("{c}.fuse"), d, cfg.heads)?;
        let critic_head = Mlp::new(&mut b, &format!("{c}.head"), &[d, cfg.head_hidden, 1])?;

        let mut widths = vec![PROPRIO_DIM + cfg.latent_dim()];
        widths.extend(&cfg.policy_hidden);
        widths.push(ACTION_DIM);
        let policy = Mlp::with_final_init(&mut b, "policy.mean", &widths, Init::Zeros)?;
        let log_std = b.param(
            "policy.log_std",
            &[ACTION_DIM],
            Init::Constant(cfg.init_log_std),
        )?;

        Ok(Self {
            cfg: cfg.clone(),
            variant,
            history,
            depth,
            fuse,
            gru,
            velocity,
            state,
            vision,
            contrast,
            obs_decoder,
            depth_decoder,
            sur_tokens,
            sur_query,
            sur_fusion,
            sur_head,
            predictor,
            critic_tokens,
            critic_state,
            critic_fuse,
            critic_head,
            policy,
            log_std,
        })
    }

    pub fn gru_dim(&self) -> usize {
        self.cfg.gru
    }

    /// Fused modality tokens fed to the GRU: `hist [n, 450]`, `depth [n, 1536]` -> `[n, 2d]`.
    pub fn standard_features<T: Scalar>(
        &self,
        cx: &mut Ctx<T>,
        hist: Var,
        depth: Var,
    ) -> Result<Var> {
        let n = check_rows(cx, hist, HISTORY_DIM, "observation history")?;
        if check_rows(cx, depth, DEPTH_DIM, "depth image")? != n {
            return Err(Error::Invalid(
                "history and depth batch sizes differ".into(),
            ));
        }
        let d = self.cfg.token;
        let p = self.history.forward(cx, hist)?;
        let e = self.depth.forward(cx, depth)?;
        let tokens = cx.graph.concat_cols(&[p, e])?;
        let tokens = cx.graph.reshape(tokens, &[2 * n, d])?;
        let fused = self.fuse.forward(cx, tokens, 2)?;
        Ok(cx.graph.reshape(fused, &[n, 2 * d])?)
    }

    pub fn gru_step<T: Scalar>(&self, cx: &mut Ctx<T>, h: Var, features: Var) -> Result<Var> {
        Ok(self.gru.forward(cx, h, features)?)
    }

    /// Latent heads on GRU outputs; `eps` is the VAE noise, `[n, state_dim]`.
    pub fn latent<T: Scalar>(&self, cx: &mut Ctx<T>, h: Var, eps: Var) -> Result<Latent> {
        let velocity = self.velocity.forward(cx, h)?;
        let state = self.state.forward_with_noise(cx, h, eps)?;
        let vision = self.vision.forward(cx, h)?;
        let contrast = self.contrast.forward(cx, h)?;
        let policy_input = cx
            .graph
            .concat_cols(&[velocity, state.mean, vision, contrast])?;
        Ok(Latent {
            velocity,
            state,
            vision,
            contrast,
            policy_input,
        })
    }

    /// One recurrent step of the standard encoder.
    pub fn encode_standard<T: Scalar>(
        &self,
        cx: &mut Ctx<T>,
        hist: Var,
        depth: Var,
        h: Var,
        eps: Var,
    ) -> Result<(Latent, Var)> {
        let f = self.standard_features(cx, hist, depth)?;
        let h2 = self.gru_step(cx, h, f)?;
        Ok((self.latent(cx, h2, eps)?, h2))
    }

    /// Action mean from the newest frame of `hist` and the latent.
    pub fn policy_mean<T: Scalar>(
        &self,
        cx: &mut Ctx<T>,
        hist: Var,
        latent: &Latent,
    ) -> Result<Var> {
        if !cx
            .graph
            .value(latent.policy_input)
            .iter()
            .all(|v| v.is_finite())
        {
            return Err(Error::Fault("non-finite latent".into()));
        }
        let o = cx
            .graph
            .slice_cols(hist, HISTORY_DIM - PROPRIO_DIM, PROPRIO_DIM)?;
        let x = cx.graph.concat_cols(&[o, latent.policy_input])?;
        Ok(self.policy.forward(cx, x)?)
    }

    pub fn decode_obs<T: Scalar>(&self, cx: &mut Ctx<T>, latent: &Latent) -> Result<Var> {
        Ok(self.obs_decoder.forward(cx, latent.state.z)?)
    }

    pub fn decode_depth<T: Scalar>(&self, cx: &mut Ctx<T>, latent: &Latent) -> Result<Var> {
        Ok(self.depth_decoder.forward(cx, latent.vision)?)
    }

    /// `s [n, 48]`, `m [n, 1300]` -> `z_c [n, 16]`.
    pub fn encode_surroundings<T: Scalar>(&self, cx: &mut Ctx<T>, s: Var, m: Var) -> Result<Var> {
        let n = check_privileged(cx, s, m)?;
        let d = self.cfg.token;
        let kv = self.sur_tokens.forward(cx, m, d)?;
        let q = self.sur_query.forward(cx, s)?;
        let fused = match &self.sur_fusion {
            Fusion::Cross(block) => block.forward(cx, q, kv, FACES + 1)?,
            Fusion::SelfAttn(block) => {
                let kv_flat = cx.graph.reshape(kv, &[n, (FACES + 1) * d])?;
                let all = cx.graph.concat_cols(&[q, kv_flat])?;
                let all = cx.graph.reshape(all, &[n * (FACES + 2), d])?;
                let y = block.forward(cx, all, FACES + 2)?;
                mean_tokens(cx, y, FACES + 2, d)?
            }
        };
        Ok(self.sur_head.forward(cx, fused)?)
    }

    pub fn predict<T: Scalar>(&self, cx: &mut Ctx<T>, z: Var) -> Result<Var> {
        Ok(self.predictor.forward(cx, z)?)
    }

    /// Value estimate `[n, 1]` from privileged inputs.
    pub fn value<T: Scalar>(&self, cx: &mut Ctx<T>, s: Var, m: Var) -> Result<Var> {
        let n = check_privileged(cx, s, m)?;
        let d = self.cfg.token;
        let vis = self.critic_tokens.forward(cx, m, d)?;
        let vis = cx.graph.reshape(vis, &[n, (FACES + 1) * d])?;
        let st = self.critic_state.forward(cx, s)?;
        let all = cx.graph.concat_cols(&[st, vis])?;
        let all = cx.graph.reshape(all, &[n * (FACES + 2), d])?;
        let y = self.critic_fuse.forward(cx, all, FACES + 2)?;
        let pooled = mean_tokens(cx, y, FACES + 2, d)?;
        Ok(self.critic_head.forward(cx, pooled)?)
    }

    /// Parameter ids whose names start with `prefix`.
    pub fn group(store: &ParamStore<f32>, prefix: &str) -> Vec<ParamId> {
        store
            .ids()
            .filter(|&id| store.name(id).starts_with(prefix))
            .collect()
    }

    /// Value projection of the surroundings encoder's attention.
    pub fn surroundings_value_projection(&self) -> Vec<ParamId> {
        match &self.sur_fusion {
            Fusion::Cross(b) => {
                let mut ids = vec![b.attn.value.weight];
                ids.extend(b.attn.value.bias);
                ids
            }
            Fusion::SelfAttn(b) => {
                let mut ids = vec![b.attn.value.weight];
                ids.extend(b.attn.value.bias);
                ids
            }
        }
    }
}

fn check_rows<T: Scalar>(cx: &Ctx<T>, v: Var, width: usize, what: &str) -> Result<usize> {
    let shape = cx.graph.shape(v);
    if shape.len() != 2 || shape[1] != width {
        return Err(Error::Invalid(format!(
            "{what} must be [n, {width}], got {shape:?}"
        )));
    }
    Ok(shape[0])
}

fn check_privileged<T: Scalar>(cx: &Ctx<T>, s: Var, m: Var) -> Result<usize> {
    let n = check_rows(cx, s, PRIVILEGED_DIM, "privileged state")?;
    if check_rows(cx, m, VISION_DIM, "privileged vision")? != n {
        return Err(Error::Invalid("privileged batch sizes differ".into()));
    }
    Ok(n)
}
