use std::path::Path;

use strider_nn::checkpoint::Checkpoint;
use strider_nn::{Ctx, ParamStore};

use crate::config::RunConfig;
use crate::psnet::{PsNet, ACTION_DIM, DEPTH_DIM};
use crate::sim::observe::{HISTORY_DIM, PRIVILEGED_DIM, VISION_DIM};
use crate::sim::{PrivilegedObservation, StandardObservation};
use crate::{Error, Result};

/// Checkpoint record holding the TOML run configuration.
pub const CONFIG_RECORD: &str = "meta.config";

/// Networks and parameters of one run.
#[derive(Debug, Clone)]
pub struct Agent {
    pub config: RunConfig,
    pub net: PsNet,
    pub store: ParamStore<f32>,
}

impl Agent {
    pub fn new(config: &RunConfig) -> Result<Self> {
        let mut store = ParamStore::new();
        let net = PsNet::build(
            &config.net,
            config.train.variant,
            &mut store,
            config.train.seed,
        )?;
        Ok(Self {
            config: config.clone(),
            net,
            store,
        })
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint::from_store(&self.store)
            .with_bytes(CONFIG_RECORD, self.config.to_toml().into_bytes())
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let text = ck
            .bytes(CONFIG_RECORD)
            .ok_or_else(|| Error::Format("checkpoint has no configuration record".into()))?;
        let text = std::str::from_utf8(text).map_err(|e| Error::Format(e.to_string()))?;
        let config = RunConfig::from_layers(Some(text), &[])?;
        let mut agent = Self::new(&config)?;
        ck.restore(&mut agent.store).map_err(|e| {
            Error::Format(format!("checkpoint does not match its configuration: {e}"))
        })?;
        Ok(agent)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_checkpoint(&Checkpoint::load(path)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        Ok(self.checkpoint().save(path)?)
    }

    pub fn log_std(&self) -> Vec<f64> {
        self.store
            .get(self.net.log_std)
            .data()
            .iter()
            .map(|&v| v as f64)
            .collect()
    }

    pub fn zero_state(&self, n: usize) -> Vec<f32> {
        vec![0.0; n * self.net.gru_dim()]
    }

    /// Action means for a batch of deployment observations; `h` is the
    /// `[n, gru]` recurrent state and is advanced in place.
    pub fn act(
        &self,
        obs: &[StandardObservation],
        h: &mut [f32],
    ) -> Result<Vec<[f32; ACTION_DIM]>> {
        Ok(self.forward(obs, h, false)?.0)
    }

    /// Like `act`, also returning the decoded front faces `[n, 256]`.
    pub fn act_and_reconstruct(
        &self,
        obs: &[StandardObservation],
        h: &mut [f32],
    ) -> Result<(Vec<[f32; ACTION_DIM]>, Vec<f32>)> {
        let (a, front) = self.forward(obs, h, true)?;
        Ok((a, front.unwrap_or_default()))
    }

    fn forward(
        &self,
        obs: &[StandardObservation],
        h: &mut [f32],
        reconstruct: bool,
    ) -> Result<(Vec<[f32; ACTION_DIM]>, Option<Vec<f32>>)> {
        let n = obs.len();
        if h.len() != n * self.net.gru_dim() {
            return Err(Error::Invalid(format!(
                "recurrent state has {} values for {n} envs",
                h.len()
            )));
        }
        if n == 0 {
            return Ok((Vec::new(), reconstruct.then(Vec::new)));
        }
        let mut hist = Vec::with_capacity(n * HISTORY_DIM);
        let mut depth = Vec::with_capacity(n * DEPTH_DIM);
        for o in obs {
            hist.extend_from_slice(&o.history);
            depth.extend_from_slice(&o.depth.data);
        }
        let mut cx = Ctx::infer(&self.store);
        let hv = cx.graph.input_f32(&hist, &[n, HISTORY_DIM])?;
        let dv = cx.graph.input_f32(&depth, &[n, DEPTH_DIM])?;
        let h0 = cx.graph.input_f32(h, &[n, self.net.gru_dim()])?;
        let eps = cx.graph.input(
            vec![0.0; n * self.net.cfg.state_dim],
            &[n, self.net.cfg.state_dim],
        )?;
        let (latent, h1) = self.net.encode_standard(&mut cx, hv, dv, h0, eps)?;
        let mean = self.net.policy_mean(&mut cx, hv, &latent)?;
        let front = if reconstruct {
            let d = self.net.decode_depth(&mut cx, &latent)?;
            Some(cx.graph.value(d).to_vec())
        } else {
            None
        };
        h.copy_from_slice(cx.graph.value(h1));
        let actions = cx
            .graph
            .value(mean)
            .chunks(ACTION_DIM)
            .map(|r| {
                let mut a = [0.0; ACTION_DIM];
                a.copy_from_slice(r);
                a
            })
            .collect();
        Ok((actions, front))
    }

    /// Critic values from privileged observations.
    pub fn values(&self, obs: &[PrivilegedObservation]) -> Result<Vec<f64>> {
        let n = obs.len();
        if n == 0 {
            return Ok(Vec::new());
        }
        let mut s = Vec::with_capacity(n * PRIVILEGED_DIM);
        let mut m = Vec::with_capacity(n * VISION_DIM);
        for o in obs {
            s.extend_from_slice(&o.state);
            m.extend_from_slice(&o.vision);
        }
        let mut cx = Ctx::infer(&self.store);
        let sv = cx.graph.input_f32(&s, &[n, PRIVILEGED_DIM])?;
        let mv = cx.graph.input_f32(&m, &[n, VISION_DIM])?;
        let v = self.net.value(&mut cx, sv, mv)?;
        Ok(cx.graph.value(v).iter().map(|&x| x as f64).collect())
    }
}
