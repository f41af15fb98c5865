use crate::psnet::{ACTION_DIM, DEPTH_DIM};
use crate::sim::observe::{FRONT_FACE_DIM, HISTORY_DIM, PRIVILEGED_DIM, PROPRIO_DIM, VISION_DIM};

use super::gae::{gae, normalize};

/// Widths of the per-step arrays.
pub const VELOCITY_DIM: usize = 3;

/// One step of one environment.
#[derive(Debug, Clone)]
pub struct StepRecord<'a> {
    pub history: &'a [f32],
    pub depth: &'a [f32],
    pub state: &'a [f32],
    pub vision: &'a [f32],
    pub action: &'a [f32],
    pub log_prob: f64,
    pub reward: f64,
    pub value: f64,
    pub done: bool,
    pub next_obs: &'a [f32],
    pub velocity: &'a [f32],
    pub front: &'a [f32],
}

/// Time-major `(T, N)` rollout storage; row `t * N + n` is step `t` of env `n`.
#[derive(Debug, Clone)]
pub struct RolloutBuffer {
    pub horizon: usize,
    pub envs: usize,
    pub gru: usize,
    pub history: Vec<f32>,
    pub depth: Vec<f32>,
    pub state: Vec<f32>,
    pub vision: Vec<f32>,
    pub actions: Vec<f32>,
    pub log_probs: Vec<f64>,
    pub rewards: Vec<f64>,
    pub values: Vec<f64>,
    pub dones: Vec<bool>,
    pub next_obs: Vec<f32>,
    pub velocity: Vec<f32>,
    pub front: Vec<f32>,
    /// GRU state of every env at the start of the segment, `[N, gru]`.
    pub h0: Vec<f32>,
    /// `V(s_T)` per env.
    pub bootstrap: Vec<f64>,
    pub advantages: Vec<f64>,
    pub returns: Vec<f64>,
    len: usize,
}

/// Rows of a subset of environments, time-major.
#[derive(Debug, Clone)]
pub struct Minibatch {
    pub steps: usize,
    pub envs: usize,
    pub history: Vec<f32>,
    pub depth: Vec<f32>,
    pub state: Vec<f32>,
    pub vision: Vec<f32>,
    pub actions: Vec<f32>,
    pub old_log_probs: Vec<f32>,
    pub advantages: Vec<f32>,
    pub returns: Vec<f32>,
    pub next_obs: Vec<f32>,
    pub velocity: Vec<f32>,
    pub front: Vec<f32>,
    /// `starts[t * envs + n]`: the GRU state is reset before step `t`.
    pub starts: Vec<bool>,
    pub h0: Vec<f32>,
}

impl Minibatch {
    pub fn rows(&self) -> usize {
        self.steps * self.envs
    }
}

fn gather(dst: &mut Vec<f32>, src: &[f32], row: usize, w: usize) {
    dst.extend_from_slice(&src[row * w..(row + 1) * w]);
}

impl RolloutBuffer {
    pub fn new(horizon: usize, envs: usize, gru: usize, h0: Vec<f32>) -> Self {
        assert_eq!(
            h0.len(),
            envs * gru,
            "initial GRU states must be [envs, gru]"
        );
        let rows = horizon * envs;
        Self {
            horizon,
            envs,
            gru,
            history: Vec::with_capacity(rows * HISTORY_DIM),
            depth: Vec::with_capacity(rows * DEPTH_DIM),
            state: Vec::with_capacity(rows * PRIVILEGED_DIM),
            vision: Vec::with_capacity(rows * VISION_DIM),
            actions: Vec::with_capacity(rows * ACTION_DIM),
            log_probs: Vec::with_capacity(rows),
            rewards: Vec::with_capacity(rows),
            values: Vec::with_capacity(rows),
            dones: Vec::with_capacity(rows),
            next_obs: Vec::with_capacity(rows * PROPRIO_DIM),
            velocity: Vec::with_capacity(rows * VELOCITY_DIM),
            front: Vec::with_capacity(rows * FRONT_FACE_DIM),
            h0,
            bootstrap: Vec::new(),
            advantages: Vec::new(),
            returns: Vec::new(),
            len: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn is_full(&self) -> bool {
        self.len == self.horizon * self.envs
    }

    /// Appends the next row; rows must arrive in time-major order.
    pub fn push(&mut self, r: &StepRecord) {
        assert!(!self.is_full(), "rollout buffer is full");
        let widths = [
            (r.history.len(), HISTORY_DIM),
            (r.depth.len(), DEPTH_DIM),
            (r.state.len(), PRIVILEGED_DIM),
            (r.vision.len(), VISION_DIM),
            (r.action.len(), ACTION_DIM),
            (r.next_obs.len(), PROPRIO_DIM),
            (r.velocity.len(), VELOCITY_DIM),
            (r.front.len(), FRONT_FACE_DIM),
        ];
        assert!(
            widths.iter().all(|(a, b)| a == b),
            "step record widths {widths:?}"
        );
        self.history.extend_from_slice(r.history);
        self.depth.extend_from_slice(r.depth);
        self.state.extend_from_slice(r.state);
        self.vision.extend_from_slice(r.vision);
        self.actions.extend_from_slice(r.action);
        self.log_probs.push(r.log_prob);
        self.rewards.push(r.reward);
        self.values.push(r.value);
        self.dones.push(r.done);
        self.next_obs.extend_from_slice(r.next_obs);
        self.velocity.extend_from_slice(r.velocity);
        self.front.extend_from_slice(r.front);
        self.len += 1;
    }

    /// Computes advantages and returns per env, then normalises the
    /// advantages over the whole buffer.
    pub fn finish(&mut self, bootstrap: Vec<f64>, gamma: f64, lambda: f64) {
        assert!(self.is_full(), "rollout buffer is not full");
        assert_eq!(bootstrap.len(), self.envs);
        let (t_len, n_len) = (self.horizon, self.envs);
        self.advantages = vec![0.0; t_len * n_len];
        self.returns = vec![0.0; t_len * n_len];
        for n in 0..n_len {
            let idx: Vec<usize> = (0..t_len).map(|t| t * n_len + n).collect();
            let r: Vec<f64> = idx.iter().map(|&i| self.rewards[i]).collect();
            let v: Vec<f64> = idx.iter().map(|&i| self.values[i]).collect();
            let d: Vec<bool> = idx.iter().map(|&i| self.dones[i]).collect();
            let (a, ret) = gae(&r, &v, &d, bootstrap[n], gamma, lambda);
            for (k, &i) in idx.iter().enumerate() {
                self.advantages[i] = a[k];
                self.returns[i] = ret[k];
            }
        }
        normalize(&mut self.advantages);
        self.bootstrap = bootstrap;
    }

    pub fn minibatch(&self, envs: &[usize]) -> Minibatch {
        assert!(
            !self.advantages.is_empty(),
            "call finish before sampling minibatches"
        );
        let rows = self.horizon * envs.len();
        let mut mb = Minibatch {
            steps: self.horizon,
            envs: envs.len(),
            history: Vec::with_capacity(rows * HISTORY_DIM),
            depth: Vec::with_capacity(rows * DEPTH_DIM),
            state: Vec::with_capacity(rows * PRIVILEGED_DIM),
            vision: Vec::with_capacity(rows * VISION_DIM),
            actions: Vec::with_capacity(rows * ACTION_DIM),
            old_log_probs: Vec::with_capacity(rows),
            advantages: Vec::with_capacity(rows),
            returns: Vec::with_capacity(rows),
            next_obs: Vec::with_capacity(rows * PROPRIO_DIM),
            velocity: Vec::with_capacity(rows * VELOCITY_DIM),
            front: Vec::with_capacity(rows * FRONT_FACE_DIM),
            starts: Vec::with_capacity(rows),
            h0: Vec::with_capacity(envs.len() * self.gru),
        };
        for &n in envs {
            gather(&mut mb.h0, &self.h0, n, self.gru);
        }
        for t in 0..self.horizon {
            for &n in envs {
                let i = t * self.envs + n;
                gather(&mut mb.history, &self.history, i, HISTORY_DIM);
                gather(&mut mb.depth, &self.depth, i, DEPTH_DIM);
                gather(&mut mb.state, &self.state, i, PRIVILEGED_DIM);
                gather(&mut mb.vision, &self.vision, i, VISION_DIM);
                gather(&mut mb.actions, &self.actions, i, ACTION_DIM);
                gather(&mut mb.next_obs, &self.next_obs, i, PROPRIO_DIM);
                gather(&mut mb.velocity, &self.velocity, i, VELOCITY_DIM);
                gather(&mut mb.front, &self.front, i, FRONT_FACE_DIM);
                mb.old_log_probs.push(self.log_probs[i] as f32);
                mb.advantages.push(self.advantages[i] as f32);
                mb.returns.push(self.returns[i] as f32);
                mb.starts.push(t > 0 && self.dones[i - self.envs]);
            }
        }
        mb
    }
}
