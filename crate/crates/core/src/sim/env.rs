use std::io::Write;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::command::{sample_command_with, Command, CommandClass};
use super::dynamics::{self, AgentState, DT};
use super::observe::{
    observe, observe_standard, proprioception, ObservationBundle, ObservationHistory,
    Proprioception, StandardObservation,
};
use super::reward::{reward, RewardBreakdown, RewardWeights};
use crate::percept::{CameraModel, NoiseMode};
use crate::terrain::{VoxelTerrain, GOAL_ZONE, START_ZONE};
use crate::Result;

pub const EPISODE_SECONDS: f64 = 20.0;
pub const MIN_BODY_HEIGHT: f64 = 0.08;
/// Body-frame gravity z above which the body counts as tipped over.
pub const TIP_OVER_GZ: f64 = -0.5;
/// Spawn keeps this distance from the start zone's edges.
pub const SPAWN_MARGIN: f64 = 0.4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Failure {
    Collapse,
    TipOver,
    OutOfArena,
    Timeout,
    Fault,
}

impl Failure {
    pub const ALL: [Failure; 5] = [
        Failure::Collapse,
        Failure::TipOver,
        Failure::OutOfArena,
        Failure::Timeout,
        Failure::Fault,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Failure::Collapse => "collapse",
            Failure::TipOver => "tip_over",
            Failure::OutOfArena => "out_of_arena",
            Failure::Timeout => "timeout",
            Failure::Fault => "fault",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Status {
    Running,
    Success,
    Failure(Failure),
}

impl Status {
    pub fn is_done(self) -> bool {
        self != Status::Running
    }
}

pub fn episode_status(s: &AgentState, t: &VoxelTerrain, step_count: usize) -> Status {
    let p = s.position;
    if !s.is_finite() {
        return Status::Failure(Failure::Fault);
    }
    if GOAL_ZONE.contains(p.x, p.y) {
        return Status::Success;
    }
    let o = t.origin();
    let ext = t.extents();
    let cs = t.cell_size();
    let inside = (0..2).all(|a| p[a] >= o[a] && p[a] < o[a] + ext[a] as f64 * cs);
    if !inside || p.z < 0.0 {
        return Status::Failure(Failure::OutOfArena);
    }
    if p.z - t.ground_below([p.x, p.y, p.z]) < MIN_BODY_HEIGHT {
        return Status::Failure(Failure::Collapse);
    }
    if s.gravity_body().z > TIP_OVER_GZ {
        return Status::Failure(Failure::TipOver);
    }
    if step_count as f64 * DT > EPISODE_SECONDS {
        return Status::Failure(Failure::Timeout);
    }
    Status::Running
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EnvConfig {
    pub command: CommandClass,
    pub noise: NoiseMode,
    pub camera_z_offset: f64,
    pub reward: RewardWeights,
}

impl Default for EnvConfig {
    fn default() -> Self {
        Self {
            command: CommandClass::Forward,
            noise: NoiseMode::None,
            camera_z_offset: 0.0,
            reward: RewardWeights::default(),
        }
    }
}

/// Outcome of one control step.
#[derive(Debug, Clone, PartialEq)]
pub struct Transition {
    pub reward: RewardBreakdown,
    pub status: Status,
    /// Proprioception after the step, before any reset.
    pub next_proprio: Proprioception,
    pub collision: bool,
    /// Body-frame planar velocity after the step.
    pub velocity: [f64; 2],
    pub command: Command,
}

/// One seeded episode runner. Terminal states persist until `reset`.
#[derive(Debug, Clone)]
pub struct Env {
    cfg: EnvConfig,
    camera: CameraModel,
    terrain: Arc<VoxelTerrain>,
    rng: ChaCha8Rng,
    state: AgentState,
    command: Command,
    history: ObservationHistory,
    prev_action: [f64; 12],
    steps: usize,
    status: Status,
}

impl Env {
    pub fn new(cfg: EnvConfig, terrain: Arc<VoxelTerrain>, seed: u64) -> Result<Self> {
        let camera = CameraModel::default().with_z_offset(cfg.camera_z_offset)?;
        let state = AgentState::new(nalgebra::Vector3::zeros(), 0.0);
        let command = Command::zero(cfg.command);
        let history = ObservationHistory::filled(&proprioception(&state, &command, &[0.0; 12]));
        let mut env = Self {
            cfg,
            camera,
            terrain,
            rng: ChaCha8Rng::seed_from_u64(seed),
            state,
            command,
            history,
            prev_action: [0.0; 12],
            steps: 0,
            status: Status::Running,
        };
        env.reset();
        Ok(env)
    }

    pub fn config(&self) -> &EnvConfig {
        &self.cfg
    }

    pub fn terrain(&self) -> &Arc<VoxelTerrain> {
        &self.terrain
    }

    pub fn state(&self) -> &AgentState {
        &self.state
    }

    pub fn command(&self) -> &Command {
        &self.command
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn status(&self) -> Status {
        self.status
    }

    pub fn history(&self) -> &ObservationHistory {
        &self.history
    }

    /// New command and stance in the start zone, heading toward the goal.
    pub fn reset(&mut self) {
        self.command = sample_command_with(self.cfg.command, &mut self.rng);
        let x = self
            .rng
            .gen_range(START_ZONE.x0 + SPAWN_MARGIN..START_ZONE.x1 - SPAWN_MARGIN);
        let y = self
            .rng
            .gen_range(START_ZONE.y0 + SPAWN_MARGIN..START_ZONE.y1 - SPAWN_MARGIN);
        self.state = AgentState::standing(&self.terrain, x, y, self.command.heading_yaw());
        self.prev_action = [0.0; 12];
        self.steps = 0;
        self.status = Status::Running;
        self.history = ObservationHistory::filled(&proprioception(
            &self.state,
            &self.command,
            &self.prev_action,
        ));
    }

    pub fn reset_on(&mut self, terrain: Arc<VoxelTerrain>) {
        self.terrain = terrain;
        self.reset();
    }

    pub fn set_command(&mut self, command: Command) {
        self.command = command;
        self.history = ObservationHistory::filled(&proprioception(
            &self.state,
            &self.command,
            &self.prev_action,
        ));
    }

    pub fn observe(&mut self) -> ObservationBundle {
        let seed = self.rng.gen();
        observe(
            &self.state,
            &self.terrain,
            &self.camera,
            &self.history,
            self.cfg.noise,
            seed,
        )
    }

    /// Deployment inputs only; skips privileged rendering.
    pub fn observe_standard(&mut self) -> StandardObservation {
        let seed = self.rng.gen();
        observe_standard(
            &self.state,
            &self.terrain,
            &self.camera,
            &self.history,
            self.cfg.noise,
            seed,
        )
    }

    pub fn step(&mut self, action: &[f64; 12]) -> Transition {
        let mut a = [0.0; 12];
        for (dst, src) in a.iter_mut().zip(action) {
            *dst = if src.is_finite() {
                src.clamp(-1.0, 1.0)
            } else {
                f64::NAN
            };
        }
        let prev = self.state.clone();
        self.steps += 1;
        let (status, collision) = match dynamics::step(&prev, &a, &self.terrain) {
            Ok(next) => {
                self.state = next;
                (
                    episode_status(&self.state, &self.terrain, self.steps),
                    self.state.collision,
                )
            }
            Err(_) => (Status::Failure(Failure::Fault), false),
        };
        let a_safe = if a.iter().all(|v| v.is_finite()) {
            a
        } else {
            [0.0; 12]
        };
        let r = reward(
            &prev,
            &self.state,
            &a_safe,
            &self.prev_action,
            &self.command,
            collision,
            &self.cfg.reward,
        );
        self.prev_action = a_safe;
        let next_proprio = proprioception(&self.state, &self.command, &self.prev_action);
        self.history.push(&next_proprio);
        self.status = status;
        let v = self.state.body_velocity();
        Transition {
            reward: r,
            status,
            next_proprio,
            collision,
            velocity: [v.x, v.y],
            command: self.command,
        }
    }
}

/// Independent environments stepped as a batch.
#[derive(Debug, Clone)]
pub struct VecEnv {
    pub envs: Vec<Env>,
    threads: usize,
}

impl VecEnv {
    /// Environment `i` is seeded with `seed + i`.
    pub fn new(
        cfg: &EnvConfig,
        terrains: Vec<Arc<VoxelTerrain>>,
        seed: u64,
        threads: usize,
    ) -> Result<Self> {
        let envs = terrains
            .into_iter()
            .enumerate()
            .map(|(i, t)| Env::new(cfg.clone(), t, seed.wrapping_add(i as u64)))
            .collect::<Result<_>>()?;
        Ok(Self {
            envs,
            threads: threads.max(1),
        })
    }

    pub fn len(&self) -> usize {
        self.envs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.envs.is_empty()
    }

    /// Applies `f` to every env, across the worker threads; results keep
    /// env order.
    pub fn map_mut<R: Send>(&mut self, f: impl Fn(usize, &mut Env) -> R + Sync) -> Vec<R> {
        if self.threads == 1 || self.envs.len() < 2 {
            return self
                .envs
                .iter_mut()
                .enumerate()
                .map(|(i, e)| f(i, e))
                .collect();
        }
        let chunk = self.envs.len().div_ceil(self.threads);
        let f = &f;
        std::thread::scope(|scope| {
            let handles: Vec<_> = self
                .envs
                .chunks_mut(chunk)
                .enumerate()
                .map(|(c, envs)| {
                    scope.spawn(move || {
                        envs.iter_mut()
                            .enumerate()
                            .map(|(k, e)| f(c * chunk + k, e))
                            .collect::<Vec<_>>()
                    })
                })
                .collect();
            handles
                .into_iter()
                .flat_map(|h| h.join().expect("env worker panicked"))
                .collect()
        })
    }

    pub fn observe(&mut self) -> Vec<ObservationBundle> {
        self.map_mut(|_, e| e.observe())
    }

    pub fn observe_standard(&mut self) -> Vec<StandardObservation> {
        self.map_mut(|_, e| e.observe_standard())
    }

    pub fn step(&mut self, actions: &[[f64; 12]]) -> Vec<Transition> {
        assert_eq!(actions.len(), self.envs.len(), "one action per environment");
        self.map_mut(|i, e| e.step(&actions[i]))
    }
}

/// Per-step record of the JSON-lines trajectory log.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrajectoryRecord {
    pub step: usize,
    pub position: [f64; 3],
    /// `[w, x, y, z]`.
    pub orientation: [f64; 4],
    pub linear_velocity: [f64; 3],
    pub angular_velocity: [f64; 3],
    pub joints: Vec<f64>,
    pub action: Vec<f64>,
    pub reward: RewardBreakdown,
    pub status: Status,
}

impl TrajectoryRecord {
    pub fn new(step: usize, s: &AgentState, action: &[f64; 12], t: &Transition) -> Self {
        let q = s.orientation.quaternion();
        Self {
            step,
            position: s.position.into(),
            orientation: [q.w, q.i, q.j, q.k],
            linear_velocity: s.linear_velocity.into(),
            angular_velocity: s.angular_velocity.into(),
            joints: s.joints.to_vec(),
            action: action.to_vec(),
            reward: t.reward,
            status: t.status,
        }
    }
}

pub struct TrajectoryLog<W: Write> {
    out: W,
    count: usize,
}

impl<W: Write> TrajectoryLog<W> {
    pub fn new(out: W) -> Self {
        Self { out, count: 0 }
    }

    pub fn record(&mut self, env: &Env, action: &[f64; 12], t: &Transition) -> Result<()> {
        let rec = TrajectoryRecord::new(env.steps(), env.state(), action, t);
        serde_json::to_writer(&mut self.out, &rec)?;
        self.out.write_all(b"\n")?;
        self.count += 1;
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.count
    }

    pub fn is_empty(&self) -> bool {
        self.count == 0
    }

    pub fn into_inner(self) -> W {
        self.out
    }
}
