use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use super::command::Command;
use super::dynamics::{AgentState, NOMINAL_JOINTS};
use crate::percept::{
    corrupt, probe_feet, render_cubemap, render_front, CameraModel, DepthImage, NoiseMode,
    PrivilegedVision, FACE_RES,
};
use crate::terrain::VoxelTerrain;

pub const PROPRIO_DIM: usize = 45;
pub const HISTORY: usize = 10;
pub const HISTORY_DIM: usize = PROPRIO_DIM * HISTORY;
pub const PRIVILEGED_DIM: usize = PROPRIO_DIM + 3;
pub const VISION_DIM: usize = 5 * FACE_RES * FACE_RES + crate::percept::FOOT_SAMPLES;
pub const FRONT_FACE_DIM: usize = FACE_RES * FACE_RES;

/// Input scale for body rates.
pub const ANGULAR_VELOCITY_SCALE: f64 = 0.25;
/// Input scale for joint rates.
pub const JOINT_VELOCITY_SCALE: f64 = 0.05;

/// One proprioceptive frame, laid out as
/// `[ω, g, v_cmd xy, ω_cmd, θ - θ_nominal, θ̇, a_prev]`.
pub type Proprioception = [f32; PROPRIO_DIM];

pub fn proprioception(s: &AgentState, cmd: &Command, a_prev: &[f64; 12]) -> Proprioception {
    let mut o = [0.0f32; PROPRIO_DIM];
    let g = s.gravity_body();
    for i in 0..3 {
        o[i] = (s.angular_velocity[i] * ANGULAR_VELOCITY_SCALE) as f32;
        o[3 + i] = g[i] as f32;
    }
    o[6] = cmd.velocity[0] as f32;
    o[7] = cmd.velocity[1] as f32;
    o[8] = cmd.yaw_rate as f32;
    for j in 0..12 {
        o[9 + j] = (s.joints[j] - NOMINAL_JOINTS[j]) as f32;
        o[21 + j] = (s.joint_velocities[j] * JOINT_VELOCITY_SCALE) as f32;
        o[33 + j] = a_prev[j].clamp(-1.0, 1.0) as f32;
    }
    o
}

/// Privileged state: proprioception followed by body-frame velocity.
pub fn privileged_state(o: &Proprioception, s: &AgentState) -> [f32; PRIVILEGED_DIM] {
    let mut out = [0.0f32; PRIVILEGED_DIM];
    out[..PROPRIO_DIM].copy_from_slice(o);
    let v = s.body_velocity();
    for i in 0..3 {
        out[PROPRIO_DIM + i] = v[i] as f32;
    }
    out
}

/// Fixed-length stack of frames, newest last.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObservationHistory {
    frames: VecDeque<Vec<f32>>,
}

impl ObservationHistory {
    pub fn filled(frame: &Proprioception) -> Self {
        Self {
            frames: std::iter::repeat_n(frame.to_vec(), HISTORY).collect(),
        }
    }

    pub fn push(&mut self, frame: &Proprioception) {
        self.frames.pop_front();
        self.frames.push_back(frame.to_vec());
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn newest(&self) -> &[f32] {
        self.frames.back().expect("history is never empty")
    }

    /// Oldest frame first; length `HISTORY_DIM`.
    pub fn flatten(&self) -> Vec<f32> {
        self.frames.iter().flatten().copied().collect()
    }
}

/// Inputs the deployed policy may read.
#[derive(Debug, Clone, PartialEq)]
pub struct StandardObservation {
    pub history: Vec<f32>,
    pub depth: DepthImage,
}

/// Simulation-only inputs and reconstruction targets.
#[derive(Debug, Clone, PartialEq)]
pub struct PrivilegedObservation {
    pub state: Vec<f32>,
    pub vision: Vec<f32>,
    pub velocity: [f32; 3],
}

impl PrivilegedObservation {
    /// Clean front cube face, the depth reconstruction target.
    pub fn front_face(&self) -> &[f32] {
        &self.vision[..FRONT_FACE_DIM]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ObservationBundle {
    pub standard: StandardObservation,
    pub privileged: PrivilegedObservation,
}

pub fn observe_standard(
    s: &AgentState,
    t: &VoxelTerrain,
    cam: &CameraModel,
    history: &ObservationHistory,
    noise: NoiseMode,
    noise_seed: u64,
) -> StandardObservation {
    let clean = render_front(t, cam, &s.pose());
    StandardObservation {
        history: history.flatten(),
        depth: corrupt(&clean, noise, noise_seed),
    }
}

pub fn observe_privileged(
    s: &AgentState,
    t: &VoxelTerrain,
    history: &ObservationHistory,
) -> PrivilegedObservation {
    let mut o = [0.0f32; PROPRIO_DIM];
    o.copy_from_slice(history.newest());
    let vision = PrivilegedVision {
        cube: render_cubemap(t, &s.pose()),
        foot: probe_feet(t, &s.feet, s.yaw()),
    };
    let state = privileged_state(&o, s);
    let velocity = [
        state[PROPRIO_DIM],
        state[PROPRIO_DIM + 1],
        state[PROPRIO_DIM + 2],
    ];
    PrivilegedObservation {
        state: state.to_vec(),
        vision: vision.to_vec(),
        velocity,
    }
}

pub fn observe(
    s: &AgentState,
    t: &VoxelTerrain,
    cam: &CameraModel,
    history: &ObservationHistory,
    noise: NoiseMode,
    noise_seed: u64,
) -> ObservationBundle {
    ObservationBundle {
        standard: observe_standard(s, t, cam, history, noise, noise_seed),
        privileged: observe_privileged(s, t, history),
    }
}
