//! Quadruped surrogate: dynamics, commands, rewards, observations and
//! vectorised episodes.

pub mod command;
pub mod dynamics;
pub mod env;
pub mod observe;
pub mod reward;

pub use command::{sample_command, Command, CommandClass};
pub use dynamics::{step, AgentState};
pub use env::{episode_status, Env, EnvConfig, Failure, Status, TrajectoryLog, Transition, VecEnv};
pub use observe::{
    ObservationBundle, ObservationHistory, PrivilegedObservation, StandardObservation,
};
pub use reward::{reward, RewardBreakdown, RewardWeights};
