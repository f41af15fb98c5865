//! One-stage PPO over the asymmetric actor-critic and the PS-Net losses.

pub mod agent;
pub mod buffer;
pub mod gae;
pub mod policy;
pub mod ppo;
pub mod train;

pub use agent::Agent;
pub use buffer::{Minibatch, RolloutBuffer, StepRecord};
pub use gae::{gae, normalize};
pub use ppo::{combined_loss, gradient_step, ppo_update, CombinedLoss, UpdateStats};
pub use train::{checkpoint_path, Trainer, UpdateMetrics};
