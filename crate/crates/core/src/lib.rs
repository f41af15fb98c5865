//! Voxel parkour courses, depth sensing and a quadruped surrogate, with an
//! asymmetric actor-critic trainer whose actor encoder learns from a
//! pseudo-siamese pair of encoders.

pub mod cli;
pub mod config;
pub mod eval;
pub mod percept;
pub mod plot;
pub mod psnet;
pub mod rl;
pub mod sim;
pub mod terrain;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    Invalid(String),
    #[error("malformed data: {0}")]
    Format(String),
    #[error("numerical fault: {0}")]
    Fault(String),
    #[error("config error: {0}")]
    Config(String),
    #[error(transparent)]
    Nn(#[from] strider_nn::NnError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
