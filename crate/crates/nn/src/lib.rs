//! Dense tensors, a reverse-mode differentiation tape and the network
//! blocks (MLP, CNN, attention, GRU, Gaussian head) used by `strider`.

pub mod blocks;
pub mod checkpoint;
pub mod gradcheck;
mod graph;
pub mod optim;
mod params;
mod tensor;

pub use graph::{ConvGeom, Graph, Var};
pub use params::{Ctx, Grads, Init, Initializer, ParamId, ParamStore};
pub use tensor::{Scalar, Tensor};

#[derive(Debug, thiserror::Error)]
pub enum NnError {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("degenerate input: {0}")]
    Degenerate(String),
    #[error("parameter error: {0}")]
    Param(String),
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = NnError> = std::result::Result<T, E>;
