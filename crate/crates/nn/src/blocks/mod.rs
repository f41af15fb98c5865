//! Network blocks. Each block owns [`ParamId`]s into a shared store and is
//! generic over the graph precision so the same code runs in f32 training
//! and in the f64 gradient-check shadow.

mod attention;
mod cnn;
mod gaussian;
mod gru;
mod linear;

pub use attention::{
    mean_tokens, CrossAttentionBlock, LayerNorm, MultiHeadAttention, SelfAttentionBlock,
};
pub use cnn::{Cnn, CnnConfig};
pub use gaussian::{gaussian_noise, GaussianHead, GaussianSample};
pub use gru::GruCell;
pub use linear::{Linear, Mlp};

use crate::params::{Init, Initializer, ParamId, ParamStore};
use crate::Result;

/// Registers parameters under dotted names.
pub struct Builder<'a> {
    store: &'a mut ParamStore<f32>,
    init: Initializer,
}

impl<'a> Builder<'a> {
    pub fn new(store: &'a mut ParamStore<f32>, seed: u64) -> Self {
        Self {
            store,
            init: Initializer::new(seed),
        }
    }

    pub fn param(&mut self, name: &str, shape: &[usize], init: Init) -> Result<ParamId> {
        let t = self.init.tensor(shape, init);
        self.store.insert(name, t)
    }

    pub fn store(&self) -> &ParamStore<f32> {
        self.store
    }
}
