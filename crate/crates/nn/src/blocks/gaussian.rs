use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::graph::Var;
use crate::params::Ctx;
use crate::tensor::Scalar;
use crate::Result;

use super::{Builder, Linear};

/// Standard normal noise for a given seed.
pub fn gaussian_noise(seed: u64, n: usize) -> Vec<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| StandardNormal.sample(&mut rng)).collect()
}

#[derive(Debug, Clone, Copy)]
pub struct GaussianSample {
    pub z: Var,
    pub mean: Var,
    pub log_var: Var,
}

/// Diagonal Gaussian head with reparameterised sampling `z = mu + sigma * eps`.
#[derive(Debug, Clone)]
pub struct GaussianHead {
    pub mean: Linear,
    pub log_var: Linear,
}

impl GaussianHead {
    pub fn new(b: &mut Builder, name: &str, input: usize, latent: usize) -> Result<Self> {
        Ok(Self {
            mean: Linear::new(b, &format!("{name}.mean"), input, latent)?,
            log_var: Linear::new(b, &format!("{name}.log_var"), input, latent)?,
        })
    }

    pub fn latent(&self) -> usize {
        self.mean.output
    }

    /// `eps` must match the shape of the mean, `[batch, latent]`.
    pub fn forward_with_noise<T: Scalar>(
        &self,
        cx: &mut Ctx<T>,
        x: Var,
        eps: Var,
    ) -> Result<GaussianSample> {
        let mean = self.mean.forward(cx, x)?;
        let log_var = self.log_var.forward(cx, x)?;
        let half = cx.graph.scale(log_var, 0.5);
        let sigma = cx.graph.exp(half);
        let noise = cx.graph.mul(sigma, eps)?;
        let z = cx.graph.add(mean, noise)?;
        Ok(GaussianSample { z, mean, log_var })
    }

    pub fn forward<T: Scalar>(&self, cx: &mut Ctx<T>, x: Var, seed: u64) -> Result<GaussianSample> {
        let rows = cx.graph.value(x).len() / self.mean.input;
        let eps = gaussian_noise(seed, rows * self.latent());
        let eps = cx.graph.input_f32(&eps, &[rows, self.latent()])?;
        self.forward_with_noise(cx, x, eps)
    }
}
