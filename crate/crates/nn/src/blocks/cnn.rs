use crate::graph::{ConvGeom, Var};
use crate::params::{Ctx, Init, ParamId};
use crate::tensor::Scalar;
use crate::{NnError, Result};

use super::{Builder, Linear};

#[derive(Debug, Clone, PartialEq)]
pub struct CnnConfig {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    /// Output channels of each stride-2 stage.
    pub stages: Vec<usize>,
    pub kernel: usize,
    pub embed: usize,
}

#[derive(Debug, Clone)]
struct ConvStage {
    weight: ParamId,
    bias: ParamId,
    in_c: usize,
    out_c: usize,
}

/// Stride-2 conv stages with ELU, then flatten and a linear projection.
/// Images are NHWC, one row per batch element.
#[derive(Debug, Clone)]
pub struct Cnn {
    pub cfg: CnnConfig,
    stages: Vec<ConvStage>,
    pub proj: Linear,
}

impl Cnn {
    pub fn new(b: &mut Builder, name: &str, cfg: CnnConfig) -> Result<Self> {
        if cfg.kernel.is_multiple_of(2) || cfg.stages.is_empty() {
            return Err(NnError::Shape(
                "cnn needs an odd kernel and at least one stage".into(),
            ));
        }
        let mut stages = Vec::new();
        let mut in_c = cfg.channels;
        for (i, &out_c) in cfg.stages.iter().enumerate() {
            let weight = b.param(
                &format!("{name}.conv{i}.weight"),
                &[cfg.kernel * cfg.kernel * in_c, out_c],
                Init::HeUniform,
            )?;
            let bias = b.param(&format!("{name}.conv{i}.bias"), &[out_c], Init::Zeros)?;
            stages.push(ConvStage {
                weight,
                bias,
                in_c,
                out_c,
            });
            in_c = out_c;
        }
        let (h, w) = Self::out_hw(&cfg);
        let proj = Linear::new(b, &format!("{name}.proj"), h * w * in_c, cfg.embed)?;
        Ok(Self { cfg, stages, proj })
    }

    fn out_hw(cfg: &CnnConfig) -> (usize, usize) {
        let pad = cfg.kernel / 2;
        let mut h = cfg.height;
        let mut w = cfg.width;
        for _ in &cfg.stages {
            h = (h + 2 * pad - cfg.kernel) / 2 + 1;
            w = (w + 2 * pad - cfg.kernel) / 2 + 1;
        }
        (h, w)
    }

    pub fn image_len(&self) -> usize {
        self.cfg.height * self.cfg.width * self.cfg.channels
    }

    pub fn forward<T: Scalar>(&self, cx: &mut Ctx<T>, img: Var) -> Result<Var> {
        let per = self.image_len();
        let shape = cx.graph.shape(img).to_vec();
        if shape.len() != 2 || shape[1] != per {
            return Err(NnError::Shape(format!(
                "cnn expects [batch, {}] images ({}x{}x{}), got {:?}",
                per, self.cfg.height, self.cfg.width, self.cfg.channels, shape
            )));
        }
        let numel = shape[0] * per;
        let batch = numel / per;
        let (mut h, mut w) = (self.cfg.height, self.cfg.width);
        let mut x = img;
        for st in &self.stages {
            let geom = ConvGeom {
                batch,
                height: h,
                width: w,
                channels: st.in_c,
                kernel: self.cfg.kernel,
                stride: 2,
                pad: self.cfg.kernel / 2,
            };
            let cols = cx.graph.im2col(x, geom)?;
            let wv = cx.p(st.weight);
            let bv = cx.p(st.bias);
            let y = cx.graph.matmul(cols, wv)?;
            let y = cx.graph.add_bias(y, bv)?;
            x = cx.graph.elu(y);
            h = geom.out_height();
            w = geom.out_width();
            debug_assert_eq!(cx.graph.shape(x)[1], st.out_c);
        }
        let flat = cx.graph.value(x).len() / batch;
        let x = cx.graph.reshape(x, &[batch, flat])?;
        self.proj.forward(cx, x)
    }
}
