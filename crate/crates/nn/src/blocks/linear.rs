use crate::graph::Var;
use crate::params::{Ctx, Init, ParamId};
use crate::tensor::Scalar;
use crate::{NnError, Result};

use super::Builder;

/// `y = x W + b`, `W` stored `[input, output]`.
#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub input: usize,
    pub output: usize,
}

impl Linear {
    pub fn new(b: &mut Builder, name: &str, input: usize, output: usize) -> Result<Self> {
        Self::with_init(b, name, input, output, Init::HeUniform, true)
    }

    pub fn with_init(
        b: &mut Builder,
        name: &str,
        input: usize,
        output: usize,
        init: Init,
        bias: bool,
    ) -> Result<Self> {
        let weight = b.param(&format!("{name}.weight"), &[input, output], init)?;
        let bias = if bias {
            Some(b.param(&format!("{name}.bias"), &[output], Init::Zeros)?)
        } else {
            None
        };
        Ok(Self {
            weight,
            bias,
            input,
            output,
        })
    }

    pub fn forward<T: Scalar>(&self, cx: &mut Ctx<T>, x: Var) -> Result<Var> {
        let width = *cx.graph.shape(x).last().unwrap_or(&0);
        if width != self.input {
            return Err(NnError::Shape(format!(
                "linear expects width {}, got {}",
                self.input, width
            )));
        }
        let rows = cx.graph.value(x).len() / self.input;
        let x = cx.graph.reshape(x, &[rows, self.input])?;
        let w = cx.p(self.weight);
        let y = cx.graph.matmul(x, w)?;
        match self.bias {
            Some(b) => {
                let b = cx.p(b);
                cx.graph.add_bias(y, b)
            }
            None => Ok(y),
        }
    }
}

/// Affine layers with ELU between them; the last layer is linear.
#[derive(Debug, Clone)]
pub struct Mlp {
    pub layers: Vec<Linear>,
}

impl Mlp {
    /// `widths = [input, hidden..., output]`.
    pub fn new(b: &mut Builder, name: &str, widths: &[usize]) -> Result<Self> {
        Self::with_final_init(b, name, widths, Init::HeUniform)
    }

    pub fn with_final_init(
        b: &mut Builder,
        name: &str,
        widths: &[usize],
        last: Init,
    ) -> Result<Self> {
        if widths.len() < 2 {
            return Err(NnError::Shape(
                "mlp needs at least input and output widths".into(),
            ));
        }
        let n = widths.len() - 1;
        let layers = (0..n)
            .map(|i| {
                let init = if i + 1 == n { last } else { Init::HeUniform };
                Linear::with_init(
                    b,
                    &format!("{name}.{i}"),
                    widths[i],
                    widths[i + 1],
                    init,
                    true,
                )
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { layers })
    }

    pub fn input(&self) -> usize {
        self.layers[0].input
    }

    pub fn output(&self) -> usize {
        self.layers.last().map(|l| l.output).unwrap_or(0)
    }

    pub fn forward<T: Scalar>(&self, cx: &mut Ctx<T>, x: Var) -> Result<Var> {
        let mut h = x;
        for (i, layer) in self.layers.iter().enumerate() {
            h = layer.forward(cx, h)?;
            if i + 1 < self.layers.len() {
                h = cx.graph.elu(h);
            }
        }
        Ok(h)
    }
}
