use crate::graph::Var;
use crate::params::{Ctx, Init, ParamId};
use crate::tensor::Scalar;
use crate::{NnError, Result};

use super::Builder;

/// Gated recurrent unit. Gate blocks are ordered (update, reset, candidate)
/// and the new state is `h + z * (n - h)`, so a closed update gate carries
/// the previous state through.
#[derive(Debug, Clone)]
pub struct GruCell {
    pub w_input: ParamId,
    pub b_input: ParamId,
    pub w_hidden: ParamId,
    pub b_hidden: ParamId,
    pub input: usize,
    pub hidden: usize,
}

impl GruCell {
    pub fn new(b: &mut Builder, name: &str, input: usize, hidden: usize) -> Result<Self> {
        Ok(Self {
            w_input: b.param(
                &format!("{name}.w_input"),
                &[input, 3 * hidden],
                Init::HeUniform,
            )?,
            b_input: b.param(&format!("{name}.b_input"), &[3 * hidden], Init::Zeros)?,
            w_hidden: b.param(
                &format!("{name}.w_hidden"),
                &[hidden, 3 * hidden],
                Init::OrthogonalBlocks,
            )?,
            b_hidden: b.param(&format!("{name}.b_hidden"), &[3 * hidden], Init::Zeros)?,
            input,
            hidden,
        })
    }

    /// `h` is `[batch, hidden]`, `x` is `[batch, input]`.
    pub fn forward<T: Scalar>(&self, cx: &mut Ctx<T>, h: Var, x: Var) -> Result<Var> {
        let hs = cx.graph.shape(h).to_vec();
        let xs = cx.graph.shape(x).to_vec();
        if hs.len() != 2
            || xs.len() != 2
            || hs[1] != self.hidden
            || xs[1] != self.input
            || hs[0] != xs[0]
        {
            return Err(NnError::Shape(format!(
                "gru expects h [b, {}] and x [b, {}], got {:?} and {:?}",
                self.hidden, self.input, hs, xs
            )));
        }
        let hd = self.hidden;
        let wi = cx.p(self.w_input);
        let bi = cx.p(self.b_input);
        let wh = cx.p(self.w_hidden);
        let bh = cx.p(self.b_hidden);
        let gx = cx.graph.matmul(x, wi)?;
        let gx = cx.graph.add_bias(gx, bi)?;
        let gh = cx.graph.matmul(h, wh)?;
        let gh = cx.graph.add_bias(gh, bh)?;

        let xz = cx.graph.slice_cols(gx, 0, hd)?;
        let xr = cx.graph.slice_cols(gx, hd, hd)?;
        let xn = cx.graph.slice_cols(gx, 2 * hd, hd)?;
        let hz = cx.graph.slice_cols(gh, 0, hd)?;
        let hr = cx.graph.slice_cols(gh, hd, hd)?;
        let hn = cx.graph.slice_cols(gh, 2 * hd, hd)?;

        let z = cx.graph.add(xz, hz)?;
        let z = cx.graph.sigmoid(z);
        let r = cx.graph.add(xr, hr)?;
        let r = cx.graph.sigmoid(r);
        let rn = cx.graph.mul(r, hn)?;
        let n = cx.graph.add(xn, rn)?;
        let n = cx.graph.tanh(n);
        let diff = cx.graph.sub(n, h)?;
        let step = cx.graph.mul(z, diff)?;
        cx.graph.add(h, step)
    }
}
