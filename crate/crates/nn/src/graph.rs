//! Tape-based reverse-mode differentiation.
//!
//! Every operation appends a node holding its value. [`Graph::backward`]
//! walks the tape in reverse, so the graph is acyclic by construction.

use crate::tensor::{Scalar, Tensor};
use crate::{NnError, Result};

/// Handle to a node of a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy)]
pub struct ConvGeom {
    pub batch: usize,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeom {
    pub fn out_height(&self) -> usize {
        (self.height + 2 * self.pad - self.kernel) / self.stride + 1
    }
    pub fn out_width(&self) -> usize {
        (self.width + 2 * self.pad - self.kernel) / self.stride + 1
    }
    pub fn patch_len(&self) -> usize {
        self.kernel * self.kernel * self.channels
    }
}

#[derive(Debug, Clone)]
enum Op<T> {
    Leaf,
    MatMul {
        a: usize,
        b: usize,
        m: usize,
        k: usize,
        n: usize,
    },
    Bmm {
        a: usize,
        b: usize,
        batch: usize,
        m: usize,
        k: usize,
        n: usize,
        trans_b: bool,
    },
    AddBias {
        x: usize,
        b: usize,
    },
    MulRow {
        x: usize,
        r: usize,
    },
    MulCol {
        x: usize,
        c: usize,
    },
    Add {
        a: usize,
        b: usize,
    },
    Sub {
        a: usize,
        b: usize,
    },
    Mul {
        a: usize,
        b: usize,
    },
    Scale {
        x: usize,
        c: T,
    },
    AddConst {
        x: usize,
    },
    Elu {
        x: usize,
    },
    Sigmoid {
        x: usize,
    },
    Tanh {
        x: usize,
    },
    Exp {
        x: usize,
    },
    Square {
        x: usize,
    },
    Softmax {
        x: usize,
        n: usize,
    },
    LayerNorm {
        x: usize,
        n: usize,
        inv_std: Vec<T>,
    },
    L2Normalize {
        x: usize,
        n: usize,
        norms: Vec<T>,
    },
    SumCols {
        x: usize,
        n: usize,
    },
    SumAll {
        x: usize,
    },
    MeanAll {
        x: usize,
    },
    ConcatCols {
        xs: Vec<(usize, usize)>,
        rows: usize,
    },
    SliceCols {
        x: usize,
        start: usize,
        width: usize,
        cols: usize,
    },
    ConcatRows {
        xs: Vec<usize>,
    },
    SliceRows {
        x: usize,
        offset: usize,
    },
    Reshape {
        x: usize,
    },
    Im2Col {
        x: usize,
        geom: ConvGeom,
    },
    Clamp {
        x: usize,
        lo: T,
        hi: T,
    },
    Minimum {
        a: usize,
        b: usize,
    },
}

impl<T> Op<T> {
    fn inputs(&self) -> Vec<usize> {
        use Op::*;
        match self {
            Leaf => vec![],
            MatMul { a, b, .. } | Bmm { a, b, .. } | Add { a, b } | Sub { a, b } | Mul { a, b } => {
                vec![*a, *b]
            }
            Minimum { a, b } => vec![*a, *b],
            AddBias { x, b } => vec![*x, *b],
            MulRow { x, r } => vec![*x, *r],
            MulCol { x, c } => vec![*x, *c],
            Scale { x, .. }
            | AddConst { x }
            | Elu { x }
            | Sigmoid { x }
            | Tanh { x }
            | Exp { x }
            | Square { x }
            | Softmax { x, .. }
            | LayerNorm { x, .. }
            | L2Normalize { x, .. }
            | SumCols { x, .. }
            | SumAll { x }
            | MeanAll { x }
            | SliceCols { x, .. }
            | SliceRows { x, .. }
            | Reshape { x }
            | Im2Col { x, .. }
            | Clamp { x, .. } => vec![*x],
            ConcatCols { xs, .. } => xs.iter().map(|(i, _)| *i).collect(),
            ConcatRows { xs } => xs.clone(),
        }
    }
}

#[derive(Debug, Clone)]
struct Node<T> {
    value: Vec<T>,
    shape: Vec<usize>,
    op: Op<T>,
    requires_grad: bool,
}

/// Computation tape.
#[derive(Debug, Clone)]
pub struct Graph<T: Scalar> {
    nodes: Vec<Node<T>>,
    grads: Vec<Option<Vec<T>>>,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn shape_err<S: Into<String>>(msg: S) -> NnError {
    NnError::Shape(msg.into())
}

fn elu<T: Scalar>(v: T) -> T {
    if v > T::zero() {
        v
    } else {
        v.exp() - T::one()
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            grads: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Vec<T>, shape: Vec<usize>, op: Op<T>) -> Var {
        debug_assert_eq!(value.len(), shape.iter().product::<usize>());
        let requires_grad = op.inputs().iter().any(|&i| self.nodes[i].requires_grad);
        self.nodes.push(Node {
            value,
            shape,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn leaf(&mut self, value: Vec<T>, shape: &[usize], requires_grad: bool) -> Result<Var> {
        if value.len() != shape.iter().product::<usize>() {
            return Err(shape_err(format!(
                "leaf of shape {:?} given {} values",
                shape,
                value.len()
            )));
        }
        self.nodes.push(Node {
            value,
            shape: shape.to_vec(),
            op: Op::Leaf,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Trainable leaf.
    pub fn param(&mut self, value: Vec<T>, shape: &[usize]) -> Result<Var> {
        self.leaf(value, shape, true)
    }

    /// Constant leaf.
    pub fn input(&mut self, value: Vec<T>, shape: &[usize]) -> Result<Var> {
        self.leaf(value, shape, false)
    }

    pub fn input_tensor(&mut self, t: &Tensor<T>) -> Var {
        self.leaf(t.data().to_vec(), t.shape(), false)
            .expect("tensor invariant")
    }

    pub fn input_f32(&mut self, value: &[f32], shape: &[usize]) -> Result<Var> {
        self.leaf(value.iter().map(|&v| T::of_f32(v)).collect(), shape, false)
    }

    pub fn value(&self, v: Var) -> &[T] {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn scalar(&self, v: Var) -> T {
        self.nodes[v.0].value[0]
    }

    pub fn to_tensor(&self, v: Var) -> Tensor<T> {
        let n = &self.nodes[v.0];
        Tensor::new(&n.shape, n.value.clone()).expect("node invariant")
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Gradient accumulated by the last [`Graph::backward`] call.
    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// True when `input` is an ancestor of (or equal to) `output`.
    pub fn depends_on(&self, output: Var, input: Var) -> bool {
        if input.0 > output.0 {
            return false;
        }
        let mut seen = vec![false; output.0 + 1];
        let mut stack = vec![output.0];
        while let Some(i) = stack.pop() {
            if i == input.0 {
                return true;
            }
            if seen[i] {
                continue;
            }
            seen[i] = true;
            for j in self.nodes[i].op.inputs() {
                if j >= input.0 && !seen[j] {
                    stack.push(j);
                }
            }
        }
        false
    }

    fn dims2(&self, v: Var) -> Result<(usize, usize)> {
        let s = &self.nodes[v.0].shape;
        match s.len() {
            1 => Ok((1, s[0])),
            2 => Ok((s[0], s[1])),
            _ => Err(shape_err(format!("expected matrix, got shape {:?}", s))),
        }
    }

    fn last_dim(&self, v: Var) -> usize {
        *self.nodes[v.0].shape.last().unwrap_or(&1)
    }

    // ----- forward ops -----

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims2(a)?;
        let (k2, n) = self.dims2(b)?;
        if k != k2 {
            return Err(shape_err(format!("matmul inner dims {} vs {}", k, k2)));
        }
        let mut out = vec![T::zero(); m * n];
        T::gemm(
            m,
            k,
            n,
            &self.nodes[a.0].value,
            k as isize,
            1,
            &self.nodes[b.0].value,
            n as isize,
            1,
            &mut out,
            false,
        );
        Ok(self.push(
            out,
            vec![m, n],
            Op::MatMul {
                a: a.0,
                b: b.0,
                m,
                k,
                n,
            },
        ))
    }

    /// Batched product of `[batch, m, k]` with `[batch, k, n]`
    /// (or `[batch, n, k]` when `trans_b`).
    pub fn bmm(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let sa = self.nodes[a.0].shape.clone();
        let sb = self.nodes[b.0].shape.clone();
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] {
            return Err(shape_err(format!("bmm shapes {:?} x {:?}", sa, sb)));
        }
        let (batch, m, k) = (sa[0], sa[1], sa[2]);
        let (kb, n) = if trans_b {
            (sb[2], sb[1])
        } else {
            (sb[1], sb[2])
        };
        if kb != k {
            return Err(shape_err(format!("bmm inner dims {} vs {}", k, kb)));
        }
        let av = &self.nodes[a.0].value;
        let bv = &self.nodes[b.0].value;
        let mut out = vec![T::zero(); batch * m * n];
        for bi in 0..batch {
            let ao = bi * m * k;
            let bo = bi * k * n;
            let co = bi * m * n;
            for i in 0..m {
                for j in 0..n {
                    let mut acc = T::zero();
                    for l in 0..k {
                        let bval = if trans_b {
                            bv[bo + j * k + l]
                        } else {
                            bv[bo + l * n + j]
                        };
                        acc = acc + av[ao + i * k + l] * bval;
                    }
                    out[co + i * n + j] = acc;
                }
            }
        }
        Ok(self.push(
            out,
            vec![batch, m, n],
            Op::Bmm {
                a: a.0,
                b: b.0,
                batch,
                m,
                k,
                n,
                trans_b,
            },
        ))
    }

    /// `x[m, n] + b[n]` broadcast over rows.
    pub fn add_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let n = self.last_dim(x);
        if self.nodes[b.0].value.len() != n {
            return Err(shape_err(format!(
                "bias of {} for width {}",
                self.nodes[b.0].value.len(),
                n
            )));
        }
        let bv = &self.nodes[b.0].value;
        let out: Vec<T> = self.nodes[x.0]
            .value
            .iter()
            .enumerate()
            .map(|(i, &v)| v + bv[i % n])
            .collect();
        let shape = self.nodes[x.0].shape.clone();
        Ok(self.push(out, shape, Op::AddBias { x: x.0, b: b.0 }))
    }

    /// `x[m, n] * r[n]` broadcast over rows.
    pub fn mul_row(&mut self, x: Var, r: Var) -> Result<Var> {
        let n = self.last_dim(x);
        if self.nodes[r.0].value.len() != n {
            return Err(shape_err("row multiplier width mismatch"));
        }
        let rv = &self.nodes[r.0].value;
        let out: Vec<T> = self.nodes[x.0]
            .value
            .iter()
            .enumerate()
            .map(|(i, &v)| v * rv[i % n])
            .collect();
        let shape = self.nodes[x.0].shape.clone();
        Ok(self.push(out, shape, Op::MulRow { x: x.0, r: r.0 }))
    }

    /// `x[m, n] * c[m]` broadcast over columns.
    pub fn mul_col(&mut self, x: Var, c: Var) -> Result<Var> {
        let (m, n) = self.dims2(x)?;
        if self.nodes[c.0].value.len() != m {
            return Err(shape_err("column multiplier height mismatch"));
        }
        let cv = &self.nodes[c.0].value;
        let out: Vec<T> = self.nodes[x.0]
            .value
            .iter()
            .enumerate()
            .map(|(i, &v)| v * cv[i / n])
            .collect();
        let shape = self.nodes[x.0].shape.clone();
        Ok(self.push(out, shape, Op::MulCol { x: x.0, c: c.0 }))
    }

    fn binary(&mut self, a: Var, b: Var, f: impl Fn(T, T) -> T) -> Result<(Vec<T>, Vec<usize>)> {
        if self.nodes[a.0].value.len() != self.nodes[b.0].value.len() {
            return Err(shape_err(format!(
                "elementwise shapes {:?} vs {:?}",
                self.nodes[a.0].shape, self.nodes[b.0].shape
            )));
        }
        let out = self.nodes[a.0]
            .value
            .iter()
            .zip(&self.nodes[b.0].value)
            .map(|(&x, &y)| f(x, y))
            .collect();
        Ok((out, self.nodes[a.0].shape.clone()))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (v, s) = self.binary(a, b, |x, y| x + y)?;
        Ok(self.push(v, s, Op::Add { a: a.0, b: b.0 }))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (v, s) = self.binary(a, b, |x, y| x - y)?;
        Ok(self.push(v, s, Op::Sub { a: a.0, b: b.0 }))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (v, s) = self.binary(a, b, |x, y| x * y)?;
        Ok(self.push(v, s, Op::Mul { a: a.0, b: b.0 }))
    }

    pub fn minimum(&mut self, a: Var, b: Var) -> Result<Var> {
        let (v, s) = self.binary(a, b, |x, y| if x <= y { x } else { y })?;
        Ok(self.push(v, s, Op::Minimum { a: a.0, b: b.0 }))
    }

    fn unary(&mut self, x: Var, f: impl Fn(T) -> T) -> (Vec<T>, Vec<usize>) {
        let n = &self.nodes[x.0];
        (n.value.iter().map(|&v| f(v)).collect(), n.shape.clone())
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let c = T::lit(c);
        let (v, s) = self.unary(x, |v| v * c);
        self.push(v, s, Op::Scale { x: x.0, c })
    }

    pub fn add_const(&mut self, x: Var, c: f64) -> Var {
        let c = T::lit(c);
        let (v, s) = self.unary(x, |v| v + c);
        self.push(v, s, Op::AddConst { x: x.0 })
    }

    pub fn elu(&mut self, x: Var) -> Var {
        let (v, s) = self.unary(x, elu);
        self.push(v, s, Op::Elu { x: x.0 })
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let (v, s) = self.unary(x, |v| T::one() / (T::one() + (-v).exp()));
        self.push(v, s, Op::Sigmoid { x: x.0 })
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let (v, s) = self.unary(x, |v| v.tanh());
        self.push(v, s, Op::Tanh { x: x.0 })
    }

    pub fn exp(&mut self, x: Var) -> Var {
        let (v, s) = self.unary(x, |v| v.exp());
        self.push(v, s, Op::Exp { x: x.0 })
    }

    pub fn square(&mut self, x: Var) -> Var {
        let (v, s) = self.unary(x, |v| v * v);
        self.push(v, s, Op::Square { x: x.0 })
    }

    pub fn clamp(&mut self, x: Var, lo: f64, hi: f64) -> Var {
        let (lo, hi) = (T::lit(lo), T::lit(hi));
        let (v, s) = self.unary(x, |v| v.max(lo).min(hi));
        self.push(v, s, Op::Clamp { x: x.0, lo, hi })
    }

    /// Softmax over the last dimension.
    pub fn softmax(&mut self, x: Var) -> Var {
        let n = self.last_dim(x);
        let node = &self.nodes[x.0];
        let mut out = node.value.clone();
        for row in out.chunks_mut(n) {
            let mx = row.iter().fold(T::neg_infinity(), |a, &b| a.max(b));
            let mut sum = T::zero();
            for v in row.iter_mut() {
                *v = (*v - mx).exp();
                sum = sum + *v;
            }
            for v in row.iter_mut() {
                *v = *v / sum;
            }
        }
        let shape = node.shape.clone();
        self.push(out, shape, Op::Softmax { x: x.0, n })
    }

    /// Normalises each row of the last dimension to zero mean, unit variance.
    pub fn layer_norm(&mut self, x: Var, eps: f64) -> Var {
        let n = self.last_dim(x);
        let eps = T::lit(eps);
        let node = &self.nodes[x.0];
        let nt = T::from_usize(n).unwrap();
        let mut out = node.value.clone();
        let mut inv_std = Vec::with_capacity(out.len() / n);
        for row in out.chunks_mut(n) {
            let mean = row.iter().copied().sum::<T>() / nt;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / nt;
            let is = T::one() / (var + eps).sqrt();
            for v in row.iter_mut() {
                *v = (*v - mean) * is;
            }
            inv_std.push(is);
        }
        let shape = node.shape.clone();
        self.push(out, shape, Op::LayerNorm { x: x.0, n, inv_std })
    }

    /// Divides each row by its Euclidean norm. Zero rows are rejected.
    pub fn l2_normalize(&mut self, x: Var) -> Result<Var> {
        let n = self.last_dim(x);
        let node = &self.nodes[x.0];
        let mut out = node.value.clone();
        let mut norms = Vec::with_capacity(out.len() / n);
        for row in out.chunks_mut(n) {
            let nrm = row.iter().map(|&v| v * v).sum::<T>().sqrt();
            if !(nrm > T::zero()) || !nrm.is_finite() {
                return Err(NnError::Degenerate(
                    "cannot normalise a zero-norm vector".into(),
                ));
            }
            for v in row.iter_mut() {
                *v = *v / nrm;
            }
            norms.push(nrm);
        }
        let shape = node.shape.clone();
        Ok(self.push(out, shape, Op::L2Normalize { x: x.0, n, norms }))
    }

    /// `[m, n] -> [m, 1]` row sums.
    pub fn sum_cols(&mut self, x: Var) -> Var {
        let n = self.last_dim(x);
        let out: Vec<T> = self.nodes[x.0]
            .value
            .chunks(n)
            .map(|r| r.iter().copied().sum())
            .collect();
        let m = out.len();
        self.push(out, vec![m, 1], Op::SumCols { x: x.0, n })
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s: T = self.nodes[x.0].value.iter().copied().sum();
        self.push(vec![s], vec![1], Op::SumAll { x: x.0 })
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let node = &self.nodes[x.0];
        let s: T = node.value.iter().copied().sum::<T>() / T::from_usize(node.value.len()).unwrap();
        self.push(vec![s], vec![1], Op::MeanAll { x: x.0 })
    }

    pub fn concat_cols(&mut self, xs: &[Var]) -> Result<Var> {
        if xs.is_empty() {
            return Err(shape_err("concat of nothing"));
        }
        let rows = self.dims2(xs[0])?.0;
        let mut widths = Vec::with_capacity(xs.len());
        for &x in xs {
            let (m, n) = self.dims2(x)?;
            if m != rows {
                return Err(shape_err(format!("concat rows {} vs {}", m, rows)));
            }
            widths.push((x.0, n));
        }
        let total: usize = widths.iter().map(|w| w.1).sum();
        let mut out = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for &(i, w) in &widths {
                out.extend_from_slice(&self.nodes[i].value[r * w..(r + 1) * w]);
            }
        }
        Ok(self.push(out, vec![rows, total], Op::ConcatCols { xs: widths, rows }))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, width: usize) -> Result<Var> {
        let (m, n) = self.dims2(x)?;
        if start + width > n {
            return Err(shape_err(format!(
                "column slice {}..{} of {}",
                start,
                start + width,
                n
            )));
        }
        let v = &self.nodes[x.0].value;
        let mut out = Vec::with_capacity(m * width);
        for r in 0..m {
            out.extend_from_slice(&v[r * n + start..r * n + start + width]);
        }
        Ok(self.push(
            out,
            vec![m, width],
            Op::SliceCols {
                x: x.0,
                start,
                width,
                cols: n,
            },
        ))
    }

    pub fn concat_rows(&mut self, xs: &[Var]) -> Result<Var> {
        if xs.is_empty() {
            return Err(shape_err("concat of nothing"));
        }
        let n = self.dims2(xs[0])?.1;
        let mut rows = 0;
        for &x in xs {
            let (m, w) = self.dims2(x)?;
            if w != n {
                return Err(shape_err(format!("row concat widths {} vs {}", w, n)));
            }
            rows += m;
        }
        let mut out = Vec::with_capacity(rows * n);
        for &x in xs {
            out.extend_from_slice(&self.nodes[x.0].value);
        }
        Ok(self.push(
            out,
            vec![rows, n],
            Op::ConcatRows {
                xs: xs.iter().map(|v| v.0).collect(),
            },
        ))
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (m, n) = self.dims2(x)?;
        if start + len > m {
            return Err(shape_err(format!(
                "row slice {}..{} of {}",
                start,
                start + len,
                m
            )));
        }
        let out = self.nodes[x.0].value[start * n..(start + len) * n].to_vec();
        Ok(self.push(
            out,
            vec![len, n],
            Op::SliceRows {
                x: x.0,
                offset: start * n,
            },
        ))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let numel: usize = shape.iter().product();
        if numel != self.nodes[x.0].value.len() {
            return Err(shape_err(format!(
                "reshape {:?} -> {:?}",
                self.nodes[x.0].shape, shape
            )));
        }
        let out = self.nodes[x.0].value.clone();
        Ok(self.push(out, shape.to_vec(), Op::Reshape { x: x.0 }))
    }

    /// Unfolds an NHWC image batch into `[batch * out_h * out_w, k * k * c]`
    /// patches, ordered `(ky, kx, c)`. Zero padding.
    pub fn im2col(&mut self, x: Var, geom: ConvGeom) -> Result<Var> {
        let expect = geom.batch * geom.height * geom.width * geom.channels;
        if self.nodes[x.0].value.len() != expect {
            return Err(shape_err(format!(
                "image batch has {} values, geometry needs {}",
                self.nodes[x.0].value.len(),
                expect
            )));
        }
        if geom.height + 2 * geom.pad < geom.kernel || geom.width + 2 * geom.pad < geom.kernel {
            return Err(shape_err("kernel larger than padded image"));
        }
        let (oh, ow, pl) = (geom.out_height(), geom.out_width(), geom.patch_len());
        let xv = &self.nodes[x.0].value;
        let mut out = vec![T::zero(); geom.batch * oh * ow * pl];
        let c = geom.channels;
        for b in 0..geom.batch {
            for oy in 0..oh {
                for ox in 0..ow {
                    let row = ((b * oh + oy) * ow + ox) * pl;
                    for ky in 0..geom.kernel {
                        let iy = (oy * geom.stride + ky) as isize - geom.pad as isize;
                        if iy < 0 || iy >= geom.height as isize {
                            continue;
                        }
                        for kx in 0..geom.kernel {
                            let ix = (ox * geom.stride + kx) as isize - geom.pad as isize;
                            if ix < 0 || ix >= geom.width as isize {
                                continue;
                            }
                            let src =
                                ((b * geom.height + iy as usize) * geom.width + ix as usize) * c;
                            let dst = row + (ky * geom.kernel + kx) * c;
                            out[dst..dst + c].copy_from_slice(&xv[src..src + c]);
                        }
                    }
                }
            }
        }
        Ok(self.push(
            out,
            vec![geom.batch * oh * ow, pl],
            Op::Im2Col { x: x.0, geom },
        ))
    }

    /// Constant copy of `x`: no gradient flows back through the result.
    pub fn stop_gradient(&mut self, x: Var) -> Var {
        let node = &self.nodes[x.0];
        let (v, s) = (node.value.clone(), node.shape.clone());
        self.nodes.push(Node {
            value: v,
            shape: s,
            op: Op::Leaf,
            requires_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    // ----- backward -----

    /// Accumulates d`loss`/d(node) for every node that requires grad.
    /// `loss` must hold a single element.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.nodes[loss.0].value.len() != 1 {
            return Err(shape_err("backward needs a scalar loss"));
        }
        let mut grads: Vec<Option<Vec<T>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![T::one()]);
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        self.grads = grads;
        Ok(())
    }

    fn backprop_node(&self, i: usize, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let nodes = &self.nodes;
        let want = |j: usize| nodes[j].requires_grad;
        macro_rules! acc {
            ($j:expr) => {{
                let j = $j;
                let len = nodes[j].value.len();
                grads[j].get_or_insert_with(|| vec![T::zero(); len])
            }};
        }
        let out = &nodes[i].value;
        match &nodes[i].op {
            Op::Leaf => {}
            &Op::MatMul { a, b, m, k, n } => {
                if want(a) {
                    // ga[m,k] += g[m,n] * b^T
                    let bv = &nodes[b].value;
                    let ga = acc!(a);
                    T::gemm(m, n, k, g, n as isize, 1, bv, 1, n as isize, ga, true);
                }
                if want(b) {
                    let av = &nodes[a].value;
                    let gb = acc!(b);
                    T::gemm(k, m, n, av, 1, k as isize, g, n as isize, 1, gb, true);
                }
            }
            &Op::Bmm {
                a,
                b,
                batch,
                m,
                k,
                n,
                trans_b,
            } => {
                let av = &nodes[a].value;
                let bv = &nodes[b].value;
                if want(a) {
                    let ga = acc!(a);
                    for bi in 0..batch {
                        for ii in 0..m {
                            for l in 0..k {
                                let mut s = T::zero();
                                for j in 0..n {
                                    let bval = if trans_b {
                                        bv[bi * k * n + j * k + l]
                                    } else {
                                        bv[bi * k * n + l * n + j]
                                    };
                                    s = s + g[bi * m * n + ii * n + j] * bval;
                                }
                                ga[bi * m * k + ii * k + l] = ga[bi * m * k + ii * k + l] + s;
                            }
                        }
                    }
                }
                if want(b) {
                    let gb = acc!(b);
                    for bi in 0..batch {
                        for l in 0..k {
                            for j in 0..n {
                                let mut s = T::zero();
                                for ii in 0..m {
                                    s = s + av[bi * m * k + ii * k + l]
                                        * g[bi * m * n + ii * n + j];
                                }
                                let idx = if trans_b {
                                    bi * k * n + j * k + l
                                } else {
                                    bi * k * n + l * n + j
                                };
                                gb[idx] = gb[idx] + s;
                            }
                        }
                    }
                }
            }
            &Op::AddBias { x, b } => {
                let n = nodes[b].value.len();
                if want(x) {
                    let gx = acc!(x);
                    for (a, &v) in gx.iter_mut().zip(g) {
                        *a = *a + v;
                    }
                }
                if want(b) {
                    let gb = acc!(b);
                    for (idx, &v) in g.iter().enumerate() {
                        gb[idx % n] = gb[idx % n] + v;
                    }
                }
            }
            &Op::MulRow { x, r } => {
                let n = nodes[r].value.len();
                let (xv, rv) = (&nodes[x].value, &nodes[r].value);
                if want(x) {
                    let gx = acc!(x);
                    for (idx, &v) in g.iter().enumerate() {
                        gx[idx] = gx[idx] + v * rv[idx % n];
                    }
                }
                if want(r) {
                    let gr = acc!(r);
                    for (idx, &v) in g.iter().enumerate() {
                        gr[idx % n] = gr[idx % n] + v * xv[idx];
                    }
                }
            }
            &Op::MulCol { x, c } => {
                let n = nodes[x].value.len() / nodes[c].value.len();
                let (xv, cv) = (&nodes[x].value, &nodes[c].value);
                if want(x) {
                    let gx = acc!(x);
                    for (idx, &v) in g.iter().enumerate() {
                        gx[idx] = gx[idx] + v * cv[idx / n];
                    }
                }
                if want(c) {
                    let gc = acc!(c);
                    for (idx, &v) in g.iter().enumerate() {
                        gc[idx / n] = gc[idx / n] + v * xv[idx];
                    }
                }
            }
            &Op::Add { a, b } => {
                for (j, sign) in [(a, T::one()), (b, T::one())] {
                    if want(j) {
                        let gj = acc!(j);
                        for (t, &v) in gj.iter_mut().zip(g) {
                            *t = *t + sign * v;
                        }
                    }
                }
            }
            &Op::Sub { a, b } => {
                for (j, sign) in [(a, T::one()), (b, -T::one())] {
                    if want(j) {
                        let gj = acc!(j);
                        for (t, &v) in gj.iter_mut().zip(g) {
                            *t = *t + sign * v;
                        }
                    }
                }
            }
            &Op::Mul { a, b } => {
                let (av, bv) = (&nodes[a].value, &nodes[b].value);
                if want(a) {
                    let ga = acc!(a);
                    for idx in 0..g.len() {
                        ga[idx] = ga[idx] + g[idx] * bv[idx];
                    }
                }
                if want(b) {
                    let gb = acc!(b);
                    for idx in 0..g.len() {
                        gb[idx] = gb[idx] + g[idx] * av[idx];
                    }
                }
            }
            &Op::Minimum { a, b } => {
                let (av, bv) = (&nodes[a].value, &nodes[b].value);
                if want(a) {
                    let ga = acc!(a);
                    for idx in 0..g.len() {
                        if av[idx] <= bv[idx] {
                            ga[idx] = ga[idx] + g[idx];
                        }
                    }
                }
                if want(b) {
                    let gb = acc!(b);
                    for idx in 0..g.len() {
                        if av[idx] > bv[idx] {
                            gb[idx] = gb[idx] + g[idx];
                        }
                    }
                }
            }
            &Op::Scale { x, c } => {
                let gx = acc!(x);
                for (t, &v) in gx.iter_mut().zip(g) {
                    *t = *t + c * v;
                }
            }
            &Op::AddConst { x } => {
                let gx = acc!(x);
                for (t, &v) in gx.iter_mut().zip(g) {
                    *t = *t + v;
                }
            }
            &Op::Elu { x } => {
                let xv = &nodes[x].value;
                let gx = acc!(x);
                for idx in 0..g.len() {
                    let d = if xv[idx] > T::zero() {
                        T::one()
                    } else {
                        out[idx] + T::one()
                    };
                    gx[idx] = gx[idx] + g[idx] * d;
                }
            }
            &Op::Sigmoid { x } => {
                let gx = acc!(x);
                for idx in 0..g.len() {
                    let s = out[idx];
                    gx[idx] = gx[idx] + g[idx] * s * (T::one() - s);
                }
            }
            &Op::Tanh { x } => {
                let gx = acc!(x);
                for idx in 0..g.len() {
                    let t = out[idx];
                    gx[idx] = gx[idx] + g[idx] * (T::one() - t * t);
                }
            }
            &Op::Exp { x } => {
                let gx = acc!(x);
                for idx in 0..g.len() {
                    gx[idx] = gx[idx] + g[idx] * out[idx];
                }
            }
            &Op::Square { x } => {
                let xv = &nodes[x].value;
                let gx = acc!(x);
                let two = T::lit(2.0);
                for idx in 0..g.len() {
                    gx[idx] = gx[idx] + g[idx] * two * xv[idx];
                }
            }
            &Op::Clamp { x, lo, hi } => {
                let xv = &nodes[x].value;
                let gx = acc!(x);
                for idx in 0..g.len() {
                    if xv[idx] >= lo && xv[idx] <= hi {
                        gx[idx] = gx[idx] + g[idx];
                    }
                }
            }
            &Op::Softmax { x, n } => {
                let gx = acc!(x);
                for r in 0..g.len() / n {
                    let (ys, gs) = (&out[r * n..(r + 1) * n], &g[r * n..(r + 1) * n]);
                    let dot: T = ys.iter().zip(gs).map(|(&y, &gv)| y * gv).sum();
                    for c in 0..n {
                        gx[r * n + c] = gx[r * n + c] + ys[c] * (gs[c] - dot);
                    }
                }
            }
            Op::LayerNorm { x, n, inv_std } => {
                let (x, n) = (*x, *n);
                let nt = T::from_usize(n).unwrap();
                let gx = acc!(x);
                for r in 0..g.len() / n {
                    let (ys, gs) = (&out[r * n..(r + 1) * n], &g[r * n..(r + 1) * n]);
                    let mg = gs.iter().copied().sum::<T>() / nt;
                    let mgy = ys.iter().zip(gs).map(|(&y, &gv)| y * gv).sum::<T>() / nt;
                    for c in 0..n {
                        gx[r * n + c] = gx[r * n + c] + inv_std[r] * (gs[c] - mg - ys[c] * mgy);
                    }
                }
            }
            Op::L2Normalize { x, n, norms } => {
                let (x, n) = (*x, *n);
                let gx = acc!(x);
                for r in 0..g.len() / n {
                    let (ys, gs) = (&out[r * n..(r + 1) * n], &g[r * n..(r + 1) * n]);
                    let dot: T = ys.iter().zip(gs).map(|(&y, &gv)| y * gv).sum();
                    for c in 0..n {
                        gx[r * n + c] = gx[r * n + c] + (gs[c] - ys[c] * dot) / norms[r];
                    }
                }
            }
            &Op::SumCols { x, n } => {
                let gx = acc!(x);
                for (idx, t) in gx.iter_mut().enumerate() {
                    *t = *t + g[idx / n];
                }
            }
            &Op::SumAll { x } => {
                let gx = acc!(x);
                for t in gx.iter_mut() {
                    *t = *t + g[0];
                }
            }
            &Op::MeanAll { x } => {
                let gx = acc!(x);
                let s = g[0] / T::from_usize(gx.len()).unwrap();
                for t in gx.iter_mut() {
                    *t = *t + s;
                }
            }
            Op::ConcatCols { xs, rows } => {
                let total: usize = xs.iter().map(|w| w.1).sum();
                let mut off = 0;
                for &(j, w) in xs {
                    if want(j) {
                        let gj = acc!(j);
                        for r in 0..*rows {
                            for c in 0..w {
                                gj[r * w + c] = gj[r * w + c] + g[r * total + off + c];
                            }
                        }
                    }
                    off += w;
                }
            }
            &Op::SliceCols {
                x,
                start,
                width,
                cols,
            } => {
                let gx = acc!(x);
                for r in 0..g.len() / width {
                    for c in 0..width {
                        gx[r * cols + start + c] = gx[r * cols + start + c] + g[r * width + c];
                    }
                }
            }
            Op::ConcatRows { xs } => {
                let mut off = 0;
                for &j in xs {
                    let len = nodes[j].value.len();
                    if want(j) {
                        let gj = acc!(j);
                        for c in 0..len {
                            gj[c] = gj[c] + g[off + c];
                        }
                    }
                    off += len;
                }
            }
            &Op::SliceRows { x, offset } => {
                let gx = acc!(x);
                for (c, &v) in g.iter().enumerate() {
                    gx[offset + c] = gx[offset + c] + v;
                }
            }
            &Op::Reshape { x } => {
                let gx = acc!(x);
                for (t, &v) in gx.iter_mut().zip(g) {
                    *t = *t + v;
                }
            }
            &Op::Im2Col { x, geom } => {
                let gx = acc!(x);
                let (oh, ow, pl, c) = (
                    geom.out_height(),
                    geom.out_width(),
                    geom.patch_len(),
                    geom.channels,
                );
                for b in 0..geom.batch {
                    for oy in 0..oh {
                        for ox in 0..ow {
                            let row = ((b * oh + oy) * ow + ox) * pl;
                            for ky in 0..geom.kernel {
                                let iy = (oy * geom.stride + ky) as isize - geom.pad as isize;
                                if iy < 0 || iy >= geom.height as isize {
                                    continue;
                                }
                                for kx in 0..geom.kernel {
                                    let ix = (ox * geom.stride + kx) as isize - geom.pad as isize;
                                    if ix < 0 || ix >= geom.width as isize {
                                        continue;
                                    }
                                    let dst = ((b * geom.height + iy as usize) * geom.width
                                        + ix as usize)
                                        * c;
                                    let src = row + (ky * geom.kernel + kx) * c;
                                    for ch in 0..c {
                                        gx[dst + ch] = gx[dst + ch] + g[src + ch];
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}
