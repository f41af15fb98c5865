use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::graph::{Graph, Var};
use crate::tensor::{Scalar, Tensor};
use crate::{NnError, Result};

/// Index of a parameter inside a [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Init {
    Zeros,
    Constant(f32),
    /// U(-sqrt(6 / fan_in), sqrt(6 / fan_in)) with `fan_in` = first dimension.
    HeUniform,
    /// Each `[rows, rows]` block along the columns is orthogonal.
    OrthogonalBlocks,
    Normal(f32),
}

/// Named parameters with insertion-stable ordering.
#[derive(Debug, Clone)]
pub struct ParamStore<T: Scalar = f32> {
    names: Vec<String>,
    tensors: Vec<Tensor<T>>,
    index: HashMap<String, usize>,
}

impl<T: Scalar> Default for ParamStore<T> {
    fn default() -> Self {
        Self {
            names: Vec::new(),
            tensors: Vec::new(),
            index: HashMap::new(),
        }
    }
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: &str, tensor: Tensor<T>) -> Result<ParamId> {
        if self.index.contains_key(name) {
            return Err(NnError::Param(format!("duplicate parameter `{}`", name)));
        }
        self.index.insert(name.to_string(), self.names.len());
        self.names.push(name.to_string());
        self.tensors.push(tensor);
        Ok(ParamId(self.names.len() - 1))
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).map(|&i| ParamId(i))
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.tensors[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.names.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.names.iter().map(|s| s.as_str()).zip(&self.tensors)
    }

    pub fn numel(&self) -> usize {
        self.tensors.iter().map(|t| t.numel()).sum()
    }

    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        ParamStore {
            names: self.names.clone(),
            tensors: self.tensors.iter().map(|t| t.cast()).collect(),
            index: self.index.clone(),
        }
    }

    /// Copies values from `other`, which must have identical names and shapes.
    pub fn load_from(&mut self, other: &ParamStore<T>) -> Result<()> {
        if other.names != self.names {
            return Err(NnError::Param("parameter sets differ".into()));
        }
        for (dst, src) in self.tensors.iter_mut().zip(&other.tensors) {
            if dst.shape() != src.shape() {
                return Err(NnError::Param("parameter shapes differ".into()));
            }
            dst.data_mut().copy_from_slice(src.data());
        }
        Ok(())
    }
}

/// Deterministic parameter construction.
pub struct Initializer {
    rng: ChaCha8Rng,
}

impl Initializer {
    pub fn new(seed: u64) -> Self {
        Self {
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn tensor(&mut self, shape: &[usize], init: Init) -> Tensor<f32> {
        let numel: usize = shape.iter().product();
        let data = match init {
            Init::Zeros => vec![0.0; numel],
            Init::Constant(c) => vec![c; numel],
            Init::HeUniform => {
                let fan_in = shape.first().copied().unwrap_or(1).max(1) as f32;
                let bound = (6.0 / fan_in).sqrt();
                (0..numel)
                    .map(|_| self.rng.gen_range(-bound..bound))
                    .collect()
            }
            Init::Normal(std) => (0..numel)
                .map(|_| std * self.rng.sample::<f32, _>(StandardNormal))
                .collect(),
            Init::OrthogonalBlocks => {
                assert_eq!(shape.len(), 2, "orthogonal init needs a matrix");
                let (rows, cols) = (shape[0], shape[1]);
                assert_eq!(cols % rows, 0, "columns must be a multiple of rows");
                let mut out = vec![0.0f32; rows * cols];
                for blk in 0..cols / rows {
                    let q = self.orthogonal(rows);
                    for r in 0..rows {
                        for c in 0..rows {
                            out[r * cols + blk * rows + c] = q[r * rows + c] as f32;
                        }
                    }
                }
                out
            }
        };
        Tensor::new(shape, data).expect("initializer shape")
    }

    /// Gram-Schmidt on a Gaussian matrix; returns row-major `n x n`.
    fn orthogonal(&mut self, n: usize) -> Vec<f64> {
        let mut cols: Vec<Vec<f64>> = Vec::with_capacity(n);
        while cols.len() < n {
            let mut v: Vec<f64> = (0..n).map(|_| self.rng.sample(StandardNormal)).collect();
            for u in &cols {
                let d: f64 = v.iter().zip(u).map(|(a, b)| a * b).sum();
                for (a, b) in v.iter_mut().zip(u) {
                    *a -= d * b;
                }
            }
            let nrm = v.iter().map(|a| a * a).sum::<f64>().sqrt();
            if nrm > 1e-8 {
                v.iter_mut().for_each(|a| *a /= nrm);
                cols.push(v);
            }
        }
        let mut out = vec![0.0; n * n];
        for (c, col) in cols.iter().enumerate() {
            for r in 0..n {
                out[r * n + c] = col[r];
            }
        }
        out
    }
}

/// Gradient buffers aligned with a [`ParamStore`].
#[derive(Debug, Clone)]
pub struct Grads {
    pub values: Vec<Vec<f32>>,
}

impl Grads {
    pub fn zeros_like<T: Scalar>(store: &ParamStore<T>) -> Self {
        Self {
            values: store.tensors.iter().map(|t| vec![0.0; t.numel()]).collect(),
        }
    }

    pub fn global_norm(&self) -> f32 {
        self.values
            .iter()
            .flatten()
            .map(|v| (*v as f64) * (*v as f64))
            .sum::<f64>()
            .sqrt() as f32
    }

    pub fn scale(&mut self, c: f32) {
        self.values.iter_mut().flatten().for_each(|v| *v *= c);
    }

    pub fn get(&self, id: ParamId) -> &[f32] {
        &self.values[id.0]
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().flatten().all(|v| v.is_finite())
    }
}

/// A graph plus lazily bound parameter leaves.
pub struct Ctx<'a, T: Scalar> {
    pub graph: Graph<T>,
    store: &'a ParamStore<T>,
    bound: Vec<Option<Var>>,
    trainable: bool,
}

impl<'a, T: Scalar> Ctx<'a, T> {
    /// Parameters become gradient-carrying leaves.
    pub fn train(store: &'a ParamStore<T>) -> Self {
        Self {
            graph: Graph::new(),
            store,
            bound: vec![None; store.len()],
            trainable: true,
        }
    }

    /// Parameters become constants.
    pub fn infer(store: &'a ParamStore<T>) -> Self {
        Self {
            graph: Graph::new(),
            store,
            bound: vec![None; store.len()],
            trainable: false,
        }
    }

    pub fn store(&self) -> &ParamStore<T> {
        self.store
    }

    pub fn p(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.bound[id.0] {
            return v;
        }
        let t = self.store.get(id);
        let v = if self.trainable {
            self.graph.param(t.data().to_vec(), t.shape())
        } else {
            self.graph.input(t.data().to_vec(), t.shape())
        }
        .expect("stored tensor is well formed");
        self.bound[id.0] = Some(v);
        v
    }

    /// Parameter leaf if it was used in this graph.
    pub fn bound(&self, id: ParamId) -> Option<Var> {
        self.bound[id.0]
    }

    /// Adds the gradients of the last backward pass to `grads`.
    pub fn accumulate(&self, grads: &mut Grads) {
        for (i, b) in self.bound.iter().enumerate() {
            if let Some(v) = b {
                if let Some(g) = self.graph.grad(*v) {
                    for (dst, &src) in grads.values[i].iter_mut().zip(g) {
                        *dst += src.as_f32();
                    }
                }
            }
        }
    }

    /// Gradient of a parameter after backward, in the store's precision.
    pub fn param_grad(&self, id: ParamId) -> Option<Vec<T>> {
        let v = self.bound[id.0]?;
        Some(match self.graph.grad(v) {
            Some(g) => g.to_vec(),
            None => vec![T::zero(); self.store.get(id).numel()],
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn initialization_is_deterministic() {
        let a = Initializer::new(9).tensor(&[8, 4], Init::HeUniform);
        let b = Initializer::new(9).tensor(&[8, 4], Init::HeUniform);
        assert_eq!(a.data(), b.data());
        let c = Initializer::new(10).tensor(&[8, 4], Init::HeUniform);
        assert_ne!(a.data(), c.data());
        let bound = (6.0f32 / 8.0).sqrt();
        assert!(a.data().iter().all(|v| v.abs() <= bound));
    }

    #[test]
    fn orthogonal_blocks_are_orthonormal() {
        let t = Initializer::new(3).tensor(&[5, 10], Init::OrthogonalBlocks);
        for blk in 0..2 {
            for i in 0..5 {
                for j in 0..5 {
                    let d: f32 = (0..5)
                        .map(|r| t.data()[r * 10 + blk * 5 + i] * t.data()[r * 10 + blk * 5 + j])
                        .sum();
                    let want = if i == j { 1.0 } else { 0.0 };
                    assert!((d - want).abs() < 1e-5);
                }
            }
        }
    }

    #[test]
    fn duplicate_names_rejected() {
        let mut s = ParamStore::<f32>::new();
        s.insert("a", Tensor::zeros(&[1])).unwrap();
        assert!(s.insert("a", Tensor::zeros(&[1])).is_err());
    }
}
