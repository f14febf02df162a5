//! Dense row-major `f64` arrays and named parameters.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// A dense n-dimensional array in row-major order.
///
/// `grad`, when present, always has the same length as `data`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
    requires_grad: bool,
    #[serde(skip)]
    grad: Option<Vec<f64>>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::Shape(format!(
                "shape {shape:?} holds {n} values but {} were supplied",
                data.len()
            )));
        }
        Ok(Self {
            shape,
            data,
            requires_grad: false,
            grad: None,
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![0.0; n],
            requires_grad: false,
            grad: None,
        }
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let mut t = Self::zeros(shape);
        t.data.fill(value);
        t
    }

    pub fn scalar(value: f64) -> Self {
        Self {
            shape: vec![1],
            data: vec![value],
            requires_grad: false,
            grad: None,
        }
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        Self::new(vec![rows, cols], data)
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::Shape("ragged rows".into()));
        }
        Self::matrix(rows.len(), cols, rows.concat())
    }

    pub fn identity(n: usize) -> Self {
        let mut t = Self::zeros(&[n, n]);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    /// Gaussian entries with the given standard deviation.
    pub fn randn<R: Rng + ?Sized>(shape: &[usize], std: f64, rng: &mut R) -> Self {
        let normal = Normal::new(0.0, std).expect("std must be finite and non-negative");
        let mut t = Self::zeros(shape);
        for v in &mut t.data {
            *v = normal.sample(rng);
        }
        t
    }

    pub fn with_requires_grad(mut self, flag: bool) -> Self {
        self.requires_grad = flag;
        self
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn rows(&self) -> usize {
        self.shape.first().copied().unwrap_or(1)
    }

    /// Product of all trailing dimensions (the row width for a matrix).
    pub fn cols(&self) -> usize {
        self.shape.iter().skip(1).product()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let c = self.cols();
        &self.data[i * c..(i + 1) * c]
    }

    pub fn at(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols() + j]
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn set_requires_grad(&mut self, flag: bool) {
        self.requires_grad = flag;
        if !flag {
            self.grad = None;
        }
    }

    pub fn grad(&self) -> Option<&[f64]> {
        self.grad.as_deref()
    }

    /// Accumulates `g` into the gradient buffer, allocating it on first use.
    pub fn accumulate_grad(&mut self, g: &[f64]) -> Result<()> {
        if g.len() != self.data.len() {
            return Err(Error::dim("accumulate_grad", &self.shape, &[g.len()]));
        }
        match &mut self.grad {
            Some(buf) => buf.iter_mut().zip(g).for_each(|(a, b)| *a += b),
            None => self.grad = Some(g.to_vec()),
        }
        Ok(())
    }

    pub fn zero_grad(&mut self) {
        self.grad = None;
    }

    pub fn take_grad(&mut self) -> Option<Vec<f64>> {
        self.grad.take()
    }

    pub fn reshape(mut self, shape: Vec<usize>) -> Result<Self> {
        if shape.iter().product::<usize>() != self.data.len() {
            return Err(Error::dim("reshape", &self.shape, &shape));
        }
        self.shape = shape;
        Ok(self)
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        self.data.iter().zip(&other.data).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max)
    }
}

/// A tensor with a stable, unique name inside its owning model.
#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub name: String,
    pub value: Tensor,
}

impl Param {
    pub fn new(name: impl Into<String>, value: Tensor) -> Self {
        Self { name: name.into(), value }
    }

    /// `std`-Gaussian initialisation.
    pub fn randn<R: Rng + ?Sized>(name: impl Into<String>, shape: &[usize], std: f64, rng: &mut R) -> Self {
        Self::new(name, Tensor::randn(shape, std, rng))
    }

    pub fn zeros(name: impl Into<String>, shape: &[usize]) -> Self {
        Self::new(name, Tensor::zeros(shape))
    }

    pub fn ones(name: impl Into<String>, shape: &[usize]) -> Self {
        Self::new(name, Tensor::full(shape, 1.0))
    }
}

/// Anything that owns parameters.
pub trait Module {
    fn visit_params(&self, f: &mut dyn FnMut(&Param));
    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut Param));

    fn set_trainable(&mut self, flag: bool) {
        self.visit_params_mut(&mut |p| p.value.set_requires_grad(flag));
    }

    fn param_count(&self) -> usize {
        let mut n = 0;
        self.visit_params(&mut |p| n += p.value.len());
        n
    }

    /// SHA-256 over every parameter's name, shape and little-endian bytes,
    /// in visit order.
    fn fingerprint(&self) -> String {
        let mut hasher = Sha256::new();
        self.visit_params(&mut |p| {
            hasher.update(p.name.as_bytes());
            for d in p.value.shape() {
                hasher.update((*d as u64).to_le_bytes());
            }
            for v in p.value.data() {
                hasher.update(v.to_le_bytes());
            }
        });
        hasher.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }

    fn zero_grad(&mut self) {
        self.visit_params_mut(&mut |p| p.value.zero_grad());
    }

    fn has_any_grad(&self) -> bool {
        let mut any = false;
        self.visit_params(&mut |p| any |= p.value.grad().is_some());
        any
    }
}
