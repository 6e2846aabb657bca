//! Minimal tensor math with a reverse-mode tape.
//!
//! Values live in plain row-major [`Tensor`]s. Differentiable computation is
//! recorded on a [`Graph`] that is rebuilt for every training step; inference
//! paths call the slice kernels in [`kernels`] directly so both share the
//! exact same arithmetic.

pub mod graph;
pub mod kernels;
pub mod optim;

use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::{AddAssign, DivAssign, MulAssign, SubAssign};

use num_traits::Float;

use crate::{Error, Result};

pub use graph::{Graph, Var};
pub use kernels::KeyLists;
pub use optim::AdamW;

/// Floating point element type. Implemented for `f32` (training and
/// benchmarking) and `f64` (gradient checks).
pub trait Real:
    Float
    + AddAssign
    + SubAssign
    + MulAssign
    + DivAssign
    + Sum
    + Default
    + Debug
    + Display
    + Send
    + Sync
    + 'static
{
    fn of(v: f64) -> Self;
    fn f64(self) -> f64;
}

impl Real for f32 {
    #[inline]
    fn of(v: f64) -> Self {
        v as f32
    }
    #[inline]
    fn f64(self) -> f64 {
        self as f64
    }
}

impl Real for f64 {
    #[inline]
    fn of(v: f64) -> Self {
        v
    }
    #[inline]
    fn f64(self) -> f64 {
        self
    }
}

/// Shape-tagged grid of values in row-major order.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<R> {
    shape: Vec<usize>,
    data: Vec<R>,
}

impl<R: Real> Tensor<R> {
    pub fn new(shape: Vec<usize>, data: Vec<R>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::dim("tensor", &shape, &[data.len()]));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![R::zero(); n],
        }
    }

    pub fn scalar(v: R) -> Self {
        Tensor {
            shape: Vec::new(),
            data: vec![v],
        }
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> R) -> Self {
        let n: usize = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: (0..n).map(&mut f).collect(),
        }
    }

    /// Two-dimensional tensor from nested rows. Panics on ragged input.
    pub fn from_rows(rows: &[Vec<R>]) -> Self {
        let cols = rows.first().map_or(0, |r| r.len());
        assert!(rows.iter().all(|r| r.len() == cols), "ragged rows");
        Tensor {
            shape: vec![rows.len(), cols],
            data: rows.iter().flatten().copied().collect(),
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[R] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [R] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<R> {
        self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    /// Number of rows when viewed as a matrix (leading dimension).
    pub fn rows(&self) -> usize {
        match self.shape.len() {
            0 => 1,
            1 => 1,
            _ => self.shape[0],
        }
    }

    /// Row length when viewed as a matrix (product of trailing dimensions).
    pub fn cols(&self) -> usize {
        match self.shape.len() {
            0 => 1,
            1 => self.shape[0],
            _ => self.shape[1..].iter().product(),
        }
    }

    pub fn row(&self, i: usize) -> &[R] {
        let c = self.cols();
        &self.data[i * c..(i + 1) * c]
    }

    pub fn item(&self) -> R {
        self.data[0]
    }

    pub fn reshape(mut self, shape: Vec<usize>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != self.data.len() {
            return Err(Error::dim("reshape", &self.shape, &shape));
        }
        self.shape = shape;
        Ok(self)
    }

    pub fn cast<S: Real>(&self) -> Tensor<S> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| S::of(v.f64())).collect(),
        }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// `a · b` for `a: [m×k]`, `b: [k×p]`.
pub fn matmul<R: Real>(a: &Tensor<R>, b: &Tensor<R>) -> Result<Tensor<R>> {
    if a.shape.len() != 2 || b.shape.len() != 2 || a.shape[1] != b.shape[0] {
        return Err(Error::dim("matmul", &a.shape, &b.shape));
    }
    let (m, k, p) = (a.shape[0], a.shape[1], b.shape[1]);
    let mut out = vec![R::zero(); m * p];
    kernels::matmul(&a.data, &b.data, m, k, p, &mut out);
    Tensor::new(vec![m, p], out)
}

/// Probability vector `softmax(x / temperature)`, computed with max subtraction.
pub fn softmax<R: Real>(x: &[R], temperature: R) -> Result<Vec<R>> {
    if !(temperature > R::zero()) {
        return Err(Error::Contract(format!(
            "softmax temperature must be positive, got {temperature}"
        )));
    }
    if x.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric("non-finite softmax input".into()));
    }
    let mut out = x.to_vec();
    kernels::softmax_in_place(&mut out, temperature);
    Ok(out)
}

/// `−Σ target · log softmax(pred)`.
pub fn cross_entropy<R: Real>(pred_logits: &[R], target_probs: &[R]) -> Result<R> {
    if pred_logits.len() != target_probs.len() {
        return Err(Error::dim(
            "cross_entropy",
            &[pred_logits.len()],
            &[target_probs.len()],
        ));
    }
    let lse = kernels::log_sum_exp(pred_logits);
    let mut loss = R::zero();
    for (&l, &t) in pred_logits.iter().zip(target_probs) {
        if t != R::zero() {
            loss -= t * (l - lse);
        }
    }
    Ok(loss)
}

/// Mean smooth-L1 (Huber with transition `beta`) of `a − b`.
pub fn smooth_l1<R: Real>(a: &[R], b: &[R], beta: R) -> Result<R> {
    if a.len() != b.len() {
        return Err(Error::dim("smooth_l1", &[a.len()], &[b.len()]));
    }
    if a.is_empty() {
        return Ok(R::zero());
    }
    let total: R = a
        .iter()
        .zip(b)
        .map(|(&x, &y)| kernels::smooth_l1_elem(x - y, beta))
        .sum();
    Ok(total / R::of(a.len() as f64))
}
