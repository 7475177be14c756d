//! Dense f64 tensors with a define-by-run reverse-mode tape.
//!
//! [`Tensor`] is a plain value: a shape and a row-major buffer. Differentiable
//! computation happens on a [`Tape`], which owns every intermediate value and
//! hands out [`Var`] handles. A fresh tape is built for every forward pass.

mod gradcheck;
pub mod kernels;
mod tape;

pub use gradcheck::{grad_check, max_relative_error};
pub use tape::{Gradients, Tape, Var};

use crate::error::{shape_mismatch, Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.contains(&0) {
            return Err(Error::InvalidArgument {
                op: "tensor",
                reason: format!("zero extent in shape {shape:?}"),
            });
        }
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::InvalidArgument {
                op: "tensor",
                reason: format!("shape {shape:?} needs {n} elements, got {}", data.len()),
            });
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, 1.0)
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        assert!(shape.iter().all(|&e| e > 0), "zero extent in {shape:?}");
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![value; n],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Self {
            shape: vec![1],
            data: vec![value],
        }
    }

    pub fn vector(data: Vec<f64>) -> Self {
        Self {
            shape: vec![data.len()],
            data,
        }
    }

    /// Builds a matrix from nested rows; panics on ragged input.
    pub fn matrix(rows: &[&[f64]]) -> Self {
        let cols = rows[0].len();
        assert!(rows.iter().all(|r| r.len() == cols), "ragged matrix rows");
        Self {
            shape: vec![rows.len(), cols],
            data: rows.iter().flat_map(|r| r.iter().copied()).collect(),
        }
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

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    /// Rows and columns of a 2-D tensor; a 1-D tensor is treated as one row.
    pub fn dims2(&self) -> Result<(usize, usize)> {
        match self.shape.as_slice() {
            [c] => Ok((1, *c)),
            [r, c] => Ok((*r, *c)),
            s => Err(Error::InvalidArgument {
                op: "dims2",
                reason: format!("expected 1-D or 2-D tensor, got {s:?}"),
            }),
        }
    }

    pub fn reshape(&self, shape: Vec<usize>) -> Result<Tensor> {
        Tensor::new(shape, self.data.clone())
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let cols = *self.shape.last().unwrap();
        &self.data[i * cols..(i + 1) * cols]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        assert_eq!(self.shape, other.shape);
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

/// Matrix product of two 2-D tensors.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (m, k) = strict_dims2(a, "matmul")?;
    let (k2, n) = strict_dims2(b, "matmul")?;
    if k != k2 {
        return Err(shape_mismatch("matmul", a.shape(), b.shape()));
    }
    let mut out = vec![0.0; m * n];
    kernels::matmul(a.data(), b.data(), &mut out, m, k, n);
    Tensor::new(vec![m, n], out)
}

/// Softmax along `axis`.
pub fn softmax(x: &Tensor, axis: usize) -> Result<Tensor> {
    if axis >= x.shape().len() {
        return Err(Error::InvalidArgument {
            op: "softmax",
            reason: format!("axis {axis} out of range for shape {:?}", x.shape()),
        });
    }
    let mut out = x.data().to_vec();
    kernels::softmax_axis(&mut out, x.shape(), axis);
    Tensor::new(x.shape().to_vec(), out)
}

/// Elementwise `x * Phi(x)` with the exact Gaussian CDF.
pub fn gelu(x: &Tensor) -> Tensor {
    Tensor {
        shape: x.shape.clone(),
        data: x.data.iter().map(|&v| kernels::gelu(v)).collect(),
    }
}

/// Row-wise layer normalisation over the trailing axis.
pub fn layer_norm(x: &Tensor, gamma: &Tensor, beta: &Tensor, eps: f64) -> Result<Tensor> {
    if eps <= 0.0 {
        return Err(Error::InvalidArgument {
            op: "layer_norm",
            reason: format!("eps must be positive, got {eps}"),
        });
    }
    let d = *x.shape().last().unwrap();
    if gamma.len() != d || beta.len() != d {
        return Err(shape_mismatch("layer_norm", x.shape(), gamma.shape()));
    }
    let rows = x.len() / d;
    let mut out = vec![0.0; x.len()];
    let mut xhat = vec![0.0; x.len()];
    let mut rstd = vec![0.0; rows];
    kernels::layer_norm(
        x.data(),
        gamma.data(),
        beta.data(),
        eps,
        d,
        &mut out,
        &mut xhat,
        &mut rstd,
    );
    Tensor::new(x.shape().to_vec(), out)
}

/// Cosine similarity of two equally sized tensors viewed as flat vectors.
pub fn cosine_similarity(a: &Tensor, b: &Tensor) -> Result<f64> {
    if a.len() != b.len() {
        return Err(shape_mismatch("cosine_similarity", a.shape(), b.shape()));
    }
    kernels::cosine(a.data(), b.data()).map(|(c, _, _)| c)
}

/// `-ln(probs[true_class])`, clamping the probability at `1e-12`.
///
/// The second element reports whether the clamp fired.
pub fn cross_entropy(probs: &Tensor, true_class: usize) -> Result<(f64, bool)> {
    if true_class >= probs.len() {
        return Err(Error::IndexOutOfRange {
            index: true_class,
            extent: probs.len(),
        });
    }
    let p = probs.data()[true_class];
    let clamped = p < kernels::PROB_FLOOR;
    Ok((-p.max(kernels::PROB_FLOOR).ln(), clamped))
}

fn strict_dims2(t: &Tensor, op: &'static str) -> Result<(usize, usize)> {
    match t.shape() {
        [r, c] => Ok((*r, *c)),
        s => Err(Error::InvalidArgument {
            op,
            reason: format!("expected a 2-D tensor, got shape {s:?}"),
        }),
    }
}
