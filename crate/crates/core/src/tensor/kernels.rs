//! Slice-level numeric kernels shared by the value API and the tape.
//!
//! Every kernel computes each output row from the matching input row alone,
//! in a fixed loop order, so results are bitwise reproducible and independent
//! of how rows are batched.

use crate::error::{Error, Result};

pub const PROB_FLOOR: f64 = 1e-12;

/// `c[m×n] = a[m×k] · b[k×n]`, overwriting `c`.
pub fn matmul(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    for i in 0..m {
        let crow = &mut c[i * n..(i + 1) * n];
        crow.fill(0.0);
        let arow = &a[i * k..(i + 1) * k];
        for (t, &av) in arow.iter().enumerate() {
            let brow = &b[t * n..(t + 1) * n];
            for (cv, &bv) in crow.iter_mut().zip(brow) {
                *cv += av * bv;
            }
        }
    }
}

/// `c[m×n] += a[m×k] · b[n×k]ᵀ`.
pub fn matmul_nt_acc(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            c[i * n + j] += dot(arow, brow);
        }
    }
}

/// `c[k×n] += a[m×k]ᵀ · b[m×n]`.
pub fn matmul_tn_acc(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let brow = &b[i * n..(i + 1) * n];
        for (t, &av) in arow.iter().enumerate() {
            let crow = &mut c[t * n..(t + 1) * n];
            for (cv, &bv) in crow.iter_mut().zip(brow) {
                *cv += av * bv;
            }
        }
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// In-place softmax over `axis` of a row-major buffer with the given shape.
pub fn softmax_axis(data: &mut [f64], shape: &[usize], axis: usize) {
    let len = shape[axis];
    let inner: usize = shape[axis + 1..].iter().product();
    let outer: usize = shape[..axis].iter().product();
    for o in 0..outer {
        for i in 0..inner {
            let base = o * len * inner + i;
            let mut max = f64::NEG_INFINITY;
            for t in 0..len {
                max = max.max(data[base + t * inner]);
            }
            let mut sum = 0.0;
            for t in 0..len {
                let e = (data[base + t * inner] - max).exp();
                data[base + t * inner] = e;
                sum += e;
            }
            for t in 0..len {
                data[base + t * inner] /= sum;
            }
        }
    }
}

/// Softmax vector-Jacobian product: `gx = y ⊙ (gy − Σ gy⊙y)` along `axis`.
pub fn softmax_axis_backward(y: &[f64], gy: &[f64], gx: &mut [f64], shape: &[usize], axis: usize) {
    let len = shape[axis];
    let inner: usize = shape[axis + 1..].iter().product();
    let outer: usize = shape[..axis].iter().product();
    for o in 0..outer {
        for i in 0..inner {
            let base = o * len * inner + i;
            let mut s = 0.0;
            for t in 0..len {
                s += gy[base + t * inner] * y[base + t * inner];
            }
            for t in 0..len {
                let idx = base + t * inner;
                gx[idx] += y[idx] * (gy[idx] - s);
            }
        }
    }
}

/// Row-wise layer norm over rows of width `d`. Also records the normalised
/// values and reciprocal standard deviations needed by the backward pass.
#[allow(clippy::too_many_arguments)]
pub fn layer_norm(
    x: &[f64],
    gamma: &[f64],
    beta: &[f64],
    eps: f64,
    d: usize,
    out: &mut [f64],
    xhat: &mut [f64],
    rstd: &mut [f64],
) {
    for (r, row) in x.chunks_exact(d).enumerate() {
        let mean = row.iter().sum::<f64>() / d as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
        let rs = 1.0 / (var + eps).sqrt();
        rstd[r] = rs;
        for j in 0..d {
            let h = (row[j] - mean) * rs;
            xhat[r * d + j] = h;
            out[r * d + j] = h * gamma[j] + beta[j];
        }
    }
}

pub fn normal_cdf(x: f64) -> f64 {
    0.5 * (1.0 + libm::erf(x / std::f64::consts::SQRT_2))
}

pub fn normal_pdf(x: f64) -> f64 {
    (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt()
}

pub fn gelu(x: f64) -> f64 {
    x * normal_cdf(x)
}

pub fn gelu_grad(x: f64) -> f64 {
    normal_cdf(x) + x * normal_pdf(x)
}

/// Returns `(cos, ‖a‖, ‖b‖)`.
pub fn cosine(a: &[f64], b: &[f64]) -> Result<(f64, f64, f64)> {
    let na2 = dot(a, a);
    let nb2 = dot(b, b);
    if na2 == 0.0 || nb2 == 0.0 {
        return Err(Error::ZeroNorm);
    }
    // sqrt(s * s) == s exactly in binary floating point, so identical inputs give exactly 1.
    let c = (dot(a, b) / (na2 * nb2).sqrt()).clamp(-1.0, 1.0);
    Ok((c, na2.sqrt(), nb2.sqrt()))
}
