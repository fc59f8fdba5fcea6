//! Dense linear algebra, seeded randomness, cosine geometry and the
//! finite-difference gradient oracle shared by the rest of the crate.

mod matrix;
mod rng;

pub use matrix::{dot, norm, Matrix};
pub use rng::RngState;

use crate::error::{HuseError, Result};

pub const DEFAULT_NORM_EPSILON: f64 = 1e-12;

/// Saved state of an [`l2_normalize_rows`] call.
#[derive(Clone, Debug)]
pub struct NormCache {
    input: Matrix,
    /// Raw row norms, before epsilon is added.
    norms: Vec<f64>,
    epsilon: f64,
}

impl NormCache {
    pub fn norms(&self) -> &[f64] {
        &self.norms
    }
}

/// Maps each row `r` to `r / (‖r‖ + epsilon)`.
pub fn l2_normalize_rows(x: &Matrix, epsilon: f64) -> Result<(Matrix, NormCache)> {
    if epsilon.is_nan() || epsilon <= 0.0 {
        return Err(HuseError::invalid(format!(
            "normalization epsilon must be positive, got {epsilon}"
        )));
    }
    let mut out = x.clone();
    let mut norms = Vec::with_capacity(x.rows());
    for r in 0..x.rows() {
        let n = norm(x.row(r));
        norms.push(n);
        let denom = n + epsilon;
        out.row_mut(r).iter_mut().for_each(|v| *v /= denom);
    }
    Ok((
        out,
        NormCache {
            input: x.clone(),
            norms,
            epsilon,
        },
    ))
}

/// Gradient with respect to the input of [`l2_normalize_rows`].
///
/// Per row, with `s = ‖x‖` and `n = s + epsilon`:
/// `g / n - x (x·g) / (s n²)`.
pub fn l2_normalize_backward(cache: &NormCache, grad_out: &Matrix) -> Result<Matrix> {
    if cache.input.shape() != grad_out.shape() {
        return Err(HuseError::Shape {
            op: "l2_normalize_backward",
            left: cache.input.shape(),
            right: grad_out.shape(),
        });
    }
    let mut grad_in = Matrix::zeros(grad_out.rows(), grad_out.cols());
    for r in 0..grad_out.rows() {
        let x = cache.input.row(r);
        let g = grad_out.row(r);
        let s = cache.norms[r];
        let n = s + cache.epsilon;
        let proj = if s > 0.0 {
            dot(x, g) / (s * n * n)
        } else {
            0.0
        };
        for ((out, &xi), &gi) in grad_in.row_mut(r).iter_mut().zip(x).zip(g) {
            *out = gi / n - xi * proj;
        }
    }
    Ok(grad_in)
}

/// `1 - u·v / (‖u‖‖v‖)`, in `[0, 2]`.
pub fn cosine_distance(u: &[f64], v: &[f64]) -> Result<f64> {
    if u.len() != v.len() {
        return Err(HuseError::Shape {
            op: "cosine_distance",
            left: (1, u.len()),
            right: (1, v.len()),
        });
    }
    let nu = norm(u);
    let nv = norm(v);
    if nu == 0.0 || nv == 0.0 {
        return Err(HuseError::invalid("cosine distance of a zero-norm vector"));
    }
    Ok(cosine_distance_unchecked(u, v, nu, nv))
}

#[inline]
pub(crate) fn cosine_distance_unchecked(u: &[f64], v: &[f64], nu: f64, nv: f64) -> f64 {
    let cos = (dot(u, v) / (nu * nv)).clamp(-1.0, 1.0);
    1.0 - cos
}

/// Adds `coef * ∂d(u, v)/∂u` into `out`, where `d` is cosine distance.
#[inline]
pub(crate) fn accumulate_cosine_distance_grad(
    u: &[f64],
    v: &[f64],
    nu: f64,
    nv: f64,
    coef: f64,
    out: &mut [f64],
) {
    // ∂cos/∂u = v/(‖u‖‖v‖) - cos·u/‖u‖²,  d = 1 - cos
    let inv = 1.0 / (nu * nv);
    let cos = dot(u, v) * inv;
    let a = -coef * inv;
    let b = coef * cos / (nu * nu);
    for ((o, &ui), &vi) in out.iter_mut().zip(u).zip(v) {
        *o += a * vi + b * ui;
    }
}

/// Central differences `(f(x + h e) - f(x - h e)) / 2h` for every entry of `x`.
pub fn finite_diff_grad<F>(mut f: F, x: &Matrix, h: f64) -> Matrix
where
    F: FnMut(&Matrix) -> f64,
{
    let mut probe = x.clone();
    let mut grad = Matrix::zeros(x.rows(), x.cols());
    for i in 0..x.as_slice().len() {
        let orig = probe.as_slice()[i];
        probe.as_mut_slice()[i] = orig + h;
        let up = f(&probe);
        probe.as_mut_slice()[i] = orig - h;
        let down = f(&probe);
        probe.as_mut_slice()[i] = orig;
        grad.as_mut_slice()[i] = (up - down) / (2.0 * h);
    }
    grad
}

/// `‖a - b‖ / max(‖a‖, ‖b‖)` over all entries; `0` when both are zero.
pub fn relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let diff: f64 = analytic
        .iter()
        .zip(numeric)
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        .sqrt();
    let scale = norm(analytic).max(norm(numeric));
    if scale == 0.0 {
        0.0
    } else {
        diff / scale
    }
}

/// Stable row-wise softmax.
pub fn softmax_rows(logits: &Matrix) -> Matrix {
    let mut out = logits.clone();
    for r in 0..out.rows() {
        let row = out.row_mut(r);
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut total = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            total += *v;
        }
        row.iter_mut().for_each(|v| *v /= total);
    }
    out
}

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}
