// SPDX-License-Identifier: MIT OR Apache-2.0

//! Scalar functions routed through `libm` so results do not depend on the
//! platform's libc.

pub use libm::{erf, exp, log as ln, sqrt, tanh};

pub const SQRT_2: f64 = core::f64::consts::SQRT_2;
pub const FRAC_1_SQRT_2PI: f64 = 0.398_942_280_401_432_7;

/// Exact (erf-based) GELU.
#[inline]
pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + erf(x / SQRT_2))
}

/// d/dx of [`gelu`]: `Phi(x) + x * phi(x)`.
#[inline]
pub fn gelu_grad(x: f64) -> f64 {
    let cdf = 0.5 * (1.0 + erf(x / SQRT_2));
    let pdf = FRAC_1_SQRT_2PI * exp(-0.5 * x * x);
    cdf + x * pdf
}

/// Euclidean norm with sequential accumulation.
#[inline]
pub fn norm(v: &[f64]) -> f64 {
    sqrt(dot(v, v))
}

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = 0.0;
    for (x, y) in a.iter().zip(b) {
        acc += x * y;
    }
    acc
}

/// Cosine similarity, `None` when either side is the zero vector.
///
/// Computed as `dot / sqrt(|a|^2 |b|^2)`, which returns exactly `1.0` for
/// bit-identical inputs and exactly `-1.0` for exact negations.
pub fn cosine(a: &[f64], b: &[f64]) -> Option<f64> {
    let na = dot(a, a);
    let nb = dot(b, b);
    if na == 0.0 || nb == 0.0 {
        return None;
    }
    let c = dot(a, b) / sqrt(na * nb);
    Some(c.clamp(-1.0, 1.0))
}
