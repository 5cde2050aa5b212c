//! Closed-form Gaussian expectations of nonlinearities.
//!
//! For `(u, v) ~ N(0, [[s11, s12], [s12, s22]])`:
//! `T = E[φ(u)φ(v)]` and `Ṫ = E[φ'(u)φ'(v)]`.
//!
//! ABRelu (`φ(x) = a·min(x, 0) + b·max(x, 0)`) uses the arc-cosine kernel,
//! with `θ = arccos(s12 / √(s11·s22))`:
//!
//! ```text
//! T = √(s11·s22)/(2π) · [(a² + b²)(sin θ + (π − θ) cos θ) − 2ab(sin θ − θ cos θ)]
//! Ṫ = [(a² + b²)(π − θ) + 2abθ] / (2π)
//! ```
//!
//! Erf uses
//!
//! ```text
//! T = (2/π) · arcsin(2·s12 / √((1 + 2·s11)(1 + 2·s22)))
//! Ṫ = (4/π) / √((1 + 2·s11)(1 + 2·s22) − 4·s12²)
//! ```

use std::f64::consts::{FRAC_1_PI, PI};

use crate::netspec::Phi;

/// `(T, Ṫ)` for one covariance triple.
#[inline]
pub fn transform(phi: Phi, s11: f64, s22: f64, s12: f64) -> (f64, f64) {
    match phi {
        Phi::AbRelu { a, b } => ab_relu(a, b, s11, s22, s12),
        Phi::Erf => erf(s11, s22, s12),
    }
}

/// `T` only.
#[inline]
pub fn transform_value(phi: Phi, s11: f64, s22: f64, s12: f64) -> f64 {
    match phi {
        Phi::AbRelu { a, b } => ab_relu(a, b, s11, s22, s12).0,
        Phi::Erf => erf_value(s11, s22, s12),
    }
}

#[inline]
fn ab_relu(a: f64, b: f64, s11: f64, s22: f64, s12: f64) -> (f64, f64) {
    // Degenerate Gaussian: one side is identically zero.
    if s11 <= 0.0 || s22 <= 0.0 {
        return (0.0, 0.0);
    }
    let norm = (s11 * s22).sqrt();
    let cos = (s12 / norm).clamp(-1.0, 1.0);
    let theta = cos.acos();
    let sin = (1.0 - cos * cos).max(0.0).sqrt();
    let sq = a * a + b * b;
    let ab = a * b;
    let t = norm * 0.5 * FRAC_1_PI * (sq * (sin + (PI - theta) * cos) - 2.0 * ab * (sin - theta * cos));
    let tdot = (sq * (PI - theta) + 2.0 * ab * theta) * 0.5 * FRAC_1_PI;
    (t, tdot)
}

#[inline]
fn erf_value(s11: f64, s22: f64, s12: f64) -> f64 {
    let prod = (1.0 + 2.0 * s11) * (1.0 + 2.0 * s22);
    2.0 * FRAC_1_PI * (2.0 * s12 / prod.sqrt()).clamp(-1.0, 1.0).asin()
}

#[inline]
fn erf(s11: f64, s22: f64, s12: f64) -> (f64, f64) {
    let prod = (1.0 + 2.0 * s11) * (1.0 + 2.0 * s22);
    let t = 2.0 * FRAC_1_PI * (2.0 * s12 / prod.sqrt()).clamp(-1.0, 1.0).asin();
    let tdot = 4.0 * FRAC_1_PI / (prod - 4.0 * s12 * s12).sqrt();
    (t, tdot)
}
