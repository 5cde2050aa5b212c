//! Array kernels shared by the forward, reverse and jet passes.

use crate::netspec::{ConvGeom, Phi};

#[inline]
pub(crate) fn phi(p: Phi, z: f64) -> f64 {
    match p {
        Phi::AbRelu { a, b } => {
            if z > 0.0 {
                b * z
            } else {
                a * z
            }
        }
        Phi::Erf => libm::erf(z),
    }
}

/// First derivative; ABRelu takes the left slope at the kink.
#[inline]
pub(crate) fn phi_d1(p: Phi, z: f64) -> f64 {
    match p {
        Phi::AbRelu { a, b } => {
            if z > 0.0 {
                b
            } else {
                a
            }
        }
        Phi::Erf => std::f64::consts::FRAC_2_SQRT_PI * (-z * z).exp(),
    }
}

/// Second derivative; zero almost everywhere for ABRelu.
#[inline]
pub(crate) fn phi_d2(p: Phi, z: f64) -> f64 {
    match p {
        Phi::AbRelu { .. } => 0.0,
        Phi::Erf => -2.0 * z * phi_d1(p, z),
    }
}

/// Patch matrix of `n` images: row `(i, out pixel)`, column `(dy, dx, c)`.
pub(crate) fn im2col(x: &[f64], n: usize, geom: &ConvGeom, cin: usize) -> Vec<f64> {
    let (pin, pout, d) = (geom.in_pixels(), geom.out_pixels(), geom.window());
    let cols = d * cin;
    let taps = geom.taps();
    let mut out = vec![0.0; n * pout * cols];
    for i in 0..n {
        let img = &x[i * pin * cin..(i + 1) * pin * cin];
        for (o, t) in taps.iter().enumerate() {
            let row = &mut out[(i * pout + o) * cols..(i * pout + o + 1) * cols];
            for (k, src) in t.iter().enumerate() {
                if let Some(s) = src {
                    row[k * cin..(k + 1) * cin].copy_from_slice(&img[s * cin..(s + 1) * cin]);
                }
            }
        }
    }
    out
}

/// Adjoint of [`im2col`], accumulated into `dx`.
pub(crate) fn col2im_add(cols: &[f64], n: usize, geom: &ConvGeom, cin: usize, dx: &mut [f64]) {
    let (pin, pout, d) = (geom.in_pixels(), geom.out_pixels(), geom.window());
    let width = d * cin;
    let taps = geom.taps();
    for i in 0..n {
        let img = &mut dx[i * pin * cin..(i + 1) * pin * cin];
        for (o, t) in taps.iter().enumerate() {
            let row = &cols[(i * pout + o) * width..(i * pout + o + 1) * width];
            for (k, src) in t.iter().enumerate() {
                if let Some(s) = src {
                    for (a, b) in img[s * cin..(s + 1) * cin].iter_mut().zip(&row[k * cin..(k + 1) * cin]) {
                        *a += b;
                    }
                }
            }
        }
    }
}

/// Window average with padded taps counted as zeros.
pub(crate) fn avg_pool(x: &[f64], n: usize, geom: &ConvGeom, c: usize) -> Vec<f64> {
    let (pin, pout) = (geom.in_pixels(), geom.out_pixels());
    let inv = 1.0 / geom.window() as f64;
    let taps = geom.taps();
    let mut out = vec![0.0; n * pout * c];
    for i in 0..n {
        let img = &x[i * pin * c..(i + 1) * pin * c];
        for (o, t) in taps.iter().enumerate() {
            let dst = &mut out[(i * pout + o) * c..(i * pout + o + 1) * c];
            for s in t.iter().flatten() {
                for (a, b) in dst.iter_mut().zip(&img[s * c..(s + 1) * c]) {
                    *a += b * inv;
                }
            }
        }
    }
    out
}

pub(crate) fn avg_pool_adjoint_add(g: &[f64], n: usize, geom: &ConvGeom, c: usize, dx: &mut [f64]) {
    let (pin, pout) = (geom.in_pixels(), geom.out_pixels());
    let inv = 1.0 / geom.window() as f64;
    let taps = geom.taps();
    for i in 0..n {
        let img = &mut dx[i * pin * c..(i + 1) * pin * c];
        for (o, t) in taps.iter().enumerate() {
            let src = &g[(i * pout + o) * c..(i * pout + o + 1) * c];
            for s in t.iter().flatten() {
                for (a, b) in img[s * c..(s + 1) * c].iter_mut().zip(src) {
                    *a += b * inv;
                }
            }
        }
    }
}

pub(crate) fn global_avg_pool(x: &[f64], n: usize, pixels: usize, c: usize) -> Vec<f64> {
    let mut out = vec![0.0; n * c];
    let inv = 1.0 / pixels as f64;
    for i in 0..n {
        let dst = &mut out[i * c..(i + 1) * c];
        for p in 0..pixels {
            for (a, b) in dst.iter_mut().zip(&x[(i * pixels + p) * c..(i * pixels + p + 1) * c]) {
                *a += b * inv;
            }
        }
    }
    out
}

pub(crate) fn global_avg_pool_adjoint_add(g: &[f64], n: usize, pixels: usize, c: usize, dx: &mut [f64]) {
    let inv = 1.0 / pixels as f64;
    for i in 0..n {
        let src = &g[i * c..(i + 1) * c];
        for p in 0..pixels {
            for (a, b) in dx[(i * pixels + p) * c..(i * pixels + p + 1) * c].iter_mut().zip(src) {
                *a += b * inv;
            }
        }
    }
}

pub(crate) fn add_into(dst: &mut [f64], src: &[f64]) {
    for (a, b) in dst.iter_mut().zip(src) {
        *a += b;
    }
}

/// Adds `scale · bias[j]` to column `j` of every row.
pub(crate) fn add_bias(out: &mut [f64], bias: &[f64], scale: f64) {
    if scale == 0.0 {
        return;
    }
    for row in out.chunks_exact_mut(bias.len()) {
        for (o, b) in row.iter_mut().zip(bias) {
            *o += scale * b;
        }
    }
}

/// Column sums of a row-major matrix with `cols` columns.
pub(crate) fn col_sums(m: &[f64], cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; cols];
    for row in m.chunks_exact(cols) {
        add_into(&mut out, row);
    }
    out
}
