//! One translation rule per layer type.
//!
//! Each rule consumes a [`KernelPair`] describing the covariance of a layer's
//! input and returns the pair describing its output. Rules operate on every
//! stored block independently, so a block's value never depends on which
//! other pairs happen to be in the batch.

use super::blocks::{CovBlocks, Layout, Pairs};
use super::transforms::{transform, transform_value};
use super::KernelPair;
use crate::batch::Batch;
use crate::error::{Error, Result};
use crate::netspec::{ConvGeom, Padding, Phi, Representation};

fn rep_error(message: impl Into<String>) -> Error {
    Error::Representation { path: String::new(), message: message.into() }
}

/// Covariance of the raw inputs: inner products averaged over channels
/// (over all features when `representation` is `VectorOnly`). The NTK is zero.
pub fn input_kernel(x1: &Batch, x2: Option<&Batch>, representation: Representation) -> Result<KernelPair> {
    input_kernel_with(x1, x2, representation, true)
}

pub(crate) fn input_kernel_with(
    x1: &Batch,
    x2: Option<&Batch>,
    representation: Representation,
    with_ntk: bool,
) -> Result<KernelPair> {
    if let Some(x2) = x2 {
        if x2.example_shape() != x1.example_shape() {
            return Err(Error::Shape(format!(
                "batches have example shapes {:?} and {:?}",
                x1.example_shape(),
                x2.example_shape()
            )));
        }
    }
    let (h, w, c) = x1.example_shape();
    let layout = match representation {
        Representation::VectorOnly => Layout::Vector,
        Representation::SpatialMarginal => Layout::Marginal { h, w },
        Representation::SpatialFull => Layout::Full { h, w },
    };
    let pairs = match x2 {
        Some(x2) => Pairs::Cross { n1: x1.len(), n2: x2.len() },
        None => Pairs::Symmetric { n: x1.len() },
    };
    let other = x2.unwrap_or(x1);
    let block = |a: &[f64], b: &[f64], out: &mut [f64]| input_block(layout, c, a, b, out);

    let mut nngp = CovBlocks::zeros(layout, pairs.len());
    for ((i, j), out) in pairs.iter().zip(nngp.blocks_mut()) {
        block(x1.row(i), other.row(j), out);
    }
    let self_var = |x: &Batch| {
        let mut v = CovBlocks::zeros(layout, x.len());
        for (i, out) in v.blocks_mut().enumerate() {
            block(x.row(i), x.row(i), out);
        }
        v
    };
    let ntk = with_ntk.then(|| CovBlocks::zeros(layout, pairs.len()));
    Ok(KernelPair { var1: self_var(x1), var2: x2.map(self_var), nngp, ntk, pairs, is_gaussian: false })
}

fn input_block(layout: Layout, c: usize, a: &[f64], b: &[f64], out: &mut [f64]) {
    let dot = |u: &[f64], v: &[f64]| u.iter().zip(v).map(|(x, y)| x * y).sum::<f64>();
    match layout {
        Layout::Vector => out[0] = dot(a, b) / a.len() as f64,
        Layout::Marginal { .. } => {
            for (p, o) in out.iter_mut().enumerate() {
                *o = dot(&a[p * c..(p + 1) * c], &b[p * c..(p + 1) * c]) / c as f64;
            }
        }
        Layout::Full { .. } => {
            let n = layout.pixels();
            for p in 0..n {
                let ap = &a[p * c..(p + 1) * c];
                for q in 0..n {
                    out[p * n + q] = dot(ap, &b[q * c..(q + 1) * c]) / c as f64;
                }
            }
        }
    }
}

/// `K' = σw²K + σb²`, `Θ' = K' + σw²Θ`.
pub fn dense_translate(mut k: KernelPair, w_std: f64, b_std: f64) -> KernelPair {
    let (w2, b2) = (w_std * w_std, b_std * b_std);
    k.nngp.scale_shift(w2, b2);
    if let Some(ntk) = &mut k.ntk {
        for (t, &g) in ntk.data_mut().iter_mut().zip(k.nngp.data()) {
            *t = g + w2 * *t;
        }
    }
    k.var1.scale_shift(w2, b2);
    if let Some(v) = &mut k.var2 {
        v.scale_shift(w2, b2);
    }
    k.is_gaussian = true;
    k
}

/// `K' = T(K)`, `Θ' = Ṫ(K) ⊙ Θ`, using the self-variances of both inputs.
pub fn nonlin_translate(mut k: KernelPair, phi: Phi) -> Result<KernelPair> {
    if !k.is_gaussian {
        return Err(Error::NotGaussian { path: String::new() });
    }
    let layout = k.nngp.layout();
    let n = layout.pixels();
    let block_len = layout.block_len();
    // Self-variance of pixel p for an input, given that input's var block.
    let diag = |v: &[f64], p: usize| match layout {
        Layout::Vector => v[0],
        Layout::Marginal { .. } => v[p],
        Layout::Full { .. } => v[p * n + p],
    };
    // Variance pixel indices for entry e of a block.
    let pix = |e: usize| match layout {
        Layout::Full { .. } => (e / n, e % n),
        _ => (e, e),
    };
    {
        let var1 = &k.var1;
        let var2 = k.var2.as_ref().unwrap_or(var1);
        match &mut k.ntk {
            Some(ntk) => {
                for (((i, j), g), t) in k.pairs.iter().zip(k.nngp.blocks_mut()).zip(ntk.blocks_mut()) {
                    let (v1, v2) = (var1.block(i), var2.block(j));
                    for e in 0..block_len {
                        let (p, q) = pix(e);
                        let (tv, td) = transform(phi, diag(v1, p), diag(v2, q), g[e]);
                        g[e] = tv;
                        t[e] *= td;
                    }
                }
            }
            None => {
                for ((i, j), g) in k.pairs.iter().zip(k.nngp.blocks_mut()) {
                    let (v1, v2) = (var1.block(i), var2.block(j));
                    for (e, ge) in g.iter_mut().enumerate() {
                        let (p, q) = pix(e);
                        *ge = transform_value(phi, diag(v1, p), diag(v2, q), *ge);
                    }
                }
            }
        }
    }
    let update_var = |v: &mut CovBlocks| {
        for b in v.blocks_mut() {
            let old = b.to_vec();
            for (e, be) in b.iter_mut().enumerate() {
                let (p, q) = pix(e);
                *be = transform_value(phi, diag(&old, p), diag(&old, q), *be);
            }
        }
    };
    update_var(&mut k.var1);
    if let Some(v) = &mut k.var2 {
        update_var(v);
    }
    k.is_gaussian = false;
    Ok(k)
}

/// Convolution over the spatial axes of `k`.
pub fn conv_translate(
    k: KernelPair,
    filter_shape: (usize, usize),
    strides: (usize, usize),
    padding: Padding,
    w_std: f64,
    b_std: f64,
) -> Result<KernelPair> {
    let (h, w) = k.spatial_shape().ok_or_else(|| rep_error("convolution needs a spatial kernel"))?;
    let geom = ConvGeom::new(h, w, filter_shape, strides, padding)
        .ok_or_else(|| Error::Shape(format!("filter {filter_shape:?} larger than input {h}x{w}")))?;
    conv_geom(k, &geom, w_std, b_std)
}

/// Flat tap table: `taps[o * window + d]` is the input pixel read by output
/// pixel `o` at filter offset `d`, or `usize::MAX` for zero padding.
fn flat_taps(geom: &ConvGeom) -> Vec<usize> {
    geom.taps().into_iter().flatten().map(|t| t.unwrap_or(usize::MAX)).collect()
}

/// `𝒜`: average over filter offsets, shifting both pixel indices by the
/// same offset.
fn shift_average(layout: Layout, geom: &ConvGeom, taps: &[usize], src: CovBlocks) -> CovBlocks {
    let d = geom.window();
    let (pin, pout) = (geom.in_pixels(), geom.out_pixels());
    let out_layout = layout.with_spatial(geom.out_h, geom.out_w);
    let inv = 1.0 / d as f64;
    src.into_mapped(out_layout, |a, o| match layout {
        Layout::Vector => unreachable!(),
        Layout::Marginal { .. } => {
            for (po, out) in o.iter_mut().enumerate() {
                let t = &taps[po * d..(po + 1) * d];
                *out = t.iter().filter(|&&s| s != usize::MAX).map(|&s| a[s]).sum::<f64>() * inv;
            }
        }
        Layout::Full { .. } => {
            for po in 0..pout {
                let tp = &taps[po * d..(po + 1) * d];
                for qo in 0..pout {
                    let tq = &taps[qo * d..(qo + 1) * d];
                    let mut s = 0.0;
                    for (&x, &y) in tp.iter().zip(tq) {
                        if x != usize::MAX && y != usize::MAX {
                            s += a[x * pin + y];
                        }
                    }
                    o[po * pout + qo] = s * inv;
                }
            }
        }
    })
}

pub(crate) fn conv_geom(k: KernelPair, geom: &ConvGeom, w_std: f64, b_std: f64) -> Result<KernelPair> {
    let layout = k.nngp.layout();
    if layout == Layout::Vector {
        return Err(rep_error("convolution needs a spatial kernel"));
    }
    let taps = flat_taps(geom);
    let (w2, b2) = (w_std * w_std, b_std * b_std);
    let apply = |c: CovBlocks| {
        let mut out = shift_average(layout, geom, &taps, c);
        out.scale_shift(w2, b2);
        out
    };
    let KernelPair { nngp, ntk, var1, var2, pairs, .. } = k;
    let nngp = apply(nngp);
    let ntk = ntk.map(|t| {
        let mut out = shift_average(layout, geom, &taps, t);
        for (o, &g) in out.data_mut().iter_mut().zip(nngp.data()) {
            *o = g + w2 * *o;
        }
        out
    });
    Ok(KernelPair { var1: apply(var1), var2: var2.map(apply), nngp, ntk, pairs, is_gaussian: true })
}

/// Mean over the same-pixel diagonal. A vector kernel passes through.
pub fn flatten_translate(k: KernelPair) -> KernelPair {
    let layout = k.nngp.layout();
    let n = layout.pixels();
    let reduce = |c: CovBlocks| match layout {
        Layout::Vector => c,
        Layout::Marginal { .. } => c.into_mapped(Layout::Vector, |a, o| o[0] = a.iter().sum::<f64>() / n as f64),
        Layout::Full { .. } => {
            c.into_mapped(Layout::Vector, |a, o| o[0] = (0..n).map(|p| a[p * n + p]).sum::<f64>() / n as f64)
        }
    };
    KernelPair {
        nngp: reduce(k.nngp),
        ntk: k.ntk.map(reduce),
        var1: reduce(k.var1),
        var2: k.var2.map(reduce),
        pairs: k.pairs,
        is_gaussian: k.is_gaussian,
    }
}

/// Average pooling applied to both pixel axes. Padded taps count as zeros
/// and every window is normalized by its full size.
pub fn avgpool_translate(
    k: KernelPair,
    window: (usize, usize),
    strides: (usize, usize),
    padding: Padding,
) -> Result<KernelPair> {
    let (h, w) = k.spatial_shape().ok_or_else(|| rep_error("average pooling needs a spatial kernel"))?;
    let geom = ConvGeom::new(h, w, window, strides, padding)
        .ok_or_else(|| Error::Shape(format!("window {window:?} larger than input {h}x{w}")))?;
    avgpool_geom(k, &geom)
}

pub(crate) fn avgpool_geom(k: KernelPair, geom: &ConvGeom) -> Result<KernelPair> {
    if !matches!(k.nngp.layout(), Layout::Full { .. }) {
        return Err(rep_error("average pooling needs the full spatial covariance"));
    }
    let d = geom.window();
    let taps = flat_taps(geom);
    let (pin, pout) = (geom.in_pixels(), geom.out_pixels());
    let inv = 1.0 / d as f64;
    let out_layout = Layout::Full { h: geom.out_h, w: geom.out_w };
    let pool = |c: &CovBlocks| {
        let mut tmp = vec![0.0; pin * pout];
        c.map_blocks(out_layout, |a, o| {
            // Pool columns, then rows.
            for x in 0..pin {
                let row = &a[x * pin..(x + 1) * pin];
                for qo in 0..pout {
                    let s: f64 = taps[qo * d..(qo + 1) * d].iter().filter(|&&t| t != usize::MAX).map(|&t| row[t]).sum();
                    tmp[x * pout + qo] = s * inv;
                }
            }
            o.fill(0.0);
            for po in 0..pout {
                let orow = &mut o[po * pout..(po + 1) * pout];
                for &t in taps[po * d..(po + 1) * d].iter().filter(|&&t| t != usize::MAX) {
                    for (ov, tv) in orow.iter_mut().zip(&tmp[t * pout..(t + 1) * pout]) {
                        *ov += tv;
                    }
                }
                for ov in orow.iter_mut() {
                    *ov *= inv;
                }
            }
        })
    };
    Ok(KernelPair {
        nngp: pool(&k.nngp),
        ntk: k.ntk.as_ref().map(pool),
        var1: pool(&k.var1),
        var2: k.var2.as_ref().map(pool),
        pairs: k.pairs,
        is_gaussian: k.is_gaussian,
    })
}

/// Mean over all pixel pairs.
pub fn globalavgpool_translate(k: KernelPair) -> Result<KernelPair> {
    if !matches!(k.nngp.layout(), Layout::Full { .. }) {
        return Err(rep_error("global average pooling needs the full spatial covariance"));
    }
    let reduce = |c: &CovBlocks| c.map_blocks(Layout::Vector, |a, o| o[0] = a.iter().sum::<f64>() / a.len() as f64);
    Ok(KernelPair {
        nngp: reduce(&k.nngp),
        ntk: k.ntk.as_ref().map(reduce),
        var1: reduce(&k.var1),
        var2: k.var2.as_ref().map(reduce),
        pairs: k.pairs,
        is_gaussian: k.is_gaussian,
    })
}

/// `n` copies of the same kernel.
pub fn fanout_translate(k: KernelPair, n: usize) -> Vec<KernelPair> {
    vec![k; n]
}

/// Elementwise sum. Valid when the branches are independent given the
/// input, which holds whenever each branch carries its own freshly
/// initialized affine layer (or all but one are the identity).
pub fn faninsum_translate(ks: Vec<KernelPair>) -> Result<KernelPair> {
    let mut it = ks.into_iter();
    let mut acc = it.next().ok_or_else(|| Error::InvalidArgument("FanInSum of no branches".into()))?;
    for k in it {
        if k.nngp.layout() != acc.nngp.layout() || k.pairs != acc.pairs || k.ntk.is_some() != acc.ntk.is_some() {
            return Err(Error::Shape("FanInSum branches have different kernel shapes".into()));
        }
        let add = |a: &mut CovBlocks, b: &CovBlocks| {
            for (x, y) in a.data_mut().iter_mut().zip(b.data()) {
                *x += y;
            }
        };
        add(&mut acc.nngp, &k.nngp);
        if let (Some(a), Some(b)) = (&mut acc.ntk, &k.ntk) {
            add(a, b);
        }
        add(&mut acc.var1, &k.var1);
        if let (Some(a), Some(b)) = (&mut acc.var2, &k.var2) {
            add(a, b);
        }
        acc.is_gaussian &= k.is_gaussian;
    }
    Ok(acc)
}

/// `K' = K + (1/ρ − 1)·Diag(K)` with keep probability `ρ`. `Diag` keeps the
/// entries pairing an input with itself at the same pixel.
pub fn dropout_translate(mut k: KernelPair, rate: f64) -> KernelPair {
    let extra = 1.0 / rate - 1.0;
    let layout = k.nngp.layout();
    let n = layout.pixels();
    let bump = |b: &mut [f64]| match layout {
        Layout::Full { .. } => {
            for p in 0..n {
                b[p * n + p] *= 1.0 + extra;
            }
        }
        _ => b.iter_mut().for_each(|v| *v *= 1.0 + extra),
    };
    if k.pairs.is_symmetric() {
        let diag_slots: Vec<usize> = k.pairs.iter().enumerate().filter(|(_, (i, j))| i == j).map(|(s, _)| s).collect();
        let bl = layout.block_len();
        for &s in &diag_slots {
            bump(&mut k.nngp.data_mut()[s * bl..(s + 1) * bl]);
            if let Some(t) = &mut k.ntk {
                bump(&mut t.data_mut()[s * bl..(s + 1) * bl]);
            }
        }
    }
    k.var1.blocks_mut().for_each(bump);
    if let Some(v) = &mut k.var2 {
        v.blocks_mut().for_each(bump);
    }
    k.is_gaussian = false;
    k
}

/// Drop everything off the same-pixel diagonal.
pub fn to_marginal(k: KernelPair) -> KernelPair {
    let Layout::Full { h, w } = k.nngp.layout() else {
        return k;
    };
    let n = h * w;
    let reduce = |c: &CovBlocks| {
        c.map_blocks(Layout::Marginal { h, w }, |a, o| {
            for (p, v) in o.iter_mut().enumerate() {
                *v = a[p * n + p];
            }
        })
    };
    KernelPair {
        nngp: reduce(&k.nngp),
        ntk: k.ntk.as_ref().map(reduce),
        var1: reduce(&k.var1),
        var2: k.var2.as_ref().map(reduce),
        pairs: k.pairs,
        is_gaussian: k.is_gaussian,
    }
}
