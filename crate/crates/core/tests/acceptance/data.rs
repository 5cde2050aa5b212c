use std::path::{Path, PathBuf};

use nalgebra::DMatrix;
use tangent_kernels::batching::read_ntkm;
use tangent_kernels::netspec::zoo;
use tangent_kernels::predict::{gp_inference, marginal_nll, Mode};
use tangent_kernels::{Batch, Get, InputShape, KernelFn, KernelFunction, NetSpec};

use crate::{Outcome, Verdict};

/// Directory with `train_x.ntkm`, `train_y.ntkm`, `test_x.ntkm` and
/// `test_y.ntkm` (8×8×3 images flattened HWC, one-hot labels), as written by
/// `scripts/cifar_to_ntkm.py`.
fn data_dir() -> Option<PathBuf> {
    let dir = std::env::var_os("TANGENT_KERNELS_CIFAR")
        .map(PathBuf::from)
        .unwrap_or_else(|| Path::new(env!("CARGO_MANIFEST_DIR")).join("../../data/cifar8"));
    dir.join("train_x.ntkm").exists().then_some(dir)
}

fn images(m: &DMatrix<f64>) -> Batch {
    let data: Vec<f64> = m.transpose().iter().copied().collect();
    Batch::images(m.nrows(), 8, 8, 3, data).expect("rows hold 8x8x3 images")
}

fn accuracy(pred: &DMatrix<f64>, y: &DMatrix<f64>) -> f64 {
    let argmax = |m: &DMatrix<f64>, i: usize| m.row(i).iter().enumerate().max_by(|a, b| a.1.total_cmp(b.1)).unwrap().0;
    (0..y.nrows()).filter(|&i| argmax(pred, i) == argmax(y, i)).count() as f64 / y.nrows() as f64
}

/// Test accuracy of the depth with the lowest marginal NLL.
fn best_by_nll(
    make: impl Fn(usize) -> NetSpec,
    xs: (&Batch, &Batch),
    ys: (&DMatrix<f64>, &DMatrix<f64>),
) -> (usize, f64) {
    let y_centered = ys.0.map(|v| v - 0.1);
    let mut best: Option<(f64, usize, f64)> = None;
    for depth in 1..=3 {
        let kfn = KernelFn::new(&make(depth)).unwrap();
        let train = kfn.compute(xs.0, None, Get::Both).unwrap();
        let cross = kfn.compute(xs.1, Some(xs.0), Get::Both).unwrap();
        let nll = marginal_nll(train.ntk.as_ref().unwrap(), &y_centered, 1e-4).unwrap();
        let mean = gp_inference(&train, &cross, None, &y_centered, Mode::Ntk, 1e-4).unwrap().mean;
        let acc = accuracy(&mean, ys.1);
        if best.is_none_or(|b| nll < b.0) {
            best = Some((nll, depth, acc));
        }
    }
    let (_, depth, acc) = best.unwrap();
    (depth, acc)
}

pub fn architecture_hierarchy() -> Outcome {
    let Some(dir) = data_dir() else {
        return Outcome {
            verdict: Verdict::NotEvaluable,
            detail: "no preprocessed CIFAR-10 (set TANGENT_KERNELS_CIFAR or run scripts/cifar_to_ntkm.py)".into(),
        };
    };
    let load = |name: &str| read_ntkm(dir.join(name)).unwrap();
    let (x_train, x_test) = (images(&load("train_x.ntkm")), images(&load("test_x.ntkm")));
    let (y_train, y_test) = (load("train_y.ntkm"), load("test_y.ntkm"));
    let shape = InputShape::Image { h: 8, w: 8, c: 3 };
    let xs = (&x_train, &x_test);
    let ys = (&y_train, &y_test);
    let (fc_depth, fc) =
        best_by_nll(|d| zoo::fully_connected(shape, 1, d, 1.4, 0.05).with_readout_width(10).unwrap(), xs, ys);
    let (conv_depth, conv) =
        best_by_nll(|d| zoo::conv_net(shape, 1, d, 1.4, 0.05).with_readout_width(10).unwrap(), xs, ys);
    Outcome::check(
        fc < conv,
        format!(
            "{} train / {} test; FC depth {fc_depth} accuracy {fc:.3}, CONV depth {conv_depth} accuracy {conv:.3}",
            x_train.len(),
            x_test.len()
        ),
    )
}
