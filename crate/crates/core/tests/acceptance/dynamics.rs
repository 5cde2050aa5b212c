use nalgebra::DMatrix;
use rand::Rng;
use tangent_kernels::empirical::taylor_expand;
use tangent_kernels::finite::{train, FiniteNet, Optimizer, TrainConfig, Trainable};
use tangent_kernels::netspec::zoo;
use tangent_kernels::predict::{
    gp_inference, gradient_descent_mse, gradient_descent_mse_ensemble, gradient_descent_ode, EnsemblePrediction,
    LossSpec, Mode,
};
use tangent_kernels::{Batch, Get, InputShape, KernelFn, KernelFunction, Phi, RngKey};

use crate::{normal_batch, Outcome};

fn max_eig(m: &DMatrix<f64>) -> f64 {
    m.clone().symmetric_eigen().eigenvalues.max()
}

fn mean_std(v: impl Iterator<Item = f64>) -> (f64, f64) {
    let v: Vec<f64> = v.collect();
    let n = v.len() as f64;
    let m = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (n - 1.0).max(1.0);
    (m, var.sqrt())
}

const MEMBERS: u64 = 100;
const SIN_STEPS: usize = 150;
const SIN_EVERY: usize = 10;

pub fn sin_ensemble() -> Outcome {
    let mut rng = RngKey::new(2024).rng();
    let xs: Vec<f64> = (0..20).map(|_| rng.random_range(-std::f64::consts::PI..std::f64::consts::PI)).collect();
    let ys: Vec<f64> = xs.iter().map(|x| x.sin() + 0.1 * rng.sample::<f64, _>(rand_distr::StandardNormal)).collect();
    let xt: Vec<f64> = (0..50).map(|i| -std::f64::consts::PI + 2.0 * std::f64::consts::PI * i as f64 / 49.0).collect();
    let x_train = Batch::vectors(20, 1, xs).unwrap();
    let x_test = Batch::vectors(50, 1, xt).unwrap();
    let y = DMatrix::from_column_slice(20, 1, &ys);

    let spec = zoo::mlp(1, 2048, 2, Phi::Erf, 1.5, 0.05, 1);
    let kfn = KernelFn::new(&spec).unwrap();
    let k_train = kfn.compute(&x_train, None, Get::Both).unwrap();
    let k_cross = kfn.compute(&x_test, Some(&x_train), Get::Both).unwrap();
    let k_test = kfn.compute(&x_test, None, Get::Nngp).unwrap();
    let lr = 1.0 / max_eig(k_train.ntk.as_ref().unwrap());
    let analytic = gradient_descent_mse_ensemble(&k_train, &k_cross, &k_test, &y, lr, 0.0).unwrap();

    let net = FiniteNet::new(&spec).unwrap();
    let config = TrainConfig::sgd(lr, SIN_STEPS);
    let slots = SIN_STEPS / SIN_EVERY + 1;
    let mut losses = vec![Vec::new(); slots];
    let mut last_test = Vec::new();
    for m in 0..MEMBERS {
        let params = net.init_params(RngKey::new(9).fold_in(m));
        let rec = train(&net, params, &x_train, &ys, None, &config).unwrap();
        for (slot, loss) in losses.iter_mut().enumerate() {
            loss.push(rec.train_loss[slot * SIN_EVERY]);
        }
        last_test.push(net.predict(&rec.params, &x_test).unwrap());
    }

    let mut loss_ok = true;
    let mut worst = 0.0f64;
    for (slot, l) in losses.iter().enumerate() {
        let step = slot * SIN_EVERY;
        let a = analytic.predict(step as f64).unwrap();
        let expected = EnsemblePrediction::expected_loss(&a.train_mean, &a.train_cov, &y);
        let (m, s) = mean_std(l.iter().copied());
        worst = worst.max((m - expected).abs() / s);
        loss_ok &= (m - expected).abs() <= s;
    }
    let a = analytic.predict(SIN_STEPS as f64).unwrap();
    let within = (0..50)
        .filter(|&i| {
            let (m, _) = mean_std(last_test.iter().map(|f| f[i]));
            (m - a.test_mean[(i, 0)]).abs() <= 2.0 * a.test_cov[(i, i)].max(0.0).sqrt()
        })
        .count();
    let frac = within as f64 / 50.0;
    Outcome::check(
        loss_ok && frac >= 0.95,
        format!(
            "lr {lr:.4}, {SIN_STEPS} steps; test points in 2σ band: {frac:.2}; max |loss gap|/ensemble std: {worst:.2}"
        ),
    )
}

pub fn equivalences() -> Outcome {
    let spec = zoo::mlp(8, 1, 2, Phi::relu(), 1.4, 0.1, 1);
    let kfn = KernelFn::new(&spec).unwrap();
    let mut worst_ode = 0.0f64;
    let mut worst_inf = 0.0f64;
    for seed in 0..5 {
        let key = RngKey::new(300 + seed);
        let x = normal_batch(30, InputShape::Vector(8), key.fold_in(0));
        let xt = normal_batch(10, InputShape::Vector(8), key.fold_in(1));
        let mut rng = key.fold_in(2).rng();
        let mut normal = |r, c| DMatrix::from_fn(r, c, |_, _| rng.sample::<f64, _>(rand_distr::StandardNormal));
        let (y, f0, f0t) = (normal(30, 2), normal(30, 2), normal(10, 2));
        let train_k = kfn.compute(&x, None, Get::Both).unwrap();
        let cross_k = kfn.compute(&xt, Some(&x), Get::Both).unwrap();
        let theta = train_k.ntk.as_ref().unwrap();
        let cross = cross_k.ntk.as_ref().unwrap();
        let lr = 1.0;

        let closed = gradient_descent_mse(theta, &y, Some(cross), lr, 0.0).unwrap();
        let ode = gradient_descent_ode(LossSpec::Mse, theta, &y, Some(cross), lr, None).unwrap();
        let ts = [0.1, 1.0, 10.0];
        let traj = ode.trajectory(&ts, Some(&f0), Some(&f0t)).unwrap();
        for (&t, p) in ts.iter().zip(&traj) {
            let c = closed.predict(t, Some(&f0), Some(&f0t)).unwrap();
            for (a, b) in [(&c.train, &p.train), (c.test.as_ref().unwrap(), p.test.as_ref().unwrap())] {
                worst_ode = worst_ode.max((a - b).amax() / a.amax());
            }
        }
        let inf = closed.predict(f64::INFINITY, None, None).unwrap().test.unwrap();
        let post = gp_inference(&train_k, &cross_k, None, &y, Mode::Ntk, 0.0).unwrap().mean;
        worst_inf = worst_inf.max((&inf - &post).amax() / post.amax());
    }
    Outcome::check(
        worst_ode <= 1e-6 && worst_inf <= 1e-8,
        format!("ODE vs closed form {worst_ode:.1e} (bound 1e-6); t=inf vs posterior {worst_inf:.1e} (bound 1e-8)"),
    )
}

fn rms(a: &[f64], b: &[f64]) -> f64 {
    (a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / a.len() as f64).sqrt()
}

/// Two classes of 8×8 "images": a fixed smooth pattern with opposite signs
/// plus pixel noise.
fn two_class(n: usize, key: RngKey) -> (Batch, Vec<f64>) {
    let mut rng = key.rng();
    let pattern: Vec<f64> = (0..64).map(|p| ((p / 8) as f64 * 0.7).sin() * ((p % 8) as f64 * 0.9).cos()).collect();
    let mut data = Vec::with_capacity(n * 64);
    let mut y = Vec::with_capacity(n);
    for i in 0..n {
        let label = if i % 2 == 0 { 1.0 } else { -1.0 };
        y.push(label);
        data.extend(pattern.iter().map(|p| label * p + 0.8 * rng.sample::<f64, _>(rand_distr::StandardNormal)));
    }
    (Batch::vectors(n, 64, data).unwrap(), y)
}

const TAYLOR_STEPS: usize = 200;
const TAYLOR_EVERY: usize = 10;

pub fn taylor_ordering() -> Outcome {
    let (x, y) = two_class(200, RngKey::new(77));
    let spec = zoo::mlp(64, 512, 4, Phi::Erf, 1.5, 0.05, 1);
    let theta = KernelFn::new(&spec).unwrap().compute(&x, None, Get::Ntk).unwrap().ntk.unwrap();
    let lr = 0.5 / max_eig(&theta);
    let config = TrainConfig {
        optimizer: Optimizer::Momentum { lr, gamma: 0.9 },
        predict_every: TAYLOR_EVERY,
        ..TrainConfig::sgd(lr, TAYLOR_STEPS)
    };
    let net = FiniteNet::new(&spec).unwrap();
    let params0 = net.init_params(RngKey::new(78));
    let truth = train(&net, params0.clone(), &x, &y, None, &config).unwrap();

    let mut distances = Vec::new();
    for order in 0..=2 {
        let model = taylor_expand(&spec, &params0, order).unwrap();
        let rec = train(&model, params0.clone(), &x, &y, None, &config).unwrap();
        let d: f64 = truth.trajectory.iter().zip(&rec.trajectory).map(|(a, b)| rms(&a.1, &b.1)).sum::<f64>()
            / truth.trajectory.len() as f64;
        distances.push(d);
    }
    let ordered = distances[0] >= distances[1] && distances[1] >= distances[2];

    // Local error along the training displacement δ = θ_T − θ0.
    let delta = truth.params.sub(&params0);
    let probe = x.slice(0..50);
    let scales = [1.0, 0.5, 0.25, 0.125];
    let mut scaling_ok = true;
    let mut ratios = Vec::new();
    for order in 0..=2usize {
        let model = taylor_expand(&spec, &params0, order).unwrap();
        let errors: Vec<f64> = scales
            .iter()
            .map(|&s| {
                let mut p = params0.clone();
                p.add_scaled(s, &delta);
                rms(&net.predict(&p, &probe).unwrap(), &model.apply(&p, &probe).unwrap())
            })
            .collect();
        let expected = 2f64.powi(order as i32 + 1);
        let r: Vec<f64> = errors.windows(2).map(|e| e[0] / e[1]).collect();
        scaling_ok &= r.iter().all(|&q| q >= expected / 2.0 && q <= expected * 2.0);
        ratios.push(format!("order {order}: {}", r.iter().map(|q| format!("{q:.2}")).collect::<Vec<_>>().join("/")));
    }
    Outcome::check(
        ordered && scaling_ok,
        format!(
            "time-averaged distance d0={:.3e} d1={:.3e} d2={:.3e}; halving-δ error ratios [{}] (expect 2^(k+1) within x2)",
            distances[0],
            distances[1],
            distances[2],
            ratios.join("; ")
        ),
    )
}
