use approx::assert_relative_eq;
use nalgebra::DMatrix;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;

fn random_psd(n: usize, seed: u64) -> DMatrix<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let a = DMatrix::from_fn(n, n + 3, |_, _| rng.random_range(-1.0..1.0));
    &a * a.transpose() / (n as f64) + DMatrix::identity(n, n) * 0.1
}

fn random(r: usize, c: usize, seed: u64) -> DMatrix<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    DMatrix::from_fn(r, c, |_, _| rng.random_range(-1.0..1.0))
}

/// Joint PSD kernel over train (first n) and test (last m) points.
fn joint(n: usize, m: usize, seed: u64) -> (DMatrix<f64>, DMatrix<f64>, DMatrix<f64>) {
    let k = random_psd(n + m, seed);
    (k.view((0, 0), (n, n)).into_owned(), k.view((n, 0), (m, n)).into_owned(), k.view((n, n), (m, m)).into_owned())
}

fn kernel(nngp: &DMatrix<f64>, ntk: Option<&DMatrix<f64>>) -> Kernel {
    Kernel { nngp: nngp.clone(), ntk: ntk.cloned() }
}

fn naive_inverse(m: &DMatrix<f64>) -> DMatrix<f64> {
    m.clone().lu().try_inverse().unwrap()
}

#[test]
fn interpolates_train_points() {
    let (k, _, _) = joint(6, 1, 1);
    let y = random(6, 2, 2);
    let cross = k.rows(3, 1).into_owned();
    let test = k.view((3, 3), (1, 1)).into_owned();
    let post = gp_inference(&kernel(&k, None), &kernel(&cross, None), Some(&kernel(&test, None)), &y, Mode::Nngp, 0.0)
        .unwrap();
    assert_relative_eq!(post.mean.row(0).into_owned(), y.row(3).into_owned(), epsilon = 1e-10);
    assert!(post.cov.unwrap()[(0, 0)].abs() < 1e-10);
}

#[test]
fn matches_dense_solve() {
    let (k, ks, kss) = joint(20, 5, 3);
    let (t, ts, _) = joint(20, 5, 4);
    let y = random(20, 3, 5);
    let reg = 1e-3 * k.trace() / 20.0;
    let kinv = naive_inverse(&(&k + DMatrix::identity(20, 20) * reg));
    let post =
        gp_inference(&kernel(&k, Some(&t)), &kernel(&ks, Some(&ts)), Some(&kernel(&kss, None)), &y, Mode::Nngp, 1e-3)
            .unwrap();
    assert_relative_eq!(post.mean, &ks * &kinv * &y, epsilon = 1e-10);
    assert_relative_eq!(post.cov.unwrap(), &kss - &ks * &kinv * ks.transpose(), epsilon = 1e-10);

    let tinv = naive_inverse(&t);
    let post =
        gp_inference(&kernel(&k, Some(&t)), &kernel(&ks, Some(&ts)), Some(&kernel(&kss, None)), &y, Mode::Ntk, 0.0)
            .unwrap();
    assert_relative_eq!(post.mean, &ts * &tinv * &y, epsilon = 1e-9);
    let a = &ts * &tinv;
    let expect = &kss + &a * &k * a.transpose() - &a * ks.transpose() - &ks * a.transpose();
    assert_relative_eq!(post.cov.unwrap(), expect, epsilon = 1e-9);
}

#[test]
fn ntk_mode_requires_ntk() {
    let k = DMatrix::identity(2, 2);
    let err = gp_inference(&kernel(&k, None), &kernel(&k, None), None, &k, Mode::Ntk, 0.0).unwrap_err();
    assert!(matches!(err, Error::InvalidArgument(_)));
}

#[test]
fn indefinite_kernel_reports_min_eigenvalue() {
    let k = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 1.0]);
    let y = DMatrix::zeros(2, 1);
    match gp_inference(&kernel(&k, None), &kernel(&k, None), None, &y, Mode::Nngp, 0.0) {
        Err(Error::NotPositiveDefinite { min_eig }) => assert_relative_eq!(min_eig, -1.0, epsilon = 1e-12),
        other => panic!("{other:?}"),
    }
}

#[test]
fn classes_share_one_factorization() {
    let (k, ks, _) = joint(8, 3, 6);
    let y = random(8, 4, 7);
    let all = gp_inference(&kernel(&k, None), &kernel(&ks, None), None, &y, Mode::Nngp, 1e-4).unwrap();
    for c in 0..4 {
        let yc = y.columns(c, 1).into_owned();
        let one = gp_inference(&kernel(&k, None), &kernel(&ks, None), None, &yc, Mode::Nngp, 1e-4).unwrap();
        assert_relative_eq!(one.mean, all.mean.columns(c, 1).into_owned(), epsilon = 1e-12);
    }
}

#[test]
fn scalar_dynamics() {
    let theta = DMatrix::from_element(1, 1, 1.0);
    let y = DMatrix::from_element(1, 1, 1.0);
    let p = gradient_descent_mse(&theta, &y, None, 1.0, 0.0).unwrap();
    assert_relative_eq!(p.predict(2f64.ln(), None, None).unwrap().train[(0, 0)], 0.5, epsilon = 1e-15);
    assert!(matches!(p.predict(-1.0, None, None), Err(Error::NegativeTime(_))));
}

#[test]
fn dynamics_endpoints() {
    let (t, ts, _) = joint(10, 4, 8);
    let y = random(10, 2, 9);
    let f0 = random(10, 2, 10);
    let f0s = random(4, 2, 11);
    let p = gradient_descent_mse(&t, &y, Some(&ts), 0.5, 0.0).unwrap();
    let at0 = p.predict(0.0, Some(&f0), Some(&f0s)).unwrap();
    assert_eq!(at0.train, f0);
    assert_eq!(at0.test.unwrap(), f0s);

    let ntk = kernel(&t, Some(&t));
    let cross = kernel(&ts, Some(&ts));
    let gp = gp_inference(&ntk, &cross, None, &y, Mode::Ntk, 0.0).unwrap();
    for time in [1e6, f64::INFINITY] {
        let late = p.predict(time, None, None).unwrap();
        assert_relative_eq!(late.test.unwrap(), gp.mean, epsilon = 1e-8);
        assert_relative_eq!(late.train, y, epsilon = 1e-8);
    }
}

#[test]
fn ensemble_matches_sampled_initializations() {
    let (k, kx, kss) = joint(5, 3, 12);
    let (t, tx, _) = joint(5, 3, 13);
    let y = random(5, 1, 14);
    let ens = gradient_descent_mse_ensemble(
        &kernel(&k, Some(&t)),
        &kernel(&kx, Some(&tx)),
        &kernel(&kss, None),
        &y,
        1.0,
        0.0,
    )
    .unwrap();
    let p = gradient_descent_mse(&t, &y, Some(&tx), 1.0, 0.0).unwrap();
    let time = 0.7;
    let e = ens.predict(time).unwrap();

    // Draw f0 jointly from the prior and push each sample through the
    // closed-form flow.
    let joint_k = random_psd(8, 12);
    let l = joint_k.clone().cholesky().unwrap().l();
    let mut rng = ChaCha8Rng::seed_from_u64(15);
    let draws = 20_000;
    let mut sum = DMatrix::zeros(3, 1);
    let mut sq = DMatrix::zeros(3, 3);
    for _ in 0..draws {
        let z = DMatrix::from_fn(8, 1, |_, _| rng.sample::<f64, _>(rand_distr::StandardNormal));
        let f = &l * z;
        let pred = p.predict(time, Some(&f.rows(0, 5).into_owned()), Some(&f.rows(5, 3).into_owned())).unwrap();
        let ft = pred.test.unwrap();
        sq += &ft * ft.transpose();
        sum += ft;
    }
    let mean = &sum / draws as f64;
    let cov = &sq / draws as f64 - &mean * mean.transpose();
    assert_relative_eq!(mean, e.test_mean, epsilon = 0.03);
    assert_relative_eq!(cov, e.test_cov, epsilon = 0.03);
}

#[test]
fn ode_matches_closed_form() {
    let (t, ts, _) = joint(6, 3, 16);
    let y = random(6, 2, 17);
    let f0 = random(6, 2, 18);
    let closed = gradient_descent_mse(&t, &y, Some(&ts), 1.0, 0.0).unwrap();
    let ode = gradient_descent_ode(LossSpec::Mse, &t, &y, Some(&ts), 1.0, None).unwrap();
    let times = [0.0, 0.1, 1.0, 10.0];
    let traj = ode.trajectory(&times, Some(&f0), None).unwrap();
    for (time, got) in times.iter().zip(traj) {
        let want = closed.predict(*time, Some(&f0), None).unwrap();
        assert_relative_eq!(got.train, want.train, max_relative = 1e-6, epsilon = 1e-9);
        assert_relative_eq!(got.test.unwrap(), want.test.unwrap(), max_relative = 1e-6, epsilon = 1e-9);
    }
}

#[test]
fn ode_fixed_points() {
    let (t, ts, _) = joint(4, 2, 19);
    let y = random(4, 1, 20);
    for momentum in [None, Some(0.5)] {
        let ode = gradient_descent_ode(LossSpec::Mse, &t, &y, Some(&ts), 1.0, momentum).unwrap();
        let f0s = random(2, 1, 21);
        let out = ode.predict(3.0, Some(&y), Some(&f0s)).unwrap();
        assert_eq!(out.train, y);
        assert_eq!(out.test.unwrap(), f0s);
    }
}

#[test]
fn momentum_ode_matches_damped_scalar() {
    // f'' = −γf' − η(f − y) with θ = 1, f(0) = 0, f'(0) = 0.
    let (gamma, eta) = (1.0_f64, 2.0_f64);
    let theta = DMatrix::from_element(1, 1, 1.0);
    let y = DMatrix::from_element(1, 1, 1.0);
    let ode = gradient_descent_ode(LossSpec::Mse, &theta, &y, None, eta, Some(gamma)).unwrap();
    let w = (eta - gamma * gamma / 4.0).sqrt();
    let exact = |t: f64| 1.0 - (-gamma * t / 2.0).exp() * ((w * t).cos() + gamma / (2.0 * w) * (w * t).sin());
    for t in [0.5, 2.0, 6.0] {
        assert_relative_eq!(ode.predict(t, None, None).unwrap().train[(0, 0)], exact(t), epsilon = 1e-7);
    }
}

#[test]
fn cross_entropy_and_custom_losses() {
    let f = DMatrix::from_row_slice(1, 2, &[0.0, 0.0]);
    let y = DMatrix::from_row_slice(1, 2, &[1.0, 0.0]);
    assert_relative_eq!(LossSpec::CrossEntropy.gradient(&f, &y), DMatrix::from_row_slice(1, 2, &[-0.5, 0.5]));

    let (t, _, _) = joint(3, 1, 22);
    let y = random(3, 1, 23);
    let doubled = LossSpec::Custom(std::sync::Arc::new(|f: &DMatrix<f64>, y: &DMatrix<f64>| (f - y) * 2.0));
    let a = gradient_descent_ode(doubled, &t, &y, None, 1.0, None).unwrap().predict(0.8, None, None).unwrap();
    let b = gradient_descent_mse(&t, &y, None, 2.0, 0.0).unwrap().predict(0.8, None, None).unwrap();
    assert_relative_eq!(a.train, b.train, epsilon = 1e-8);

    // Cross-entropy flow lowers the loss.
    let y = DMatrix::from_row_slice(3, 2, &[1.0, 0.0, 0.0, 1.0, 1.0, 0.0]);
    let ode = gradient_descent_ode(LossSpec::CrossEntropy, &t, &y, None, 1.0, None).unwrap();
    let ce = |f: &DMatrix<f64>| -> f64 {
        f.row_iter()
            .zip(y.row_iter())
            .map(|(r, yr)| {
                let lse = r.map(f64::exp).sum().ln();
                -(0..2).map(|c| yr[c] * (r[c] - lse)).sum::<f64>()
            })
            .sum()
    };
    let traj = ode.trajectory(&[0.0, 1.0, 5.0], None, None).unwrap();
    assert!(ce(&traj[1].train) < ce(&traj[0].train));
    assert!(ce(&traj[2].train) < ce(&traj[1].train));
}

#[test]
fn marginal_nll_values() {
    let k = DMatrix::identity(2, 2);
    let y = DMatrix::zeros(2, 1);
    assert_relative_eq!(marginal_nll(&k, &y, 0.0).unwrap(), 0.5 * (2.0 * std::f64::consts::PI).ln(), epsilon = 1e-12);

    let k = random_psd(10, 24);
    let y = random(10, 3, 25);
    let c: f64 = 3.7;
    let scaled = marginal_nll(&(&k * c), &(&y * c.sqrt()), 0.0).unwrap();
    assert_relative_eq!(scaled, marginal_nll(&k, &y, 0.0).unwrap() + 0.5 * c.ln(), epsilon = 1e-10);

    let inv = naive_inverse(&k);
    let det = k.determinant();
    let naive: f64 = (0..3)
        .map(|j| {
            let yc = y.column(j);
            0.5 * (yc.transpose() * &inv * yc)[(0, 0)] + 0.5 * det.ln() + 5.0 * (2.0 * std::f64::consts::PI).ln()
        })
        .sum::<f64>()
        / 3.0
        / 10.0;
    assert_relative_eq!(marginal_nll(&k, &y, 0.0).unwrap(), naive, epsilon = 1e-8);
}

#[test]
fn predictive_nll_standard_normal() {
    let mean = DMatrix::zeros(2, 1);
    let cov = DMatrix::identity(2, 2);
    let y = DMatrix::zeros(2, 1);
    assert_relative_eq!(predictive_nll(&mean, &cov, &y, 0.0).unwrap(), 0.5 * (2.0 * std::f64::consts::PI).ln());
}

#[test]
fn condition_numbers() {
    assert_relative_eq!(condition_report(&DMatrix::identity(3, 3)).condition, 1.0, epsilon = 1e-12);
    let d = DMatrix::from_diagonal(&nalgebra::DVector::from_vec(vec![1.0, 1e6]));
    assert_relative_eq!(condition_report(&d).condition, 1e6, max_relative = 1e-12);

    let k = random_psd(12, 26);
    let r = condition_report(&k);
    // Power iteration on K and on K⁻¹.
    let power = |m: &DMatrix<f64>| {
        let mut v = DMatrix::from_element(12, 1, 1.0);
        for _ in 0..2000 {
            v = m * &v;
            v /= v.norm();
        }
        (v.transpose() * m * &v)[(0, 0)]
    };
    assert_relative_eq!(r.max_eig, power(&k), max_relative = 1e-6);
    assert_relative_eq!(r.min_eig, 1.0 / power(&naive_inverse(&k)), max_relative = 1e-6);
    assert_eq!(r.clipped, 0);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn permutation_invariant(seed in 0u64..1000) {
        let (k, ks, _) = joint(7, 2, seed);
        let y = random(7, 2, seed + 1);
        let base = gp_inference(&kernel(&k, None), &kernel(&ks, None), None, &y, Mode::Nngp, 1e-4).unwrap();
        let perm = [3, 0, 6, 1, 5, 2, 4];
        let kp = DMatrix::from_fn(7, 7, |i, j| k[(perm[i], perm[j])]);
        let ksp = DMatrix::from_fn(2, 7, |i, j| ks[(i, perm[j])]);
        let yp = DMatrix::from_fn(7, 2, |i, c| y[(perm[i], c)]);
        let p = gp_inference(&kernel(&kp, None), &kernel(&ksp, None), None, &yp, Mode::Nngp, 1e-4).unwrap();
        prop_assert!((p.mean - base.mean).abs().max() < 1e-10);
    }

    #[test]
    fn posterior_variance_bounded_by_prior(seed in 0u64..1000) {
        let (k, ks, kss) = joint(6, 4, seed);
        let y = random(6, 1, seed);
        let post = gp_inference(&kernel(&k, None), &kernel(&ks, None), Some(&kernel(&kss, None)), &y, Mode::Nngp, 0.0).unwrap();
        let cov = post.cov.unwrap();
        for i in 0..4 {
            prop_assert!(cov[(i, i)] >= -1e-12);
            prop_assert!(cov[(i, i)] <= kss[(i, i)] + 1e-12);
        }
    }

    #[test]
    fn train_loss_non_increasing(seed in 0u64..1000) {
        let (t, _, _) = joint(8, 1, seed);
        let y = random(8, 1, seed + 7);
        let p = gradient_descent_mse(&t, &y, None, 1.0, 0.0).unwrap();
        let mut prev = f64::INFINITY;
        for step in 0..30 {
            let f = p.predict(step as f64 * 0.2, None, None).unwrap().train;
            let loss = (f - &y).norm_squared();
            prop_assert!(loss <= prev + 1e-12);
            prev = loss;
        }
    }
}
