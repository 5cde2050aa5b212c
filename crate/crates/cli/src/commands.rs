use std::path::PathBuf;

use nalgebra::DMatrix;
use rayon::prelude::*;
use tangent_kernels::batching::{batch, write_ntkm};
use tangent_kernels::empirical::{relative_frobenius_sq, taylor_expand, MonteCarloKernel};
use tangent_kernels::finite::{train, FiniteNet, Optimizer, TrainConfig, TrainRecord};
use tangent_kernels::predict::{
    condition_report, gp_inference, gradient_descent_mse, gradient_descent_mse_ensemble, gradient_descent_ode,
    marginal_nll, predictive_nll, EnsemblePrediction, LossSpec, Mode,
};
use tangent_kernels::{Get, KernelFn, KernelFunction, NetSpec, RngKey};

use crate::config::Options;
use crate::data::{load_dataset, Dataset};
use crate::error::{CliError, Result};
use crate::output::{num, OutDir};

/// Kernels with more entries than this are also written as `.ntkm`.
const LARGE: usize = 250_000;

fn load_spec(o: &Options) -> Result<NetSpec> {
    let path = o.arch()?;
    let text = std::fs::read_to_string(path).map_err(CliError::io(path))?;
    let spec = NetSpec::from_json(&text)?;
    let violations = spec.validate();
    if !violations.is_empty() {
        return Err(tangent_kernels::Error::InvalidSpec(violations).into());
    }
    Ok(spec)
}

fn kernel_fn(spec: &NetSpec, o: &Options) -> Result<Box<dyn KernelFunction>> {
    let kfn = KernelFn::new(spec)?;
    let workers = o.workers()?;
    Ok(match o.batch_size()? {
        Some(bs) => Box::new(batch(kfn, bs, workers)?),
        None => Box::new(kfn),
    })
}

fn mode(o: &Options, default: Mode) -> Result<Mode> {
    match &o.mode {
        None => Ok(default),
        Some(m) => m.parse().map_err(|e: tangent_kernels::Error| CliError::Config(e.to_string())),
    }
}

fn test_set(o: &Options) -> Result<Option<Dataset>> {
    o.test_data.as_ref().map(load_dataset).transpose()
}

fn half_mean_sq(f: &DMatrix<f64>, y: &DMatrix<f64>) -> f64 {
    0.5 * (f - y).norm_squared() / y.len().max(1) as f64
}

fn mean_std(values: impl Iterator<Item = f64>) -> (f64, f64) {
    let v: Vec<f64> = values.collect();
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let var = if v.len() > 1 { v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0) } else { 0.0 };
    (mean, var.sqrt())
}

pub fn cmd_kernel(o: &Options) -> Result<Vec<PathBuf>> {
    let spec = load_spec(o)?;
    let kf = kernel_fn(&spec, o)?;
    let a = load_dataset(o.data()?)?;
    let b = test_set(o)?;
    let get = match o.mode.as_deref() {
        None | Some("ntk") => Get::Both,
        Some("nngp") => Get::Nngp,
        Some(m) => return Err(CliError::Config(format!("unknown mode {m:?}; expected nngp or ntk"))),
    };
    let k = kf.compute(&a.x, b.as_ref().map(|d| &d.x), get)?;
    let out = OutDir::create(o.out())?;
    let mut files = vec![out.matrix("nngp.csv", &k.nngp)?];
    if let Some(t) = &k.ntk {
        files.push(out.matrix("ntk.csv", t)?);
    }
    if k.nngp.len() > LARGE {
        for (name, m) in [("nngp.ntkm", Some(&k.nngp)), ("ntk.ntkm", k.ntk.as_ref())] {
            if let Some(m) = m {
                write_ntkm(out.path(name), m)?;
                files.push(out.path(name));
            }
        }
    }
    Ok(files)
}

pub fn cmd_infer(o: &Options) -> Result<Vec<PathBuf>> {
    let spec = load_spec(o)?;
    let kf = kernel_fn(&spec, o)?;
    let train_set = load_dataset(o.data()?)?;
    let y = train_set.require_targets("infer")?;
    let test = test_set(o)?.unwrap_or_else(|| train_set.clone());
    let mode = mode(o, Mode::Nngp)?;
    let diag_reg = o.diag_reg()?;
    let get = if mode == Mode::Ntk { Get::Both } else { Get::Nngp };

    let k_train = kf.compute(&train_set.x, None, get)?;
    let k_cross = kf.compute(&test.x, Some(&train_set.x), get)?;
    let k_test = if o.cov { Some(kf.compute(&test.x, None, Get::Nngp)?) } else { None };
    let post = gp_inference(&k_train, &k_cross, k_test.as_ref(), y, mode, diag_reg)?;

    let out = OutDir::create(o.out())?;
    let classes = y.ncols();
    let header: Vec<String> = (0..classes).map(|c| format!("y{c}")).collect();
    let rows: Vec<Vec<String>> = post.mean.row_iter().map(|r| r.iter().map(|v| num(*v)).collect()).collect();
    let mut files = vec![out.table("mean.csv", &header.iter().map(String::as_str).collect::<Vec<_>>(), &rows)?];

    let primary = k_train.primary(get);
    let nll = marginal_nll(primary, y, diag_reg)?;
    files.push(out.text("nll.txt", &format!("{}\n", num(nll)))?);
    let c = condition_report(primary);
    files.push(out.text(
        "condition.txt",
        &format!(
            "min_eig,max_eig,condition,clipped\n{},{},{},{}\n",
            num(c.min_eig),
            num(c.max_eig),
            num(c.condition),
            c.clipped
        ),
    )?);

    let mut metrics = String::from("metric,value\n");
    if test.y.shape() == post.mean.shape() {
        metrics += &format!("mse,{}\n", num((&post.mean - &test.y).norm_squared() / test.y.len() as f64));
        if classes > 1 {
            let hits = (0..test.len())
                .filter(|&i| post.mean.row(i).transpose().argmax().0 == test.y.row(i).transpose().argmax().0)
                .count();
            metrics += &format!("accuracy,{}\n", num(hits as f64 / test.len() as f64));
        }
        // Undefined where the posterior variance vanishes, e.g. at training points.
        if let Some(Ok(nll)) = post.cov.as_ref().map(|cov| predictive_nll(&post.mean, cov, &test.y, 0.0)) {
            metrics += &format!("predictive_nll,{}\n", num(nll));
        }
    }
    files.push(out.text("metrics.csv", &metrics)?);

    if let Some(cov) = &post.cov {
        files.push(out.matrix("cov.csv", cov)?);
        if test.x.dim() == 1 {
            let mut order: Vec<usize> = (0..test.len()).collect();
            order.sort_by(|&a, &b| test.x.row(a)[0].total_cmp(&test.x.row(b)[0]));
            let rows: Vec<Vec<String>> = order
                .iter()
                .map(|&i| vec![num(test.x.row(i)[0]), num(post.mean[(i, 0)]), num(cov[(i, i)].max(0.0).sqrt())])
                .collect();
            files.push(out.table("band.csv", &["x", "mean", "std"], &rows)?);
            files.push(out.gnuplot(
                "infer",
                "set xlabel 'x'",
                "plot 'band.csv' using 1:($2-2*$3):($2+2*$3) with filledcurves fs transparent solid 0.3 title '2 std', \
                 '' using 1:2 with lines title 'mean'",
            )?);
        }
    }
    Ok(files)
}

fn parse_loss(o: &Options) -> Result<LossSpec> {
    match o.loss.as_deref() {
        None | Some("mse") => Ok(LossSpec::Mse),
        Some("cross_entropy") => Ok(LossSpec::CrossEntropy),
        Some(l) => Err(CliError::Config(format!("unknown loss {l:?}; expected mse or cross_entropy"))),
    }
}

fn loss_value(loss: &LossSpec, f: &DMatrix<f64>, y: &DMatrix<f64>) -> f64 {
    match loss {
        LossSpec::CrossEntropy => {
            let total: f64 = f
                .row_iter()
                .zip(y.row_iter())
                .map(|(r, yr)| {
                    let max = r.max();
                    let lse = max + r.map(|v| (v - max).exp()).sum().ln();
                    -r.iter().zip(yr.iter()).map(|(v, t)| t * (v - lse)).sum::<f64>()
                })
                .sum();
            total / f.nrows().max(1) as f64
        }
        _ => half_mean_sq(f, y),
    }
}

pub fn cmd_dynamics(o: &Options) -> Result<Vec<PathBuf>> {
    let spec = load_spec(o)?;
    let kf = kernel_fn(&spec, o)?;
    let train_set = load_dataset(o.data()?)?;
    let y = train_set.require_targets("dynamics")?;
    let test = test_set(o)?;
    let lr = o.lr(1.0)?;
    let loss = parse_loss(o)?;
    if let Some(g) = o.momentum {
        if !(g >= 0.0 && g.is_finite()) {
            return Err(CliError::Config(format!("--momentum (damping) must be non-negative, got {g}")));
        }
    }
    let mut times = o.times(&[0.0, 1.0, 10.0, 100.0, f64::INFINITY])?;
    times.sort_by(f64::total_cmp);

    let no_ntk = || CliError::Config("architecture yields no NTK".into());
    let theta = kf.compute(&train_set.x, None, Get::Both)?.ntk.ok_or_else(no_ntk)?;
    let cross = match &test {
        Some(t) => Some(kf.compute(&t.x, Some(&train_set.x), Get::Both)?.ntk.ok_or_else(no_ntk)?),
        None => None,
    };
    let closed = match loss {
        LossSpec::Mse => Some(gradient_descent_mse(&theta, y, cross.as_ref(), lr, 0.0)?),
        _ => None,
    };
    let ode = gradient_descent_ode(loss.clone(), &theta, y, cross.as_ref(), lr, o.momentum)?;
    let finite: Vec<f64> = times.iter().copied().filter(|t| t.is_finite()).collect();
    let mut ode_traj = ode.trajectory(&finite, None, None)?.into_iter();

    let test_y = test.as_ref().filter(|t| t.y.ncols() == y.ncols()).map(|t| &t.y);
    let mut loss_rows = Vec::new();
    let mut pred_rows = Vec::new();
    for &t in &times {
        let c = closed.as_ref().map(|p| p.predict(t, None, None)).transpose()?;
        let d = if t.is_finite() { ode_traj.next() } else { None };
        let cell = |v: Option<f64>| v.map_or(String::new(), num);
        let mut row = vec![num(t)];
        row.push(cell(c.as_ref().map(|p| loss_value(&loss, &p.train, y))));
        row.push(cell(d.as_ref().map(|p| loss_value(&loss, &p.train, y))));
        if let Some(ty) = test_y {
            row.push(cell(c.as_ref().and_then(|p| p.test.as_ref()).map(|f| loss_value(&loss, f, ty))));
            row.push(cell(d.as_ref().and_then(|p| p.test.as_ref()).map(|f| loss_value(&loss, f, ty))));
        }
        loss_rows.push(row);
        for (set, cm, dm) in [
            ("train", c.as_ref().map(|p| &p.train), d.as_ref().map(|p| &p.train)),
            ("test", c.as_ref().and_then(|p| p.test.as_ref()), d.as_ref().and_then(|p| p.test.as_ref())),
        ] {
            let Some(rows) = cm.or(dm).map(|m| m.nrows()) else { continue };
            for i in 0..rows {
                for k in 0..y.ncols() {
                    pred_rows.push(vec![
                        num(t),
                        set.to_string(),
                        i.to_string(),
                        k.to_string(),
                        cell(cm.map(|m| m[(i, k)])),
                        cell(dm.map(|m| m[(i, k)])),
                    ]);
                }
            }
        }
    }
    let out = OutDir::create(o.out())?;
    let mut header = vec!["t", "closed_train_loss", "ode_train_loss"];
    if test_y.is_some() {
        header.extend(["closed_test_loss", "ode_test_loss"]);
    }
    Ok(vec![
        out.table("loss.csv", &header, &loss_rows)?,
        out.table("predictions.csv", &["t", "set", "index", "class", "closed", "ode"], &pred_rows)?,
        out.gnuplot(
            "dynamics",
            "set logscale x\nset xlabel 't'\nset ylabel 'loss'",
            "plot 'loss.csv' using 1:2 with lines, '' using 1:3 with points",
        )?,
    ])
}

pub fn cmd_mc(o: &Options) -> Result<Vec<PathBuf>> {
    let spec = load_spec(o)?;
    let kf = kernel_fn(&spec, o)?;
    let a = load_dataset(o.data()?)?;
    let b = test_set(o)?;
    let x2 = b.as_ref().map(|d| &d.x);
    let mut ns = Options::positive_list("n-samples", o.n_samples.as_ref(), &[8, 32, 128])?;
    ns.sort_unstable();
    ns.dedup();
    let widths: Vec<Option<usize>> = match &o.widths {
        Some(_) => Options::positive_list("widths", o.widths.as_ref(), &[])?.into_iter().map(Some).collect(),
        None => vec![None],
    };
    let exact = kf.compute(&a.x, x2, Get::Both)?;
    let exact_ntk = exact.ntk.as_ref().ok_or_else(|| CliError::Config("architecture yields no NTK".into()))?;
    let key = RngKey::new(o.seed());
    let mut rows = Vec::new();
    for w in widths {
        let spec_w = match w {
            Some(w) => spec.with_hidden_width(w)?,
            None => spec.clone(),
        };
        let mc = MonteCarloKernel::new(&spec_w, key.fold_in(w.unwrap_or(0) as u64), *ns.last().unwrap())?;
        for est in mc.estimate_prefixes(&a.x, x2, Get::Both, &ns)? {
            rows.push(vec![
                w.map_or("arch".into(), |w| w.to_string()),
                est.n_samples.to_string(),
                num(relative_frobenius_sq(&exact.nngp, &est.nngp)),
                num(relative_frobenius_sq(exact_ntk, est.ntk.as_ref().expect("requested NTK"))),
            ]);
        }
    }
    let out = OutDir::create(o.out())?;
    Ok(vec![
        out.table("mc.csv", &["width", "n_samples", "nngp_distance", "ntk_distance"], &rows)?,
        out.gnuplot(
            "mc",
            "set logscale xy\nset xlabel 'samples'\nset ylabel 'relative squared Frobenius distance'",
            "plot 'mc.csv' using 2:3 with points title 'NNGP', '' using 2:4 with points title 'NTK'",
        )?,
    ])
}

pub fn cmd_ensemble(o: &Options) -> Result<Vec<PathBuf>> {
    let spec = load_spec(o)?;
    let kf = kernel_fn(&spec, o)?;
    let train_set = load_dataset(o.data()?)?;
    let y = train_set.require_targets("ensemble")?.clone();
    let test = test_set(o)?.unwrap_or_else(|| train_set.clone());
    let members = match o.ensemble {
        Some(0) => return Err(CliError::Config("--ensemble must be at least 1".into())),
        n => n.unwrap_or(10),
    };
    let steps = o.steps.unwrap_or(1000);
    let lr = o.lr(0.1)?;
    let every = (steps / 50).max(1);
    let widths: Vec<Option<usize>> = match &o.widths {
        Some(_) => Options::positive_list("widths", o.widths.as_ref(), &[])?.into_iter().map(Some).collect(),
        None => vec![None],
    };

    let k_train = kf.compute(&train_set.x, None, Get::Both)?;
    let k_cross = kf.compute(&test.x, Some(&train_set.x), Get::Both)?;
    let k_test = kf.compute(&test.x, None, Get::Nngp)?;
    let analytic = gradient_descent_mse_ensemble(&k_train, &k_cross, &k_test, &y, lr, 0.0)?;
    let y_flat = train_set.y_flat();
    let has_test_y = test.y.ncols() == y.ncols();
    // Without test targets the trainer still needs some to record test outputs.
    let test_y_flat = if has_test_y { test.y_flat() } else { vec![0.0; test.len() * y.ncols()] };
    let classes = y.ncols();

    let out = OutDir::create(o.out())?;
    let mut files = Vec::new();
    let mut summary = Vec::new();
    for w in widths {
        let spec_w = match w {
            Some(w) => spec.with_hidden_width(w)?,
            None => spec.clone(),
        };
        let net = FiniteNet::new(&spec_w)?;
        if net.output_dim() != classes {
            return Err(CliError::Config(format!("network has {} outputs, targets have {classes}", net.output_dim())));
        }
        let config = TrainConfig { predict_every: every, ..TrainConfig::sgd(lr, steps) };
        let key = RngKey::new(o.seed());
        let test_pair = Some((&test.x, test_y_flat.as_slice()));
        let records: Vec<TrainRecord> = (0..members)
            .into_par_iter()
            .map(|i| train(&net, net.init_params(key.fold_in(i as u64)), &train_set.x, &y_flat, test_pair, &config))
            .collect::<tangent_kernels::Result<_>>()?;

        let tag = w.map_or("arch".to_string(), |w| w.to_string());
        let mut loss_rows = Vec::new();
        let mut traj_rows = Vec::new();
        let mut last: Option<(Vec<(f64, f64)>, EnsemblePrediction)> = None;
        for (slot, &(step, _, _)) in records[0].trajectory.iter().enumerate() {
            let a = analytic.predict(step as f64)?;
            let (ml, sl) = mean_std(records.iter().map(|r| r.train_loss[step]));
            let mut row = vec![
                step.to_string(),
                num(ml),
                num(sl),
                num(EnsemblePrediction::expected_loss(&a.train_mean, &a.train_cov, &y)),
            ];
            if has_test_y {
                let (mt, st) = mean_std(records.iter().map(|r| r.test_loss[step]));
                row.extend([
                    num(mt),
                    num(st),
                    num(EnsemblePrediction::expected_loss(&a.test_mean, &a.test_cov, &test.y)),
                ]);
            }
            loss_rows.push(row);
            let mut stats = Vec::new();
            for i in 0..test.len() {
                for c in 0..classes {
                    let (m, s) = mean_std(records.iter().map(|r| r.trajectory[slot].2[i * classes + c]));
                    stats.push((m, s));
                    traj_rows.push(vec![
                        step.to_string(),
                        i.to_string(),
                        c.to_string(),
                        num(test.x.row(i)[0]),
                        num(m),
                        num(s),
                        num(a.test_mean[(i, c)]),
                        num(a.test_cov[(i, i)].max(0.0).sqrt()),
                    ]);
                }
            }
            last = Some((stats, a));
        }
        let (stats, a) = last.expect("trajectory has the initial step");
        let within = stats
            .iter()
            .enumerate()
            .filter(|(j, (m, _))| {
                let (i, c) = (j / classes, j % classes);
                (m - a.test_mean[(i, c)]).abs() <= 2.0 * a.test_cov[(i, i)].max(0.0).sqrt()
            })
            .count();
        summary.push(vec![tag.clone(), num(within as f64 / stats.len() as f64)]);

        let mut header = vec!["step", "ensemble_train_loss", "ensemble_train_loss_std", "analytic_train_loss"];
        if has_test_y {
            header.extend(["ensemble_test_loss", "ensemble_test_loss_std", "analytic_test_loss"]);
        }
        files.push(out.table(&format!("ensemble_{tag}_loss.csv"), &header, &loss_rows)?);
        files.push(out.table(
            &format!("ensemble_{tag}_trajectory.csv"),
            &["step", "index", "class", "x0", "ensemble_mean", "ensemble_std", "analytic_mean", "analytic_std"],
            &traj_rows,
        )?);
        files.push(out.gnuplot(
            &format!("ensemble_{tag}"),
            "set logscale y\nset xlabel 'step'\nset ylabel 'loss'",
            &format!("plot 'ensemble_{tag}_loss.csv' using 1:2:3 with yerrorbars title 'ensemble', '' using 1:4 with lines title 'analytic'"),
        )?);
    }
    files.push(out.table("summary.csv", &["width", "fraction_within_2std"], &summary)?);
    Ok(files)
}

pub fn cmd_taylor(o: &Options) -> Result<Vec<PathBuf>> {
    let spec = load_spec(o)?;
    let train_set = load_dataset(o.data()?)?;
    train_set.require_targets("taylor")?;
    let test = test_set(o)?.unwrap_or_else(|| train_set.clone());
    let order = o.order.unwrap_or(1);
    if order > 2 {
        return Err(CliError::Config(format!("--order must be 0, 1 or 2, got {order}")));
    }
    let steps = o.steps.unwrap_or(100);
    let lr = o.lr(0.1)?;
    let optimizer = match o.momentum {
        None => Optimizer::Sgd { lr },
        Some(g) if (0.0..1.0).contains(&g) => Optimizer::Momentum { lr, gamma: g },
        Some(g) => return Err(CliError::Config(format!("--momentum must lie in [0, 1), got {g}"))),
    };
    let every = (steps / 50).max(1);
    let config = TrainConfig { optimizer, predict_every: every, ..TrainConfig::sgd(lr, steps) };
    let net = FiniteNet::new(&spec)?;
    let params0 = net.init_params(RngKey::new(o.seed()));
    let y = train_set.y_flat();
    let dummy = vec![0.0; test.len() * net.output_dim()];
    let test_pair = Some((&test.x, dummy.as_slice()));

    let truth = train(&net, params0.clone(), &train_set.x, &y, test_pair, &config)?;
    let models = (0..=order).map(|k| taylor_expand(&spec, &params0, k)).collect::<tangent_kernels::Result<Vec<_>>>()?;
    let runs = models
        .par_iter()
        .map(|m| train(m, params0.clone(), &train_set.x, &y, test_pair, &config))
        .collect::<tangent_kernels::Result<Vec<_>>>()?;

    let rms = |a: &[f64], b: &[f64]| {
        (a.iter().zip(b).map(|(u, v)| (u - v).powi(2)).sum::<f64>() / a.len().max(1) as f64).sqrt()
    };
    let mut rows = Vec::new();
    let mut sums = vec![0.0; runs.len()];
    for (slot, (step, _, ft)) in truth.trajectory.iter().enumerate() {
        let mut row = vec![step.to_string()];
        for (k, r) in runs.iter().enumerate() {
            let d = rms(ft, &r.trajectory[slot].2);
            sums[k] += d;
            row.push(num(d));
        }
        rows.push(row);
    }
    let count = truth.trajectory.len() as f64;
    let summary: Vec<Vec<String>> = runs
        .iter()
        .enumerate()
        .map(|(k, r)| vec![k.to_string(), num(sums[k] / count), num(*r.train_loss.last().unwrap())])
        .collect();

    let out = OutDir::create(o.out())?;
    let names: Vec<String> = (0..=order).map(|k| format!("order{k}")).collect();
    let mut header = vec!["step"];
    header.extend(names.iter().map(String::as_str));
    let plot = (0..=order).map(|k| format!("'taylor.csv' using 1:{} with lines", k + 2)).collect::<Vec<_>>().join(", ");
    Ok(vec![
        out.table("taylor.csv", &header, &rows)?,
        out.table("taylor_summary.csv", &["order", "mean_distance", "final_train_loss"], &summary)?,
        out.gnuplot("taylor", "set xlabel 'step'\nset ylabel 'RMS distance to network'", &format!("plot {plot}"))?,
    ])
}
