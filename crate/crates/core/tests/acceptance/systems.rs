use std::time::Instant;

use rand::Rng;
use tangent_kernels::batching::batch;
use tangent_kernels::empirical::empirical_ntk;
use tangent_kernels::finite::FiniteNet;
use tangent_kernels::netspec::zoo;
use tangent_kernels::{Get, InputShape, KernelFn, KernelFunction, Layer, NetSpec, Padding, Phi, RngKey};

use crate::{normal_batch, Outcome, Verdict};

pub fn batching_exact() -> Outcome {
    let image = InputShape::Image { h: 4, w: 4, c: 2 };
    let nets = [
        ("mlp", zoo::mlp(6, 1, 3, Phi::relu(), 1.4, 0.1, 1)),
        (
            "conv+pool",
            NetSpec::new(
                image,
                Layer::serial(vec![
                    Layer::conv(1, (3, 3), (1, 1), Padding::Same, 1.3, 0.1),
                    Layer::erf(),
                    Layer::GlobalAvgPool,
                    Layer::dense(1, 1.0, 0.0),
                ]),
            ),
        ),
    ];
    let mut mismatches = Vec::new();
    let mut checked = 0;
    for (name, spec) in &nets {
        let x1 = normal_batch(100, spec.input_shape, RngKey::new(51));
        let x2 = normal_batch(50, spec.input_shape, RngKey::new(52));
        let kfn = KernelFn::new(spec).unwrap();
        let whole_cross = kfn.compute(&x1, Some(&x2), Get::Both).unwrap();
        let whole_sym = kfn.compute(&x1, None, Get::Both).unwrap();
        for bs in [1, 7, 16, x1.len()] {
            for workers in [1, 2, 4] {
                let b = batch(&kfn, bs, workers).unwrap();
                if b.compute(&x1, Some(&x2), Get::Both).unwrap() != whole_cross {
                    mismatches.push(format!("{name} cross bs={bs} workers={workers}"));
                }
                if b.compute(&x1, None, Get::Both).unwrap() != whole_sym {
                    mismatches.push(format!("{name} symmetric bs={bs} workers={workers}"));
                }
                checked += 2;
            }
        }
    }
    let detail = if mismatches.is_empty() {
        format!("{checked} batched runs identical to the unbatched kernel")
    } else {
        format!("mismatches: {}", mismatches.join(", "))
    };
    Outcome::check(mismatches.is_empty(), detail)
}

fn benchmark_spec(input: InputShape) -> NetSpec {
    let mut layers = Vec::new();
    for _ in 0..21 {
        layers.push(Layer::conv(1, (3, 3), (1, 1), Padding::Same, 1.4, 0.1));
        layers.push(Layer::relu());
    }
    layers.push(Layer::GlobalAvgPool);
    layers.push(Layer::dense(1, 1.4, 0.1));
    NetSpec::new(input, Layer::serial(layers))
}

pub fn parallel_efficiency() -> Outcome {
    let input = InputShape::Image { h: 6, w: 6, c: 3 };
    let x = normal_batch(64, input, RngKey::new(61));
    let kfn = KernelFn::new(&benchmark_spec(input)).unwrap();
    let entries = (x.len() * x.len()) as f64;
    let time = |bs: usize, workers: usize| {
        let b = batch(&kfn, bs, workers).unwrap();
        let start = Instant::now();
        b.compute(&x, None, Get::Both).unwrap();
        start.elapsed().as_secs_f64()
    };

    let per_entry: Vec<(usize, f64)> = [1, 2, 4].into_iter().map(|w| (w, time(8, w) / entries)).collect();
    let efficiency = per_entry[0].1 / (4.0 * per_entry[2].1);
    let curve: Vec<String> =
        [1, 2, 4, 8, 16, 32, 64].into_iter().map(|bs| format!("bs={bs}: {:.0}/s", entries / time(bs, 4))).collect();
    let cores = std::thread::available_parallelism().map_or(1, |n| n.get());
    let timings: Vec<String> = per_entry.iter().map(|(w, t)| format!("{w}w {:.2e}s", t)).collect();
    let detail = format!(
        "efficiency at 4 workers {efficiency:.2} (bound 0.70); time per entry [{}]; throughput at 4 workers [{}]; {cores} core(s)",
        timings.join(", "),
        curve.join(", ")
    );
    if cores < 4 {
        return Outcome { verdict: Verdict::NotEvaluable, detail };
    }
    let non_increasing = per_entry.windows(2).all(|p| p[1].0 > cores || p[1].1 <= p[0].1);
    Outcome::check(efficiency >= 0.7 && non_increasing, detail)
}

fn autodiff_cases() -> Vec<(&'static str, NetSpec)> {
    let vec5 = InputShape::Vector(5);
    let img = InputShape::Image { h: 4, w: 4, c: 2 };
    let img5 = InputShape::Image { h: 5, w: 5, c: 2 };
    let hidden = |phi: Layer| {
        NetSpec::new(
            vec5,
            Layer::serial(vec![
                Layer::dense(6, 1.4, 0.1),
                phi,
                Layer::dense(6, 1.2, 0.2),
                Layer::erf(),
                Layer::dense(1, 1.0, 0.1),
            ]),
        )
    };
    let spatial = |input, middle: Vec<Layer>| {
        let mut layers = vec![Layer::conv(3, (3, 3), (1, 1), Padding::Same, 1.3, 0.1), Layer::erf()];
        layers.extend(middle);
        layers.push(Layer::dense(1, 1.1, 0.1));
        NetSpec::new(input, Layer::serial(layers))
    };
    vec![
        ("Dense", NetSpec::new(vec5, Layer::serial(vec![Layer::dense(6, 1.5, 0.1), Layer::dense(1, 1.2, 0.2)]))),
        ("Relu", hidden(Layer::relu())),
        ("LeakyRelu", hidden(Layer::leaky_relu(0.2))),
        ("Abs", hidden(Layer::abs())),
        ("ABRelu", hidden(Layer::ab_relu(-0.4, 1.3))),
        ("Erf", hidden(Layer::erf())),
        (
            "Conv CIRCULAR",
            spatial(img, vec![Layer::conv(3, (3, 3), (1, 1), Padding::Circular, 1.2, 0.1), Layer::Flatten]),
        ),
        ("Conv SAME", spatial(img, vec![Layer::conv(3, (2, 3), (2, 1), Padding::Same, 1.2, 0.1), Layer::Flatten])),
        ("Conv VALID", spatial(img5, vec![Layer::conv(3, (3, 3), (2, 2), Padding::Valid, 1.2, 0.1), Layer::Flatten])),
        (
            "Flatten",
            NetSpec::new(
                img,
                Layer::serial(vec![Layer::Flatten, Layer::dense(4, 1.3, 0.1), Layer::erf(), Layer::dense(1, 1.0, 0.0)]),
            ),
        ),
        ("AvgPool VALID", spatial(img, vec![Layer::avg_pool((2, 2), (2, 2), Padding::Valid), Layer::Flatten])),
        ("AvgPool SAME", spatial(img5, vec![Layer::avg_pool((3, 3), (2, 2), Padding::Same), Layer::Flatten])),
        ("GlobalAvgPool", spatial(img, vec![Layer::GlobalAvgPool])),
        (
            "FanInSum",
            NetSpec::new(
                vec5,
                Layer::serial(vec![
                    Layer::dense(6, 1.3, 0.1),
                    Layer::residual(vec![
                        Layer::serial(vec![Layer::erf(), Layer::dense(6, 1.2, 0.1)]),
                        Layer::Identity,
                    ]),
                    Layer::dense(1, 1.0, 0.1),
                ]),
            ),
        ),
        (
            "Dropout",
            NetSpec::new(
                vec5,
                Layer::serial(vec![
                    Layer::dense(6, 1.4, 0.1),
                    Layer::erf(),
                    Layer::dropout(0.6),
                    Layer::dense(1, 1.2, 0.1),
                ]),
            ),
        ),
    ]
}

pub fn autodiff() -> Outcome {
    let mut worst_grad = (0.0f64, "");
    let mut worst_asym = 0.0f64;
    let mut worst_neg = 0.0f64;
    for (name, spec) in autodiff_cases() {
        let net = FiniteNet::new(&spec).unwrap();
        let params = net.init_params(RngKey::new(81));
        let x = normal_batch(3, spec.input_shape, RngKey::new(82));
        let mut rng = RngKey::new(83).rng();
        let cot: Vec<f64> = (0..x.len()).map(|_| rng.sample(rand_distr::StandardNormal)).collect();
        let mask_key = RngKey::new(84);
        let dropout = spec.has_dropout();
        let out = |p: &tangent_kernels::finite::ParamTree| -> f64 {
            let f = if dropout { net.apply_sampled(p, &x, mask_key) } else { net.apply(p, &x) }.unwrap();
            f.data().iter().zip(&cot).map(|(a, b)| a * b).sum()
        };
        let grad = if dropout {
            net.grad_params_sampled(&params, &x, &cot, mask_key)
        } else {
            net.grad_params(&params, &x, &cot)
        }
        .unwrap()
        .to_flat();
        let flat = params.to_flat();
        let mut err2 = 0.0;
        for i in 0..flat.len() {
            let h = 1e-5 * flat[i].abs().max(1.0);
            let mut up = flat.clone();
            up[i] += h;
            let mut down = flat.clone();
            down[i] -= h;
            let fd = (out(&params.with_flat(&up)) - out(&params.with_flat(&down))) / (2.0 * h);
            err2 += (fd - grad[i]).powi(2);
        }
        let rel = err2.sqrt() / grad.iter().map(|g| g * g).sum::<f64>().sqrt();
        if rel > worst_grad.0 {
            worst_grad = (rel, name);
        }

        let xs = normal_batch(6, spec.input_shape, RngKey::new(85));
        let theta = empirical_ntk(&net, &params, &xs, None).unwrap();
        let scale = theta.amax();
        worst_asym = worst_asym.max((&theta - theta.transpose()).amax() / scale);
        let sym = (&theta + theta.transpose()) * 0.5;
        let eig = sym.symmetric_eigen().eigenvalues;
        worst_neg = worst_neg.max(-eig.min() / eig.max());
    }
    Outcome::check(
        worst_grad.0 <= 1e-5 && worst_asym <= 1e-10 && worst_neg <= 1e-10,
        format!(
            "worst gradient error {:.1e} ({}); NTK asymmetry {worst_asym:.1e}; most negative eigenvalue / largest {:.1e}",
            worst_grad.0, worst_grad.1, -worst_neg
        ),
    )
}
