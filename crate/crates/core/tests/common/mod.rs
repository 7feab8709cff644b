#![allow(dead_code)]

use ouidecay::harness::RunConfig;
use ouidecay::{LayerSpec, Network, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_tensor(rng: &mut impl Rng, shape: Vec<usize>, scale: f64) -> Tensor {
    let n = shape.iter().product();
    let v = (0..n).map(|_| rng.random_range(-scale..scale)).collect();
    Tensor::new(shape, v).unwrap()
}

/// Scalar-loop OUI: counts, minority counts, then the normalized mean.
pub fn oui_oracle(bits: &[bool], b: usize, d: usize) -> f64 {
    let mut total = 0.0;
    for j in 0..d {
        let mut s = 0usize;
        for i in 0..b {
            if bits[i * d + j] {
                s += 1;
            }
        }
        let u = if s < b - s { s } else { b - s };
        total += u as f64 / (b / 2) as f64;
    }
    total / d as f64
}

/// Direct evaluation of one dense layer with `w` laid out `[out, in]`.
pub fn affine(x: &[f64], w: &[f64], bias: &[f64]) -> Vec<f64> {
    let inputs = x.len();
    (0..bias.len())
        .map(|o| {
            let mut acc = bias[o];
            for i in 0..inputs {
                acc += w[o * inputs + i] * x[i];
            }
            acc
        })
        .collect()
}

pub fn relu(v: Vec<f64>) -> Vec<f64> {
    v.into_iter().map(|x| if x > 0.0 { x } else { 0.0 }).collect()
}

/// Mean cross-entropy evaluated with an explicit log-sum-exp per row.
pub fn cross_entropy_oracle(logits: &[f64], classes: usize, labels: &[usize]) -> f64 {
    let mut total = 0.0;
    for (row, &y) in logits.chunks(classes).zip(labels) {
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
        total += lse - row[y];
    }
    total / labels.len() as f64
}

pub fn mlp(inputs: usize, hidden: usize, classes: usize, seed: u64) -> Network {
    Network::new(
        vec![
            LayerSpec::dense(inputs, hidden),
            LayerSpec::relu(true),
            LayerSpec::dense(hidden, classes),
        ],
        &[inputs],
        seed,
    )
    .unwrap()
}

pub fn small_cnn(seed: u64) -> Network {
    Network::new(
        vec![
            LayerSpec::conv2d(1, 4, 3, 1),
            LayerSpec::relu(true),
            LayerSpec::max_pool(2),
            LayerSpec::conv2d(4, 6, 3, 1),
            LayerSpec::relu(true),
            LayerSpec::Flatten,
            LayerSpec::dense(6 * 4 * 4, 8),
            LayerSpec::relu(true),
            LayerSpec::dense(8, 3),
        ],
        &[1, 8, 8],
        seed,
    )
    .unwrap()
}

/// Two-layer MLP on separable blobs, small enough for unit-scale tests.
pub fn blobs_config(mode: &str, lambda: f64, t_tilde: u64, epochs: usize) -> RunConfig {
    RunConfig::from_toml_str(&format!(
        r#"
        name = "blobs-mlp"
        seeds = [1, 2, 3]
        epochs = {epochs}
        batch_size = 16

        [data]
        val_fraction = 0.25
        seed = 4

        [data.source]
        kind = "blobs"
        n = 240
        classes = 3
        noise = 0.0
        features = 2

        [[model.layers]]
        kind = "dense"
        in_features = 2
        out_features = 16

        [[model.layers]]
        kind = "relu"
        monitored = true

        [[model.layers]]
        kind = "dense"
        in_features = 16
        out_features = 16

        [[model.layers]]
        kind = "relu"
        monitored = true

        [[model.layers]]
        kind = "dense"
        in_features = 16
        out_features = 3

        [optimizer]
        kind = "adamw"
        base_lr = 1e-2
        min_lr = 1e-4
        warmup_steps = 5

        [scheduler]
        mode = "{mode}"
        lambda_base = {lambda:e}
        t_tilde = {t_tilde}
        "#
    ))
    .unwrap()
}

/// The comparison CNN: two conv blocks and one hidden dense layer on
/// 10,000 noisy 12x12 glyph images.
pub fn glyph_cnn_config() -> RunConfig {
    let path = std::path::Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/glyph_cnn.toml");
    RunConfig::from_path(&path).unwrap()
}

pub const FD_STEP: f64 = 1e-4;
pub const FD_REL_TOL: f64 = 1e-3;
/// Gradients smaller than this are compared on an absolute scale.
pub const FD_FLOOR: f64 = 1e-6;

#[derive(Debug, Default, Clone, Copy)]
pub struct GradCheck {
    pub checked: usize,
    /// Coordinates whose central difference straddles a ReLU or max-pool
    /// kink, detected by disagreement between step h and step h/2.
    pub kinked: usize,
    pub worst_rel: f64,
}

fn batch_loss(net: &Network, x: &Tensor, y: &[usize]) -> f64 {
    ouidecay::nn::loss(&ouidecay::nn::predict(net, x).unwrap(), y).unwrap()
}

fn central<F: FnMut(f64) -> f64>(mut f: F, h: f64) -> f64 {
    (f(h) - f(-h)) / (2.0 * h)
}

fn compare(acc: &mut GradCheck, analytic: f64, fd: f64, fd_half: f64) {
    let scale = analytic.abs().max(fd.abs()).max(FD_FLOOR);
    if (fd - fd_half).abs() > 0.1 * FD_REL_TOL * scale {
        acc.kinked += 1;
        return;
    }
    acc.checked += 1;
    acc.worst_rel = acc.worst_rel.max((analytic - fd).abs() / scale);
}

/// Compares every parameter and input gradient with central differences.
pub fn gradcheck(net: &mut Network, x: &Tensor, y: &[usize]) -> GradCheck {
    let trace = ouidecay::nn::forward(net, x, false).unwrap();
    let grads = ouidecay::nn::backward(net, &trace, y).unwrap();
    let mut acc = GradCheck::default();
    let ids: Vec<_> = net.param_layers();
    for id in ids {
        for which in 0..2 {
            let n = {
                let p = &net.params()[&id];
                if which == 0 { p.weight.len() } else { p.bias.len() }
            };
            for k in 0..n {
                let mut eval = |h: f64| {
                    let p = net.params_mut().get_mut(&id).unwrap();
                    let t = if which == 0 { &mut p.weight } else { &mut p.bias };
                    let orig = t.values()[k];
                    t.values_mut()[k] = orig + h;
                    let l = batch_loss(net, x, y);
                    let p = net.params_mut().get_mut(&id).unwrap();
                    let t = if which == 0 { &mut p.weight } else { &mut p.bias };
                    t.values_mut()[k] = orig;
                    l
                };
                let fd = central(&mut eval, FD_STEP);
                let fd_half = central(&mut eval, FD_STEP / 2.0);
                let g = &grads.params[&id];
                let analytic = if which == 0 { g.weight.values()[k] } else { g.bias.values()[k] };
                compare(&mut acc, analytic, fd, fd_half);
            }
        }
    }
    for k in 0..x.len() {
        let mut xp = x.clone();
        let mut eval = |h: f64| {
            let orig = x.values()[k];
            xp.values_mut()[k] = orig + h;
            let l = batch_loss(net, &xp, y);
            xp.values_mut()[k] = orig;
            l
        };
        let fd = central(&mut eval, FD_STEP);
        let fd_half = central(&mut eval, FD_STEP / 2.0);
        compare(&mut acc, grads.input.values()[k], fd, fd_half);
    }
    acc
}

/// One small network per layer kind, each containing that kind.
pub fn gradcheck_cases() -> Vec<(&'static str, Vec<LayerSpec>, Vec<usize>)> {
    vec![
        ("dense", vec![LayerSpec::dense(4, 3)], vec![4]),
        (
            "relu",
            vec![LayerSpec::dense(4, 6), LayerSpec::relu(true), LayerSpec::dense(6, 3)],
            vec![4],
        ),
        (
            "conv2d",
            vec![
                LayerSpec::conv2d(2, 3, 3, 1),
                LayerSpec::Flatten,
                LayerSpec::dense(3 * 5 * 5, 3),
            ],
            vec![2, 5, 5],
        ),
        (
            "conv2d_strided",
            vec![
                LayerSpec::Conv2d {
                    in_channels: 2,
                    out_channels: 2,
                    kernel: 3,
                    stride: 2,
                    padding: 1,
                },
                LayerSpec::Flatten,
                LayerSpec::dense(2 * 3 * 3, 3),
            ],
            vec![2, 5, 5],
        ),
        (
            "max_pool2d",
            vec![
                LayerSpec::conv2d(1, 2, 3, 1),
                LayerSpec::max_pool(2),
                LayerSpec::Flatten,
                LayerSpec::dense(2 * 3 * 3, 3),
            ],
            vec![1, 6, 6],
        ),
        (
            "flatten",
            vec![LayerSpec::Flatten, LayerSpec::dense(2 * 2 * 2, 3)],
            vec![2, 2, 2],
        ),
    ]
}

/// Runs `instances` random instances of every case; returns per-case
/// aggregates.
pub fn gradcheck_all(instances: u64) -> Vec<(&'static str, u64, GradCheck)> {
    let mut out = Vec::new();
    for (name, layers, shape) in gradcheck_cases() {
        let mut agg = GradCheck::default();
        for seed in 0..instances {
            let mut net = Network::new(layers.clone(), &shape, seed).unwrap();
            let mut r = rng(1000 + seed);
            let mut full = vec![3];
            full.extend_from_slice(&shape);
            let x = random_tensor(&mut r, full, 1.0);
            let y: Vec<usize> = (0..3).map(|_| r.random_range(0..3)).collect();
            let g = gradcheck(&mut net, &x, &y);
            agg.checked += g.checked;
            agg.kinked += g.kinked;
            agg.worst_rel = agg.worst_rel.max(g.worst_rel);
        }
        out.push((name, instances, agg));
    }
    out
}
