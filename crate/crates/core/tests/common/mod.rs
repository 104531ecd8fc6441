#![allow(dead_code)]

use anybit::autograd::{Tape, Var};
use anybit::error::Result;
use anybit::tensor::Tensor;
use anybit::trainer::RunConfig;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

pub const FD_STEP: f64 = 1e-4;
pub const FD_REL_TOL: f64 = 1e-5;
/// Denominator floor for the relative error of near-zero gradients.
const FD_FLOOR: f64 = 1e-3;

pub fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.random_range(lo..hi)).collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

/// Same as [`uniform`] but keeps every entry at least `gap` away from zero.
pub fn away_from_zero(rng: &mut ChaCha8Rng, shape: &[usize], gap: f64) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let m = rng.random_range(gap..1.0);
            if rng.random::<bool>() {
                m
            } else {
                -m
            }
        })
        .collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

fn projected(
    inputs: &[Tensor],
    build: &dyn Fn(&mut Tape, &[Var]) -> Result<Var>,
    proj: Option<&Tensor>,
    grad: bool,
) -> (Tape, Vec<Var>, Var, Tensor) {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs
        .iter()
        .map(|t| {
            let t = t.clone();
            tape.leaf(if grad { t.with_grad() } else { t }).unwrap()
        })
        .collect();
    let out = build(&mut tape, &vars).unwrap();
    let shape = tape.value(out).shape().to_vec();
    let r = match proj {
        Some(r) => r.clone(),
        None => {
            // deterministic, non-symmetric projection
            let n: usize = shape.iter().product();
            let data = (0..n)
                .map(|i| 0.3 + ((i * 7919) % 13) as f64 / 10.0)
                .collect();
            Tensor::new(shape.clone(), data).unwrap()
        }
    };
    let rv = tape.constant(r.clone()).unwrap();
    let prod = tape.mul(out, rv).unwrap();
    let loss = tape.sum(prod).unwrap();
    (tape, vars, loss, r)
}

/// Largest relative gap between the tape gradient of `Σ r ⊙ build(inputs)`
/// and its central finite difference, over every input element.
pub fn grad_check(inputs: &[Tensor], build: &dyn Fn(&mut Tape, &[Var]) -> Result<Var>) -> f64 {
    let (mut tape, vars, loss, r) = projected(inputs, build, None, true);
    tape.backward(loss).unwrap();
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .map(|v| tape.grad(*v).unwrap().to_vec())
        .collect();
    let eval = |ins: &[Tensor]| {
        let (tape, _, loss, _) = projected(ins, build, Some(&r), false);
        tape.value(loss).data()[0]
    };
    let mut worst = 0.0f64;
    for (k, input) in inputs.iter().enumerate() {
        for i in 0..input.numel() {
            let mut plus = inputs.to_vec();
            plus[k].data_mut()[i] += FD_STEP;
            let mut minus = inputs.to_vec();
            minus[k].data_mut()[i] -= FD_STEP;
            let numeric = (eval(&plus) - eval(&minus)) / (2.0 * FD_STEP);
            let a = analytic[k][i];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(FD_FLOOR);
            worst = worst.max(rel);
        }
    }
    worst
}

/// Step-by-step weight quantization written independently of the library:
/// tanh squash, scale to [0,1], round to `b1` levels, keep the top `b` bits,
/// map to [−1,1] and shift to the `b1` mean.
pub fn oracle_weights_at(w: &[f64], b: u8, b1: u8) -> Vec<f64> {
    let levels_b1 = 2f64.powi(b1 as i32) - 1.0;
    let levels_b = 2f64.powi(b as i32) - 1.0;
    let mut max_abs = 0.0f64;
    for v in w {
        max_abs = max_abs.max(v.tanh().abs());
    }
    let mut codes = Vec::new();
    for v in w {
        let u = if max_abs == 0.0 {
            0.5
        } else {
            v.tanh() / (2.0 * max_abs) + 0.5
        };
        codes.push((u * levels_b1).round() as u64);
    }
    let full: Vec<f64> = codes
        .iter()
        .map(|k| 2.0 * *k as f64 / levels_b1 - 1.0)
        .collect();
    let divisor = 2u64.pow((b1 - b) as u32);
    let low: Vec<f64> = codes
        .iter()
        .map(|k| 2.0 * (k / divisor) as f64 / levels_b - 1.0)
        .collect();
    let mean_full = full.iter().sum::<f64>() / full.len() as f64;
    let mean_low = low.iter().sum::<f64>() / low.len() as f64;
    low.iter().map(|v| v + mean_full - mean_low).collect()
}

/// Desk task: four Gaussian blobs in 16 dimensions, MLP with two quantized
/// 64-unit blocks.
pub fn desk_toml(mode: &str, bits: &[u8], seed: u64, epochs: usize) -> String {
    format!(
        r#"
schema_version = 1
mode = "{mode}"
bits = {bits:?}
epochs = {epochs}
batch_size = 64
seed = {seed}

[optimizer]
lr = 0.05
weight_decay = 5e-4

[model]
kind = "mlp"
hidden = [64, 64, 64]

[data.train]
kind = "synthetic_blobs"
classes = 4
samples = 4000
dim = 16
spread = 1.0
seed = {seed}

[data.test]
kind = "synthetic_blobs"
classes = 4
samples = 1000
dim = 16
spread = 1.0
seed = {seed}
draw = 1
"#
    )
}

pub fn desk_config(mode: &str, bits: &[u8], seed: u64, epochs: usize) -> RunConfig {
    RunConfig::from_toml(&desk_toml(mode, bits, seed, epochs)).unwrap()
}

/// A small, fast variant of the desk task for invariance tests.
pub fn tiny_config(mode: &str, bits: &[u8], seed: u64, epochs: usize) -> RunConfig {
    let text = desk_toml(mode, bits, seed, epochs)
        .replace("samples = 4000", "samples = 256")
        .replace("samples = 1000", "samples = 128")
        .replace("hidden = [64, 64, 64]", "hidden = [16, 16, 16]");
    RunConfig::from_toml(&text).unwrap()
}

pub const SMOOTH_OPS: &[&str] = &[
    "add",
    "sub",
    "mul",
    "scale",
    "sum",
    "mean",
    "relu",
    "matmul",
    "add_bias",
    "reshape",
    "softmax",
    "cross_entropy",
    "kl_div",
    "conv2d",
    "batchnorm_train",
    "batchnorm_eval",
    "avg_pool2d",
    "max_pool2d",
];

/// One randomized finite-difference trial of op `name`; returns the worst
/// relative gradient error.
pub fn op_trial(name: &str, rng: &mut ChaCha8Rng) -> f64 {
    let n = rng.random_range(1..5usize);
    let m = rng.random_range(1..6usize);
    match name {
        "add" => grad_check(
            &[
                uniform(rng, &[n, m], -1.0, 1.0),
                uniform(rng, &[n, m], -1.0, 1.0),
            ],
            &|t, v| t.add(v[0], v[1]),
        ),
        "sub" => grad_check(
            &[
                uniform(rng, &[n, m], -1.0, 1.0),
                uniform(rng, &[n, m], -1.0, 1.0),
            ],
            &|t, v| t.sub(v[0], v[1]),
        ),
        "mul" => grad_check(
            &[
                uniform(rng, &[n, m], -1.0, 1.0),
                uniform(rng, &[n, m], -1.0, 1.0),
            ],
            &|t, v| t.mul(v[0], v[1]),
        ),
        "scale" => {
            let c = rng.random_range(-3.0..3.0);
            grad_check(&[uniform(rng, &[n, m], -1.0, 1.0)], &move |t, v| {
                t.scale(v[0], c)
            })
        }
        "sum" => grad_check(&[uniform(rng, &[n, m], -1.0, 1.0)], &|t, v| t.sum(v[0])),
        "mean" => grad_check(&[uniform(rng, &[n, m], -1.0, 1.0)], &|t, v| t.mean(v[0])),
        "relu" => grad_check(&[away_from_zero(rng, &[n, m], 1e-2)], &|t, v| t.relu(v[0])),
        "matmul" => {
            let k = rng.random_range(1..6usize);
            grad_check(
                &[
                    uniform(rng, &[n, k], -1.0, 1.0),
                    uniform(rng, &[k, m], -1.0, 1.0),
                ],
                &|t, v| t.matmul(v[0], v[1]),
            )
        }
        "add_bias" => grad_check(
            &[
                uniform(rng, &[n, m], -1.0, 1.0),
                uniform(rng, &[m], -1.0, 1.0),
            ],
            &|t, v| t.add_bias(v[0], v[1]),
        ),
        "reshape" => grad_check(&[uniform(rng, &[n, m, 2], -1.0, 1.0)], &|t, v| {
            t.flatten(v[0])
        }),
        "softmax" => grad_check(&[uniform(rng, &[n, m + 1], -2.0, 2.0)], &|t, v| {
            t.softmax(v[0])
        }),
        "cross_entropy" => {
            let c = m + 1;
            let labels: Vec<usize> = (0..n).map(|_| rng.random_range(0..c)).collect();
            grad_check(&[uniform(rng, &[n, c], -2.0, 2.0)], &move |t, v| {
                let p = t.softmax(v[0])?;
                t.cross_entropy(p, &labels)
            })
        }
        "kl_div" => grad_check(
            &[
                uniform(rng, &[n, m + 1], -2.0, 2.0),
                uniform(rng, &[n, m + 1], -2.0, 2.0),
            ],
            &|t, v| {
                let p = t.softmax(v[0])?;
                let q = t.softmax(v[1])?;
                t.kl_div(p, q)
            },
        ),
        "conv2d" => {
            let c = rng.random_range(1..3usize);
            let f = rng.random_range(1..3usize);
            let k = rng.random_range(1..4usize);
            let h = rng.random_range(k..k + 3);
            let stride = rng.random_range(1..3usize);
            let padding = rng.random_range(0..2usize);
            grad_check(
                &[
                    uniform(rng, &[2, c, h, h], -1.0, 1.0),
                    uniform(rng, &[f, c, k, k], -1.0, 1.0),
                ],
                &move |t, v| t.conv2d(v[0], v[1], stride, padding),
            )
        }
        "batchnorm_train" => {
            let rows = n + 2;
            grad_check(
                &[
                    uniform(rng, &[rows, m, 2], -1.0, 1.0),
                    uniform(rng, &[m], 0.5, 1.5),
                    uniform(rng, &[m], -0.5, 0.5),
                ],
                &|t, v| Ok(t.batchnorm_train(v[0], v[1], v[2])?.0),
            )
        }
        "batchnorm_eval" => {
            let mean: Vec<f64> = (0..m).map(|_| rng.random_range(-0.5..0.5)).collect();
            let var: Vec<f64> = (0..m).map(|_| rng.random_range(0.2..2.0)).collect();
            grad_check(
                &[
                    uniform(rng, &[n, m], -1.0, 1.0),
                    uniform(rng, &[m], 0.5, 1.5),
                    uniform(rng, &[m], -0.5, 0.5),
                ],
                &move |t, v| t.batchnorm_eval(v[0], v[1], v[2], &mean, &var),
            )
        }
        "avg_pool2d" => grad_check(&[uniform(rng, &[n, 2, 4, 4], -1.0, 1.0)], &|t, v| {
            t.avg_pool2d(v[0], 2)
        }),
        "max_pool2d" => {
            // distinct values spaced well beyond the finite-difference step
            let mut x = uniform(rng, &[n, 2, 4, 4], 0.0, 1.0);
            let len = x.numel();
            let mut order: Vec<usize> = (0..len).collect();
            order.sort_by(|a, b| x.data()[*a].total_cmp(&x.data()[*b]));
            for (rank, idx) in order.into_iter().enumerate() {
                x.data_mut()[idx] = rank as f64 * 0.01;
            }
            grad_check(&[x], &|t, v| t.max_pool2d(v[0], 2))
        }
        other => panic!("unknown op {other}"),
    }
}
