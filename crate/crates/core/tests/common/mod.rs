//! Independent oracles shared by the integration tests. Nothing here calls into the library's
//! numeric code; the oracles re-derive values from the documented parameter layout.
#![allow(dead_code)]

use fedfmc::data::LabeledDataset;
use fedfmc::learner::{FisherDiag, ModelParams};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Straight-line forward pass over the flat layout: per layer, an `out x in` row-major weight
/// block followed by `out` biases; ReLU on hidden layers; plain (non-log-sum-exp) softmax.
pub fn oracle_logits(dims: &[usize], values: &[f64], x: &[f64]) -> Vec<f64> {
    let mut act = x.to_vec();
    let mut off = 0;
    for l in 0..dims.len() - 1 {
        let (fan_in, fan_out) = (dims[l], dims[l + 1]);
        let w = &values[off..off + fan_in * fan_out];
        let b = &values[off + fan_in * fan_out..off + fan_in * fan_out + fan_out];
        off += fan_in * fan_out + fan_out;
        let mut next = vec![0.0; fan_out];
        for o in 0..fan_out {
            let mut z = b[o];
            for i in 0..fan_in {
                z += w[o * fan_in + i] * act[i];
            }
            next[o] = if l + 2 < dims.len() { z.max(0.0) } else { z };
        }
        act = next;
    }
    act
}

pub fn oracle_example_loss(dims: &[usize], values: &[f64], x: &[f64], y: usize) -> f64 {
    let logits = oracle_logits(dims, values, x);
    let exps: Vec<f64> = logits.iter().map(|z| z.exp()).collect();
    let total: f64 = exps.iter().sum();
    -(exps[y] / total).ln()
}

pub fn oracle_mean_loss(dims: &[usize], values: &[f64], data: &LabeledDataset) -> f64 {
    (0..data.len())
        .map(|i| oracle_example_loss(dims, values, data.row(i), data.label(i)))
        .sum::<f64>()
        / data.len() as f64
}

pub fn oracle_accuracy(dims: &[usize], values: &[f64], data: &LabeledDataset) -> f64 {
    let correct = (0..data.len())
        .filter(|&i| {
            let logits = oracle_logits(dims, values, data.row(i));
            let mut best = 0;
            for (c, &z) in logits.iter().enumerate() {
                if z > logits[best] {
                    best = c;
                }
            }
            best == data.label(i)
        })
        .count();
    100.0 * correct as f64 / data.len() as f64
}

pub fn oracle_penalty(values: &[f64], anchor: &[f64], fisher: &[f64], lambda: f64) -> f64 {
    let mut s = 0.0;
    for i in 0..values.len() {
        s += fisher[i] * (values[i] - anchor[i]).powi(2);
    }
    lambda * s
}

/// Central finite differences of `f` at `x` with step `h`.
pub fn central_diff(x: &[f64], h: f64, f: impl Fn(&[f64]) -> f64) -> Vec<f64> {
    let mut probe = x.to_vec();
    (0..x.len())
        .map(|i| {
            let orig = probe[i];
            probe[i] = orig + h;
            let plus = f(&probe);
            probe[i] = orig - h;
            let minus = f(&probe);
            probe[i] = orig;
            (plus - minus) / (2.0 * h)
        })
        .collect()
}

/// Largest componentwise `|a - b| / max(|a|, |b|, floor)`.
pub fn max_rel_err(a: &[f64], b: &[f64], floor: f64) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs() / x.abs().max(y.abs()).max(floor))
        .fold(0.0, f64::max)
}

pub fn random_dims(rng: &mut impl Rng) -> Vec<usize> {
    let layers = rng.random_range(2..=4);
    let mut dims: Vec<usize> = (0..layers).map(|_| rng.random_range(1..=5)).collect();
    // a classifier needs at least two outputs
    *dims.last_mut().unwrap() = rng.random_range(2..=4);
    dims
}

pub fn random_model(dims: &[usize], rng: &mut impl Rng) -> ModelParams {
    let n = fedfmc::learner::param_count(dims);
    let values = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
    ModelParams::from_values(dims, values).unwrap()
}

/// `n` examples with features in [-1, 1] and labels cycling through the output classes.
pub fn random_data(input: usize, classes: usize, n: usize, rng: &mut impl Rng) -> LabeledDataset {
    let features = (0..n * input)
        .map(|_| rng.random_range(-1.0..1.0))
        .collect();
    let labels = (0..n).map(|i| i % classes).collect();
    LabeledDataset::new(features, input, labels, classes).unwrap()
}

pub fn random_fisher(len: usize, rng: &mut impl Rng) -> FisherDiag {
    FisherDiag::new((0..len).map(|_| rng.random_range(0.0..2.0)).collect()).unwrap()
}

/// Weighted sum computed one model at a time with exact fractions of the total count.
pub fn brute_force_average(models: &[Vec<f64>], counts: &[usize]) -> Vec<f64> {
    let total: usize = counts.iter().sum();
    let mut out = vec![0.0; models[0].len()];
    for (m, &c) in models.iter().zip(counts) {
        for (o, v) in out.iter_mut().zip(m) {
            *o += v * c as f64 / total as f64;
        }
    }
    out
}

pub fn median(mut v: Vec<f64>) -> f64 {
    assert!(!v.is_empty());
    v.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    }
}
