//! Dense ReLU network stored as one flat parameter vector.
//!
//! Layout, per layer `l` mapping width `d_l` to `d_{l+1}`: first the `d_{l+1} x d_l` weight
//! matrix in row-major order (one row per output unit), then the `d_{l+1}` biases. Layers follow
//! each other in order. Hidden layers use ReLU; the last layer emits logits for a softmax.

use rand_distr::{Distribution, Normal};

use super::LearnerError;
use crate::seed::rng_from_seed;

#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    layer_dims: Vec<usize>,
    values: Vec<f64>,
}

/// Number of parameters implied by a dimension list.
pub fn param_count(layer_dims: &[usize]) -> usize {
    layer_dims.windows(2).map(|w| w[0] * w[1] + w[1]).sum()
}

fn check_dims(layer_dims: &[usize]) -> Result<(), LearnerError> {
    if layer_dims.len() < 2 {
        return Err(LearnerError::InvalidDims(format!(
            "need at least an input and an output width, got {layer_dims:?}"
        )));
    }
    if layer_dims.contains(&0) {
        return Err(LearnerError::InvalidDims(format!(
            "zero-width layer in {layer_dims:?}"
        )));
    }
    Ok(())
}

impl ModelParams {
    pub fn zeros(layer_dims: &[usize]) -> Result<Self, LearnerError> {
        check_dims(layer_dims)?;
        Ok(Self {
            layer_dims: layer_dims.to_vec(),
            values: vec![0.0; param_count(layer_dims)],
        })
    }

    pub fn from_values(layer_dims: &[usize], values: Vec<f64>) -> Result<Self, LearnerError> {
        check_dims(layer_dims)?;
        let expected = param_count(layer_dims);
        if values.len() != expected {
            return Err(LearnerError::LengthMismatch {
                expected,
                found: values.len(),
            });
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(LearnerError::NonFinite("parameter vector".into()));
        }
        Ok(Self {
            layer_dims: layer_dims.to_vec(),
            values,
        })
    }

    pub fn layer_dims(&self) -> &[usize] {
        &self.layer_dims
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub(crate) fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn input_dim(&self) -> usize {
        self.layer_dims[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.layer_dims.last().expect("validated dims")
    }

    pub fn same_layout(&self, other: &ModelParams) -> bool {
        self.layer_dims == other.layer_dims
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }

    /// `(weight_offset, bias_offset)` of layer `l` within the flat vector.
    pub fn layer_offsets(&self, l: usize) -> (usize, usize) {
        let start = param_count(&self.layer_dims[..=l]);
        (start, start + self.layer_dims[l] * self.layer_dims[l + 1])
    }

    pub fn num_layers(&self) -> usize {
        self.layer_dims.len() - 1
    }
}

/// He-normal weights (`std = sqrt(2 / fan_in)`) and zero biases.
pub fn init_model(layer_dims: &[usize], seed: u64) -> Result<ModelParams, LearnerError> {
    let mut model = ModelParams::zeros(layer_dims)?;
    let mut rng = rng_from_seed(seed);
    for (l, &fan_in) in layer_dims[..model.num_layers()].iter().enumerate() {
        let std = (2.0 / fan_in as f64).sqrt();
        let normal = Normal::new(0.0, std).expect("positive std");
        let (w, b) = model.layer_offsets(l);
        for v in &mut model.values[w..b] {
            *v = normal.sample(&mut rng);
        }
    }
    Ok(model)
}

/// Per-example activation buffers, reused across examples.
#[derive(Debug, Clone)]
pub(crate) struct Workspace {
    /// `acts[0]` is the input copy; `acts[l + 1]` is the output of layer `l` (post-ReLU for
    /// hidden layers, raw logits for the last).
    acts: Vec<Vec<f64>>,
    deltas: Vec<Vec<f64>>,
    probs: Vec<f64>,
}

impl Workspace {
    pub(crate) fn new(layer_dims: &[usize]) -> Self {
        Self {
            acts: layer_dims.iter().map(|&d| vec![0.0; d]).collect(),
            deltas: layer_dims.iter().map(|&d| vec![0.0; d]).collect(),
            probs: vec![0.0; *layer_dims.last().unwrap_or(&0)],
        }
    }

    #[cfg(test)]
    pub(crate) fn probs(&self) -> &[f64] {
        &self.probs
    }
}

/// Runs the network on `x`, leaving logits in the workspace and softmax probabilities in
/// `ws.probs`. Returns `(cross_entropy, predicted_class)` for label `y`.
pub(crate) fn forward(
    model: &ModelParams,
    x: &[f64],
    y: usize,
    ws: &mut Workspace,
) -> (f64, usize) {
    let dims = &model.layer_dims;
    ws.acts[0].copy_from_slice(x);
    let last = model.num_layers() - 1;
    for l in 0..=last {
        let (w_off, b_off) = model.layer_offsets(l);
        let fan_in = dims[l];
        let (before, after) = ws.acts.split_at_mut(l + 1);
        let input = &before[l];
        let out = &mut after[0];
        for (j, o) in out.iter_mut().enumerate() {
            let row = &model.values[w_off + j * fan_in..w_off + (j + 1) * fan_in];
            let mut z = model.values[b_off + j];
            for (w, a) in row.iter().zip(input.iter()) {
                z += w * a;
            }
            *o = if l < last { z.max(0.0) } else { z };
        }
    }

    let logits = &ws.acts[last + 1];
    let mut max = f64::NEG_INFINITY;
    let mut argmax = 0;
    for (j, &z) in logits.iter().enumerate() {
        // strict comparison keeps the lowest index on ties
        if z > max {
            max = z;
            argmax = j;
        }
    }
    let sum: f64 = logits.iter().map(|&z| (z - max).exp()).sum();
    let lse = max + sum.ln();
    for (p, &z) in ws.probs.iter_mut().zip(logits.iter()) {
        *p = (z - lse).exp();
    }
    (lse - logits[y], argmax)
}

/// Forward plus backward for one example: adds `scale * d(CE)/d(theta)` into `grad` and returns
/// the cross-entropy.
pub(crate) fn accumulate_gradient(
    model: &ModelParams,
    x: &[f64],
    y: usize,
    scale: f64,
    grad: &mut [f64],
    ws: &mut Workspace,
) -> f64 {
    let (loss, _) = forward(model, x, y, ws);
    let dims = &model.layer_dims;
    let last = model.num_layers() - 1;

    // softmax + cross-entropy: dL/dz = p - onehot(y)
    let out_delta = &mut ws.deltas[last + 1];
    out_delta.copy_from_slice(&ws.probs);
    out_delta[y] -= 1.0;

    for l in (0..=last).rev() {
        let (w_off, b_off) = model.layer_offsets(l);
        let fan_in = dims[l];
        let (lower, upper) = ws.deltas.split_at_mut(l + 1);
        let delta = &upper[0];
        let input = &ws.acts[l];
        for (j, &d) in delta.iter().enumerate() {
            if d == 0.0 {
                continue;
            }
            let sd = scale * d;
            let g_row = &mut grad[w_off + j * fan_in..w_off + (j + 1) * fan_in];
            for (g, &a) in g_row.iter_mut().zip(input.iter()) {
                *g += sd * a;
            }
            grad[b_off + j] += sd;
        }
        if l > 0 {
            // propagate through W^T and the ReLU of layer l-1
            let prev = &mut lower[l];
            prev.iter_mut().for_each(|v| *v = 0.0);
            for (j, &d) in delta.iter().enumerate() {
                if d == 0.0 {
                    continue;
                }
                let row = &model.values[w_off + j * fan_in..w_off + (j + 1) * fan_in];
                for (p, &w) in prev.iter_mut().zip(row.iter()) {
                    *p += w * d;
                }
            }
            for (p, &a) in prev.iter_mut().zip(input.iter()) {
                if a <= 0.0 {
                    *p = 0.0;
                }
            }
        }
    }
    loss
}
