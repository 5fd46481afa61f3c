use rand::seq::SliceRandom;

use super::model::{accumulate_gradient, forward, Workspace};
use super::{check_compatible, FisherDiag, LearnerError, ModelParams};
use crate::data::LabeledDataset;
use crate::seed::rng_from_seed;

/// Local training hyper-parameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub local_epochs: usize,
    pub batch_size: usize,
    pub ewc_lambda: f64,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), LearnerError> {
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(LearnerError::InvalidConfig(format!(
                "learning_rate must be finite and > 0, got {}",
                self.learning_rate
            )));
        }
        if self.local_epochs == 0 {
            return Err(LearnerError::InvalidConfig(
                "local_epochs must be >= 1".into(),
            ));
        }
        if self.batch_size == 0 {
            return Err(LearnerError::InvalidConfig(
                "batch_size must be >= 1".into(),
            ));
        }
        if !(self.ewc_lambda.is_finite() && self.ewc_lambda >= 0.0) {
            return Err(LearnerError::InvalidConfig(format!(
                "ewc_lambda must be finite and >= 0, got {}",
                self.ewc_lambda
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalResult {
    /// Mean cross-entropy in nats.
    pub mean_loss: f64,
    /// Top-1 accuracy in percent.
    pub accuracy: f64,
}

pub fn forward_eval(
    model: &ModelParams,
    data: &LabeledDataset,
) -> Result<EvalResult, LearnerError> {
    check_compatible(model, data)?;
    let mut ws = Workspace::new(model.layer_dims());
    let mut loss = 0.0;
    let mut correct = 0usize;
    for i in 0..data.len() {
        let y = data.label(i);
        let (l, pred) = forward(model, data.row(i), y, &mut ws);
        loss += l;
        if pred == y {
            correct += 1;
        }
    }
    let n = data.len() as f64;
    Ok(EvalResult {
        mean_loss: (loss / n).max(0.0),
        accuracy: 100.0 * correct as f64 / n,
    })
}

/// Mean cross-entropy over `data` and its gradient, plus the EWC term when `penalty` is given.
///
/// The returned objective is `CE + lambda * sum F_i (theta_i - anchor_i)^2`.
pub fn objective_gradient(
    model: &ModelParams,
    data: &LabeledDataset,
    penalty: Option<(&ModelParams, &FisherDiag, f64)>,
) -> Result<(f64, Vec<f64>), LearnerError> {
    check_compatible(model, data)?;
    let mut grad = vec![0.0; model.len()];
    let mut ws = Workspace::new(model.layer_dims());
    let scale = 1.0 / data.len() as f64;
    let mut loss = 0.0;
    for i in 0..data.len() {
        loss += accumulate_gradient(model, data.row(i), data.label(i), scale, &mut grad, &mut ws);
    }
    loss *= scale;
    if let Some((anchor, fisher, lambda)) = penalty {
        check_penalty_layout(model, anchor, fisher)?;
        loss += super::ewc_penalty(model, anchor, fisher, lambda)?;
        add_penalty_gradient(model, anchor, fisher, lambda, &mut grad);
    }
    Ok((loss, grad))
}

fn check_penalty_layout(
    model: &ModelParams,
    anchor: &ModelParams,
    fisher: &FisherDiag,
) -> Result<(), LearnerError> {
    for found in [anchor.len(), fisher.len()] {
        if found != model.len() {
            return Err(LearnerError::LengthMismatch {
                expected: model.len(),
                found,
            });
        }
    }
    Ok(())
}

fn add_penalty_gradient(
    model: &ModelParams,
    anchor: &ModelParams,
    fisher: &FisherDiag,
    lambda: f64,
    grad: &mut [f64],
) {
    let two_lambda = 2.0 * lambda;
    for (((g, &t), &a), &f) in grad
        .iter_mut()
        .zip(model.values())
        .zip(anchor.values())
        .zip(fisher.values())
    {
        *g += two_lambda * f * (t - a);
    }
}

/// `cfg.local_epochs` epochs of mini-batch SGD on mean cross-entropy.
pub fn sgd_epochs(
    model: &ModelParams,
    data: &LabeledDataset,
    cfg: &TrainConfig,
    seed: u64,
) -> Result<ModelParams, LearnerError> {
    run_epochs(model, data, cfg, seed, None)
}

/// As [`sgd_epochs`], with every mini-batch gradient augmented by the EWC penalty gradient
/// `2 * cfg.ewc_lambda * F_i * (theta_i - anchor_i)`.
pub fn ewc_sgd_epochs(
    model: &ModelParams,
    data: &LabeledDataset,
    anchor: &ModelParams,
    fisher: &FisherDiag,
    cfg: &TrainConfig,
    seed: u64,
) -> Result<ModelParams, LearnerError> {
    check_penalty_layout(model, anchor, fisher)?;
    run_epochs(model, data, cfg, seed, Some((anchor, fisher)))
}

fn run_epochs(
    model: &ModelParams,
    data: &LabeledDataset,
    cfg: &TrainConfig,
    seed: u64,
    penalty: Option<(&ModelParams, &FisherDiag)>,
) -> Result<ModelParams, LearnerError> {
    cfg.validate()?;
    check_compatible(model, data)?;
    let penalty = penalty.filter(|_| cfg.ewc_lambda > 0.0);

    let mut params = model.clone();
    let mut grad = vec![0.0; params.len()];
    let mut ws = Workspace::new(params.layer_dims());
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut rng = rng_from_seed(seed);

    for epoch in 1..=cfg.local_epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            grad.iter_mut().for_each(|g| *g = 0.0);
            let scale = 1.0 / batch.len() as f64;
            for &i in batch {
                epoch_loss += accumulate_gradient(
                    &params,
                    data.row(i),
                    data.label(i),
                    scale,
                    &mut grad,
                    &mut ws,
                );
            }
            if let Some((anchor, fisher)) = penalty {
                add_penalty_gradient(&params, anchor, fisher, cfg.ewc_lambda, &mut grad);
            }
            for (p, g) in params.values_mut().iter_mut().zip(grad.iter()) {
                *p -= cfg.learning_rate * g;
            }
        }
        let mean = epoch_loss / data.len() as f64;
        if !mean.is_finite() || !params.is_finite() {
            return Err(LearnerError::Diverged { epoch, loss: mean });
        }
    }
    Ok(params)
}
