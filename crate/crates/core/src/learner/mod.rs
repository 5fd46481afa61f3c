//! From-scratch dense MLP learner: evaluation, mini-batch SGD, and the elastic weight
//! consolidation (EWC) penalty with its diagonal Fisher estimate.

mod ewc;
mod model;
mod train;

pub use ewc::{compute_fisher_diag, ewc_penalty, FisherDiag};
pub use model::{init_model, param_count, ModelParams};
pub use train::{
    ewc_sgd_epochs, forward_eval, objective_gradient, sgd_epochs, EvalResult, TrainConfig,
};

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LearnerError {
    #[error("invalid layer dimensions: {0}")]
    InvalidDims(String),
    #[error("parameter length mismatch: expected {expected}, found {found}")]
    LengthMismatch { expected: usize, found: usize },
    #[error("non-finite values in {0}")]
    NonFinite(String),
    #[error("dataset does not fit model: {0}")]
    DimensionMismatch(String),
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("invalid training config: {0}")]
    InvalidConfig(String),
    #[error("training diverged in epoch {epoch} (mean loss {loss})")]
    Diverged { epoch: usize, loss: f64 },
}

pub(crate) fn check_compatible(
    model: &ModelParams,
    data: &crate::data::LabeledDataset,
) -> Result<(), LearnerError> {
    if data.is_empty() {
        return Err(LearnerError::EmptyDataset);
    }
    if data.feature_dim() != model.input_dim() {
        return Err(LearnerError::DimensionMismatch(format!(
            "feature width {} vs model input {}",
            data.feature_dim(),
            model.input_dim()
        )));
    }
    if data.num_classes() > model.output_dim() {
        return Err(LearnerError::DimensionMismatch(format!(
            "{} classes vs model output {}",
            data.num_classes(),
            model.output_dim()
        )));
    }
    Ok(())
}
