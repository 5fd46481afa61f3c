use super::model::{accumulate_gradient, Workspace};
use super::{check_compatible, LearnerError, ModelParams};
use crate::data::LabeledDataset;

/// Diagonal of the empirical Fisher information, laid out like the model it was computed from.
#[derive(Debug, Clone, PartialEq)]
pub struct FisherDiag {
    values: Vec<f64>,
}

impl FisherDiag {
    pub fn new(values: Vec<f64>) -> Result<Self, LearnerError> {
        if values.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(LearnerError::NonFinite(
                "fisher diagonal (entries must be finite and >= 0)".into(),
            ));
        }
        Ok(Self { values })
    }

    pub fn zeros(len: usize) -> Self {
        Self {
            values: vec![0.0; len],
        }
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Weighted mean of several diagonals; weights need not be normalised.
    pub fn weighted_mean(parts: &[(&FisherDiag, f64)]) -> Result<Self, LearnerError> {
        let (first, _) = parts
            .first()
            .ok_or_else(|| LearnerError::InvalidConfig("no fisher diagonals to average".into()))?;
        let total: f64 = parts.iter().map(|(_, w)| w).sum();
        let mut values = vec![0.0; first.len()];
        for (f, w) in parts {
            if f.len() != values.len() {
                return Err(LearnerError::LengthMismatch {
                    expected: values.len(),
                    found: f.len(),
                });
            }
            let share = w / total;
            for (v, x) in values.iter_mut().zip(f.values()) {
                *v += share * x;
            }
        }
        Self::new(values)
    }
}

/// `lambda * sum_i F_i * (theta_i - anchor_i)^2`.
pub fn ewc_penalty(
    model: &ModelParams,
    anchor: &ModelParams,
    fisher: &FisherDiag,
    lambda: f64,
) -> Result<f64, LearnerError> {
    for found in [anchor.len(), fisher.len()] {
        if found != model.len() {
            return Err(LearnerError::LengthMismatch {
                expected: model.len(),
                found,
            });
        }
    }
    let sum: f64 = model
        .values()
        .iter()
        .zip(anchor.values())
        .zip(fisher.values())
        .map(|((t, a), f)| f * (t - a) * (t - a))
        .sum();
    Ok(lambda * sum)
}

/// Mean over examples of the squared gradient of the observed label's log-likelihood.
pub fn compute_fisher_diag(
    model: &ModelParams,
    data: &LabeledDataset,
) -> Result<FisherDiag, LearnerError> {
    check_compatible(model, data)?;
    let mut ws = Workspace::new(model.layer_dims());
    let mut per_example = vec![0.0; model.len()];
    let mut acc = vec![0.0; model.len()];
    for i in 0..data.len() {
        per_example.iter_mut().for_each(|g| *g = 0.0);
        accumulate_gradient(
            model,
            data.row(i),
            data.label(i),
            1.0,
            &mut per_example,
            &mut ws,
        );
        for (a, g) in acc.iter_mut().zip(per_example.iter()) {
            *a += g * g;
        }
    }
    let n = data.len() as f64;
    acc.iter_mut().for_each(|a| *a /= n);
    FisherDiag::new(acc)
}
