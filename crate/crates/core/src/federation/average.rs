use super::FederationError;
use crate::learner::ModelParams;

/// Coordinate-wise mean weighted by `n_k / sum(n_k)`.
///
/// Each coordinate is clamped to the inputs' range so rounding can never leave the convex hull,
/// which also makes averaging identical models return them unchanged.
pub fn average_weights(
    models: &[&ModelParams],
    sample_counts: &[usize],
) -> Result<ModelParams, FederationError> {
    let first = *models
        .first()
        .ok_or_else(|| FederationError::InvalidArgument("nothing to average".into()))?;
    if models.len() != sample_counts.len() {
        return Err(FederationError::InvalidArgument(format!(
            "{} models but {} sample counts",
            models.len(),
            sample_counts.len()
        )));
    }
    if sample_counts.contains(&0) {
        return Err(FederationError::InvalidArgument(
            "sample counts must be >= 1".into(),
        ));
    }
    if let Some(bad) = models.iter().position(|m| !m.same_layout(first)) {
        return Err(FederationError::InvalidArgument(format!(
            "model {bad} has layout {:?}, expected {:?}",
            models[bad].layer_dims(),
            first.layer_dims()
        )));
    }

    let total: f64 = sample_counts.iter().map(|&n| n as f64).sum();
    let mut out = first.values().to_vec();
    for (j, o) in out.iter_mut().enumerate() {
        let mut acc = 0.0;
        let mut lo = f64::INFINITY;
        let mut hi = f64::NEG_INFINITY;
        for (m, &n) in models.iter().zip(sample_counts) {
            let v = m.values()[j];
            acc += (n as f64 / total) * v;
            lo = lo.min(v);
            hi = hi.max(v);
        }
        *o = acc.clamp(lo, hi);
    }
    Ok(ModelParams::from_values(first.layer_dims(), out)?)
}
