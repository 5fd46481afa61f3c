use rand_distr::{Distribution, StandardNormal};

use super::{DataError, LabeledDataset};
use crate::seed::rng_from_seed;

/// Deterministic class centres whose pairwise distances are all at least `separation`.
///
/// With `feature_dim >= num_classes` the centres sit on scaled basis vectors (all pairs exactly
/// `separation` apart); otherwise they are spread on a circle in the first two coordinates, or on
/// a line when there is only one coordinate.
pub fn class_means(num_classes: usize, feature_dim: usize, separation: f64) -> Vec<Vec<f64>> {
    (0..num_classes)
        .map(|c| {
            let mut mean = vec![0.0; feature_dim];
            if feature_dim >= num_classes {
                mean[c] = separation / std::f64::consts::SQRT_2;
            } else if feature_dim >= 2 {
                let step = std::f64::consts::TAU / num_classes as f64;
                let radius = separation / (2.0 * (step / 2.0).sin());
                mean[0] = radius * (step * c as f64).cos();
                mean[1] = radius * (step * c as f64).sin();
            } else {
                mean[0] = separation * c as f64;
            }
            mean
        })
        .collect()
}

/// Isotropic unit-variance Gaussian blobs, `per_class` examples each, class-major order.
pub fn gen_synthetic(
    num_classes: usize,
    feature_dim: usize,
    per_class: usize,
    separation: f64,
    seed: u64,
) -> Result<LabeledDataset, DataError> {
    if num_classes < 2 {
        return Err(DataError::InvalidArgument(
            "num_classes must be >= 2".into(),
        ));
    }
    if per_class == 0 || feature_dim == 0 {
        return Err(DataError::InvalidArgument(
            "per_class and feature_dim must be >= 1".into(),
        ));
    }
    if !(separation.is_finite() && separation > 0.0) {
        return Err(DataError::InvalidArgument("separation must be > 0".into()));
    }
    let means = class_means(num_classes, feature_dim, separation);
    let mut rng = rng_from_seed(seed);
    let mut features = Vec::with_capacity(num_classes * per_class * feature_dim);
    let mut labels = Vec::with_capacity(num_classes * per_class);
    for (c, mean) in means.iter().enumerate() {
        for _ in 0..per_class {
            for &m in mean {
                let z: f64 = StandardNormal.sample(&mut rng);
                features.push(m + z);
            }
            labels.push(c);
        }
    }
    LabeledDataset::new(features, feature_dim, labels, num_classes)
}
