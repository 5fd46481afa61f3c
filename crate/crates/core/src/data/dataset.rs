use super::DataError;

/// Row-major feature matrix with integer class labels.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledDataset {
    features: Vec<f64>,
    feature_dim: usize,
    labels: Vec<usize>,
    num_classes: usize,
}

impl LabeledDataset {
    pub fn new(
        features: Vec<f64>,
        feature_dim: usize,
        labels: Vec<usize>,
        num_classes: usize,
    ) -> Result<Self, DataError> {
        if feature_dim == 0 {
            return Err(DataError::Shape("feature_dim must be >= 1".into()));
        }
        if features.len() != labels.len() * feature_dim {
            return Err(DataError::Shape(format!(
                "{} feature values do not form {} rows of width {}",
                features.len(),
                labels.len(),
                feature_dim
            )));
        }
        if let Some((row, &label)) = labels.iter().enumerate().find(|(_, &l)| l >= num_classes) {
            return Err(DataError::LabelOutOfRange {
                row,
                label,
                num_classes,
            });
        }
        Ok(Self {
            features,
            feature_dim,
            labels,
            num_classes,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn feature_dim(&self) -> usize {
        self.feature_dim
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn features(&self) -> &[f64] {
        &self.features
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.features[i * self.feature_dim..(i + 1) * self.feature_dim]
    }

    pub fn label(&self, i: usize) -> usize {
        self.labels[i]
    }

    /// Copies the given rows, in order, into a new dataset with the same class count.
    pub fn subset(&self, indices: &[usize]) -> Self {
        let mut features = Vec::with_capacity(indices.len() * self.feature_dim);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            features.extend_from_slice(self.row(i));
            labels.push(self.labels[i]);
        }
        Self {
            features,
            feature_dim: self.feature_dim,
            labels,
            num_classes: self.num_classes,
        }
    }

    /// Row indices grouped by label.
    pub fn indices_by_class(&self) -> Vec<Vec<usize>> {
        let mut by_class = vec![Vec::new(); self.num_classes];
        for (i, &l) in self.labels.iter().enumerate() {
            by_class[l].push(i);
        }
        by_class
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.num_classes];
        for &l in &self.labels {
            counts[l] += 1;
        }
        counts
    }

    /// Widens the declared class count. Narrowing below an observed label is rejected.
    pub fn with_num_classes(mut self, num_classes: usize) -> Result<Self, DataError> {
        if let Some((row, &label)) = self
            .labels
            .iter()
            .enumerate()
            .find(|(_, &l)| l >= num_classes)
        {
            return Err(DataError::LabelOutOfRange {
                row,
                label,
                num_classes,
            });
        }
        self.num_classes = num_classes;
        Ok(self)
    }

    /// Concatenates datasets of identical width and class count.
    pub fn concat(parts: &[&LabeledDataset]) -> Result<Self, DataError> {
        let first = parts
            .first()
            .ok_or_else(|| DataError::Shape("nothing to concatenate".into()))?;
        let mut features = Vec::new();
        let mut labels = Vec::new();
        for p in parts {
            if p.feature_dim != first.feature_dim || p.num_classes != first.num_classes {
                return Err(DataError::Shape("concatenating mismatched datasets".into()));
            }
            features.extend_from_slice(&p.features);
            labels.extend_from_slice(&p.labels);
        }
        Self::new(features, first.feature_dim, labels, first.num_classes)
    }
}
