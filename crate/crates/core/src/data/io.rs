//! IDX (MNIST-style) and CSV loaders. Both scale features into `[0, 1]`.

use std::path::{Path, PathBuf};

use super::{DataError, LabeledDataset};

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum DatasetFormat {
    /// `path` is the image file; labels live in a companion IDX file.
    Idx { labels: PathBuf },
    /// Header row, numeric feature columns, integer label in the last column.
    Csv,
}

pub fn load_dataset(path: &Path, format: &DatasetFormat) -> Result<LabeledDataset, DataError> {
    match format {
        DatasetFormat::Idx { labels } => load_idx(path, labels),
        DatasetFormat::Csv => load_csv(path),
    }
}

fn read(path: &Path) -> Result<Vec<u8>, DataError> {
    std::fs::read(path).map_err(|source| DataError::Io {
        path: path.to_path_buf(),
        source,
    })
}

fn malformed(path: &Path, format: &'static str, reason: impl Into<String>) -> DataError {
    DataError::Malformed {
        path: path.to_path_buf(),
        format,
        reason: reason.into(),
    }
}

/// Parses an unsigned-byte IDX header, returning the dimension sizes and the payload.
fn parse_idx<'a>(path: &Path, bytes: &'a [u8]) -> Result<(Vec<usize>, &'a [u8]), DataError> {
    if bytes.len() < 4 {
        return Err(malformed(path, "IDX", "shorter than the magic number"));
    }
    if bytes[0] != 0 || bytes[1] != 0 {
        return Err(malformed(
            path,
            "IDX",
            "magic number must start with two zero bytes",
        ));
    }
    if bytes[2] != 0x08 {
        return Err(malformed(
            path,
            "IDX",
            format!("unsupported element type 0x{:02x}", bytes[2]),
        ));
    }
    let ndim = bytes[3] as usize;
    if ndim == 0 {
        return Err(malformed(path, "IDX", "zero dimensions"));
    }
    let header = 4 + 4 * ndim;
    if bytes.len() < header {
        return Err(malformed(path, "IDX", "truncated dimension header"));
    }
    let dims: Vec<usize> = bytes[4..header]
        .chunks_exact(4)
        .map(|c| u32::from_be_bytes([c[0], c[1], c[2], c[3]]) as usize)
        .collect();
    let expected: usize = dims.iter().product();
    let payload = &bytes[header..];
    if payload.len() != expected {
        return Err(malformed(
            path,
            "IDX",
            format!(
                "payload has {} bytes, header implies {}",
                payload.len(),
                expected
            ),
        ));
    }
    Ok((dims, payload))
}

fn load_idx(images: &Path, labels: &Path) -> Result<LabeledDataset, DataError> {
    let image_bytes = read(images)?;
    let label_bytes = read(labels)?;
    let (img_dims, pixels) = parse_idx(images, &image_bytes)?;
    let (lbl_dims, raw_labels) = parse_idx(labels, &label_bytes)?;
    if img_dims.len() < 2 {
        return Err(malformed(
            images,
            "IDX",
            "image file needs at least 2 dimensions",
        ));
    }
    if lbl_dims.len() != 1 {
        return Err(malformed(labels, "IDX", "label file must be 1-dimensional"));
    }
    if img_dims[0] != lbl_dims[0] {
        return Err(malformed(
            labels,
            "IDX",
            format!("{} labels for {} images", lbl_dims[0], img_dims[0]),
        ));
    }
    let feature_dim: usize = img_dims[1..].iter().product();
    let features = pixels.iter().map(|&p| p as f64 / 255.0).collect();
    let labels: Vec<usize> = raw_labels.iter().map(|&l| l as usize).collect();
    let num_classes = labels.iter().max().map_or(0, |m| m + 1);
    LabeledDataset::new(features, feature_dim, labels, num_classes)
}

fn load_csv(path: &Path) -> Result<LabeledDataset, DataError> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| csv_error(path, e))?;
    let width = reader.headers().map_err(|e| csv_error(path, e))?.len();
    if width < 2 {
        return Err(malformed(
            path,
            "CSV",
            "need at least one feature column and a label",
        ));
    }
    let feature_dim = width - 1;
    let mut features = Vec::new();
    let mut labels = Vec::new();
    for (row, record) in reader.records().enumerate() {
        let record = record.map_err(|e| csv_error(path, e))?;
        for field in record.iter().take(feature_dim) {
            let v: f64 = field.parse().map_err(|_| {
                malformed(
                    path,
                    "CSV",
                    format!("row {}: bad number {field:?}", row + 1),
                )
            })?;
            if !v.is_finite() {
                return Err(malformed(
                    path,
                    "CSV",
                    format!("row {}: non-finite value", row + 1),
                ));
            }
            features.push(v);
        }
        let label = &record[feature_dim];
        labels.push(label.parse::<usize>().map_err(|_| {
            malformed(path, "CSV", format!("row {}: bad label {label:?}", row + 1))
        })?);
    }
    if labels.is_empty() {
        return Err(malformed(path, "CSV", "no data rows"));
    }
    min_max_scale(&mut features, feature_dim);
    let num_classes = labels.iter().max().map_or(0, |m| m + 1);
    LabeledDataset::new(features, feature_dim, labels, num_classes)
}

fn csv_error(path: &Path, e: csv::Error) -> DataError {
    match e.kind() {
        csv::ErrorKind::UnequalLengths {
            pos,
            expected_len,
            len,
        } => malformed(
            path,
            "CSV",
            format!(
                "line {}: {len} fields, expected {expected_len}",
                pos.as_ref().map_or(0, |p| p.line())
            ),
        ),
        csv::ErrorKind::Io(_) => DataError::Io {
            path: path.to_path_buf(),
            source: std::io::Error::other(e.to_string()),
        },
        _ => malformed(path, "CSV", e.to_string()),
    }
}

/// Per-column min-max scaling; constant columns map to 0.
fn min_max_scale(features: &mut [f64], width: usize) {
    for c in 0..width {
        let column = features.iter().skip(c).step_by(width);
        let (lo, hi) = column.fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| {
            (lo.min(v), hi.max(v))
        });
        let span = hi - lo;
        for v in features.iter_mut().skip(c).step_by(width) {
            *v = if span > 0.0 { (*v - lo) / span } else { 0.0 };
        }
    }
}
