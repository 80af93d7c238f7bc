//! Tabular datasets: CSV ingestion, z-score normalization, splitting and
//! synthetic two-cluster data.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::scalar::Scalar;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
    #[error("label column '{0}' not found in header")]
    MissingLabel(String),
    #[error("non-numeric value '{value}' at row {row}, column '{column}'")]
    NonNumeric { row: usize, column: String, value: String },
    #[error("label at row {row} is {value}, expected 0 or 1")]
    BadLabel { row: usize, value: String },
    #[error("file contains no data rows")]
    Empty,
    #[error("feature '{0}' has zero standard deviation")]
    ZeroStd(String),
    #[error("degenerate split: {0}")]
    DegenerateSplit(String),
    #[error("invalid argument: {0}")]
    Invalid(String),
    #[error("dataset invariant violated: {0}")]
    Invariant(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Full,
    Train,
    Test,
}

/// Per-feature z-score statistics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Normalizer {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Normalizer {
    pub fn transform<T: Scalar>(&self, x: &[T]) -> Vec<T> {
        x.iter()
            .zip(self.mean.iter().zip(&self.std))
            .map(|(&v, (&m, &s))| (v - T::of(m)) / T::of(s))
            .collect()
    }

    pub fn inverse<T: Scalar>(&self, z: &[T]) -> Vec<T> {
        z.iter()
            .zip(self.mean.iter().zip(&self.std))
            .map(|(&v, (&m, &s))| v * T::of(s) + T::of(m))
            .collect()
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }
}

/// Row-major feature matrix with binary labels.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset<T> {
    features: Vec<T>,
    labels: Vec<u8>,
    n_features: usize,
    pub feature_names: Vec<String>,
    pub normalizer: Option<Normalizer>,
    pub split: Split,
}

impl<T: Scalar> Dataset<T> {
    pub fn new(features: Vec<T>, labels: Vec<u8>, feature_names: Vec<String>) -> Result<Self, DataError> {
        let ds = Self {
            n_features: feature_names.len(),
            features,
            labels,
            feature_names,
            normalizer: None,
            split: Split::Full,
        };
        ds.validate()?;
        Ok(ds)
    }

    pub fn validate(&self) -> Result<(), DataError> {
        if self.n_features == 0 {
            return Err(DataError::Invariant("no feature columns".into()));
        }
        if self.features.len() != self.labels.len() * self.n_features {
            return Err(DataError::Invariant(format!(
                "{} values for {} rows of {} features",
                self.features.len(),
                self.labels.len(),
                self.n_features
            )));
        }
        if let Some(i) = self.features.iter().position(|v| !v.is_finite()) {
            return Err(DataError::Invariant(format!(
                "non-finite value at row {}, column {}",
                i / self.n_features,
                i % self.n_features
            )));
        }
        if let Some(i) = self.labels.iter().position(|&l| l > 1) {
            return Err(DataError::Invariant(format!("label {} at row {i}", self.labels[i])));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn n_features(&self) -> usize {
        self.n_features
    }

    pub fn row(&self, i: usize) -> &[T] {
        &self.features[i * self.n_features..(i + 1) * self.n_features]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[T]> {
        self.features.chunks(self.n_features)
    }

    pub fn label(&self, i: usize) -> u8 {
        self.labels[i]
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    pub fn features(&self) -> &[T] {
        &self.features
    }

    pub fn class_counts(&self) -> [usize; 2] {
        let ones = self.labels.iter().filter(|&&l| l == 1).count();
        [self.labels.len() - ones, ones]
    }

    pub fn has_both_classes(&self) -> bool {
        let [a, b] = self.class_counts();
        a > 0 && b > 0
    }

    /// Column means and population standard deviations.
    pub fn column_stats(&self) -> Normalizer {
        let n = self.len().max(1) as f64;
        let j = self.n_features;
        let mut mean = vec![0.0; j];
        for row in self.rows() {
            for (m, v) in mean.iter_mut().zip(row) {
                *m += v.as_f64();
            }
        }
        mean.iter_mut().for_each(|m| *m /= n);
        let mut var = vec![0.0; j];
        for row in self.rows() {
            for ((s, v), m) in var.iter_mut().zip(row).zip(&mean) {
                let d = v.as_f64() - m;
                *s += d * d;
            }
        }
        let std = var.into_iter().map(|s| (s / n).sqrt()).collect();
        Normalizer { mean, std }
    }

    pub fn subset(&self, indices: &[usize], split: Split) -> Self {
        let mut features = Vec::with_capacity(indices.len() * self.n_features);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            features.extend_from_slice(self.row(i));
            labels.push(self.labels[i]);
        }
        Self {
            features,
            labels,
            n_features: self.n_features,
            feature_names: self.feature_names.clone(),
            normalizer: self.normalizer.clone(),
            split,
        }
    }

    /// Applies `norm` to every row and records it on the result.
    pub fn normalized_with(&self, norm: &Normalizer) -> Self {
        let features = self.rows().flat_map(|r| norm.transform(r)).collect();
        Self {
            features,
            labels: self.labels.clone(),
            n_features: self.n_features,
            feature_names: self.feature_names.clone(),
            normalizer: Some(norm.clone()),
            split: self.split,
        }
    }
}

/// Reads a headered CSV. `label_column` names the 0/1 target; every other
/// column must be numeric. Constant columns are dropped with a warning.
pub fn load_csv<T: Scalar>(path: impl AsRef<Path>, label_column: &str) -> Result<Dataset<T>, DataError> {
    let file = std::fs::File::open(path)?;
    read_csv(file, label_column)
}

pub fn read_csv<T: Scalar, R: std::io::Read>(reader: R, label_column: &str) -> Result<Dataset<T>, DataError> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_reader(reader);
    let headers: Vec<String> = rdr.headers()?.iter().map(str::to_string).collect();
    let label_idx = headers
        .iter()
        .position(|h| h == label_column)
        .ok_or_else(|| DataError::MissingLabel(label_column.to_string()))?;

    let mut columns: Vec<Vec<f64>> = vec![Vec::new(); headers.len() - 1];
    let mut labels = Vec::new();
    for (r, record) in rdr.records().enumerate() {
        let record = record?;
        let row = r + 1;
        let mut c = 0;
        for (k, cell) in record.iter().enumerate() {
            if k == label_idx {
                let label = match cell.parse::<f64>() {
                    Ok(0.0) => 0,
                    Ok(1.0) => 1,
                    _ => {
                        return Err(DataError::BadLabel {
                            row,
                            value: cell.to_string(),
                        })
                    }
                };
                labels.push(label);
                continue;
            }
            let v = cell
                .parse::<f64>()
                .ok()
                .filter(|v| v.is_finite())
                .ok_or_else(|| DataError::NonNumeric {
                    row,
                    column: headers[k].clone(),
                    value: cell.to_string(),
                })?;
            columns[c].push(v);
            c += 1;
        }
    }
    if labels.is_empty() {
        return Err(DataError::Empty);
    }

    let names: Vec<String> = headers
        .iter()
        .enumerate()
        .filter(|&(k, _)| k != label_idx)
        .map(|(_, h)| h.clone())
        .collect();
    let mut kept_names = Vec::new();
    let mut kept = Vec::new();
    for (name, col) in names.into_iter().zip(columns) {
        let first = col[0];
        if col.iter().all(|&v| v == first) {
            log::warn!("dropping constant column '{name}'");
            continue;
        }
        kept_names.push(name);
        kept.push(col);
    }
    let n = labels.len();
    let mut features = Vec::with_capacity(n * kept.len());
    for i in 0..n {
        features.extend(kept.iter().map(|col| T::of(col[i])));
    }
    Dataset::new(features, labels, kept_names)
}

/// Writes the dataset as a headered CSV with the label in the last column.
pub fn write_csv<T: Scalar, W: std::io::Write>(
    data: &Dataset<T>,
    writer: W,
    label_column: &str,
) -> Result<(), DataError> {
    let mut w = csv::Writer::from_writer(writer);
    let mut header = data.feature_names.clone();
    header.push(label_column.to_string());
    w.write_record(&header)?;
    for i in 0..data.len() {
        let mut rec: Vec<String> = data.row(i).iter().map(|v| format!("{}", v.as_f64())).collect();
        rec.push(data.label(i).to_string());
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

/// Z-scores `data` with its own statistics.
pub fn normalize<T: Scalar>(data: &Dataset<T>) -> Result<(Dataset<T>, Normalizer), DataError> {
    let stats = data.column_stats();
    if let Some(j) = stats.std.iter().position(|&s| s <= 0.0 || !s.is_finite()) {
        return Err(DataError::ZeroStd(data.feature_names[j].clone()));
    }
    Ok((data.normalized_with(&stats), stats))
}

pub fn denormalize<T: Scalar>(x: &[T], norm: &Normalizer) -> Vec<T> {
    norm.inverse(x)
}

/// Shuffled split; `fraction` of the rows go to the training side.
pub fn train_test_split<T: Scalar>(
    data: &Dataset<T>,
    fraction: f64,
    seed: u64,
) -> Result<(Dataset<T>, Dataset<T>), DataError> {
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(DataError::Invalid(format!("split fraction {fraction} not in (0, 1)")));
    }
    let n = data.len();
    let n_train = (fraction * n as f64).round() as usize;
    if n_train == 0 || n_train == n {
        return Err(DataError::DegenerateSplit(format!(
            "{n} rows at fraction {fraction} leaves an empty side"
        )));
    }
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let train = data.subset(&idx[..n_train], Split::Train);
    let test = data.subset(&idx[n_train..], Split::Test);
    if !train.has_both_classes() || !test.has_both_classes() {
        return Err(DataError::DegenerateSplit("a split is missing one class".into()));
    }
    Ok((train, test))
}

/// Split, then z-score both sides with the training statistics.
pub fn prepare<T: Scalar>(
    data: &Dataset<T>,
    fraction: f64,
    seed: u64,
) -> Result<(Dataset<T>, Dataset<T>, Normalizer), DataError> {
    let (train, test) = train_test_split(data, fraction, seed)?;
    let (train_n, norm) = normalize(&train)?;
    let test_n = test.normalized_with(&norm);
    Ok((train_n, test_n, norm))
}

/// Two unit-variance Gaussian clusters centred at `∓separation/2` on the
/// first axis. Labels alternate so the classes are balanced.
pub fn synthetic_blobs<T: Scalar>(
    n: usize,
    n_features: usize,
    separation: f64,
    seed: u64,
) -> Result<Dataset<T>, DataError> {
    if n < 4 || n_features < 2 {
        return Err(DataError::Invalid(format!(
            "synthetic_blobs needs n >= 4 and J >= 2 (got n={n}, J={n_features})"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut features = Vec::with_capacity(n * n_features);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let label = (i % 2) as u8;
        let centre = if label == 1 {
            separation / 2.0
        } else {
            -separation / 2.0
        };
        for j in 0..n_features {
            let z: f64 = StandardNormal.sample(&mut rng);
            features.push(T::of(if j == 0 { centre + z } else { z }));
        }
        labels.push(label);
    }
    let names = (0..n_features).map(|j| format!("x{j}")).collect();
    Dataset::new(features, labels, names)
}
