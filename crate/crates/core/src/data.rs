//! Synthetic benchmark, CSV ingestion and feature standardization.
//!
//! Synthetic features are uniform on `[0, 1]^p` (the first one on `[0, a]`
//! under covariate shift). With `K` classes and 0-based labels:
//!
//! * `x1 <= delta`, `x2 < 0.5`: uniform over labels `0 .. K/2`
//! * `x1 <= delta`, `x2 >= 0.5`: uniform over labels `K/2 .. K`
//! * `x1 > delta`: label `floor(x3 K)` (the top bin is closed at 1)

use std::collections::BTreeSet;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::conformal::ProbMatrix;
use crate::error::{Error, Result};
use crate::rng;
use crate::tensor::Matrix;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticConfig {
    pub num_features: usize,
    pub num_classes: usize,
    pub delta: f64,
    pub shift: f64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            num_features: 100,
            num_classes: 6,
            delta: 0.2,
            shift: 1.0,
        }
    }
}

impl SyntheticConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_features < 3 {
            return Err(Error::invalid("synthetic config", "need at least 3 features"));
        }
        if self.num_classes < 2 || self.num_classes % 2 != 0 {
            return Err(Error::invalid(
                "synthetic config",
                format!("num_classes {} must be even and at least 2", self.num_classes),
            ));
        }
        if !(self.delta > 0.0 && self.delta < 1.0) {
            return Err(Error::invalid("synthetic config", format!("delta {} not in (0, 1)", self.delta)));
        }
        if !(self.shift > 0.0 && self.shift <= 1.0) {
            return Err(Error::invalid("synthetic config", format!("shift {} not in (0, 1]", self.shift)));
        }
        Ok(())
    }

    pub fn with_shift(&self, shift: f64) -> Self {
        Self {
            shift,
            ..self.clone()
        }
    }

    /// Whether `x` falls in the region where labels are ambiguous.
    pub fn is_hard(&self, x: &[f64]) -> bool {
        x[0] <= self.delta
    }

    /// Expected negative log-likelihood of the oracle at shift 1.
    pub fn oracle_entropy(&self) -> f64 {
        self.delta * ((self.num_classes / 2) as f64).ln()
    }
}

/// Easy-region label for the third feature.
fn bin(x3: f64, k: usize) -> usize {
    ((x3 * k as f64).floor() as usize).min(k - 1)
}

/// True class probabilities at `x`.
pub fn oracle_probs(x: &[f64], cfg: &SyntheticConfig) -> Result<Vec<f64>> {
    if x.len() != cfg.num_features {
        return Err(Error::invalid(
            "oracle_probs",
            format!("{} features, expected {}", x.len(), cfg.num_features),
        ));
    }
    if let Some(v) = x.iter().find(|v| !(0.0..=1.0).contains(*v)) {
        return Err(Error::invalid("oracle_probs", format!("feature {v} outside [0, 1]")));
    }
    let k = cfg.num_classes;
    let half = k / 2;
    let mut p = vec![0.0; k];
    if cfg.is_hard(x) {
        let start = if x[1] < 0.5 { 0 } else { half };
        p[start..start + half].fill(1.0 / half as f64);
    } else {
        p[bin(x[2], k)] = 1.0;
    }
    Ok(p)
}

/// Oracle probabilities for every row.
pub fn oracle_prob_matrix(x: &Matrix, cfg: &SyntheticConfig) -> Result<ProbMatrix> {
    let rows = x
        .iter_rows()
        .map(|r| oracle_probs(r, cfg))
        .collect::<Result<Vec<_>>>()?;
    ProbMatrix::from_rows(&rows)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub x: Matrix,
    /// 0-based labels.
    pub y: Vec<usize>,
    pub num_classes: usize,
    pub feature_names: Vec<String>,
    /// Original label spellings for ingested data, indexed by label.
    pub label_values: Option<Vec<String>>,
}

impl Dataset {
    pub fn new(x: Matrix, y: Vec<usize>, num_classes: usize) -> Result<Self> {
        if x.rows() != y.len() {
            return Err(Error::invalid("dataset", format!("{} rows but {} labels", x.rows(), y.len())));
        }
        if let Some(&bad) = y.iter().find(|&&v| v >= num_classes) {
            return Err(Error::LabelOutOfRange {
                label: bad,
                classes: num_classes,
            });
        }
        let feature_names = (1..=x.cols()).map(|i| format!("x{i}")).collect();
        Ok(Self {
            x,
            y,
            num_classes,
            feature_names,
            label_values: None,
        })
    }

    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }

    pub fn num_features(&self) -> usize {
        self.x.cols()
    }

    pub fn subset(&self, rows: &[usize]) -> Self {
        Self {
            x: self.x.select_rows(rows),
            y: rows.iter().map(|&i| self.y[i]).collect(),
            num_classes: self.num_classes,
            feature_names: self.feature_names.clone(),
            label_values: self.label_values.clone(),
        }
    }

    /// Contiguous row ranges of the given sizes, in order.
    pub fn split_sizes(&self, sizes: &[usize]) -> Result<Vec<Self>> {
        let total: usize = sizes.iter().sum();
        if total > self.len() {
            return Err(Error::invalid(
                "dataset split",
                format!("{total} rows requested from {}", self.len()),
            ));
        }
        let mut start = 0;
        Ok(sizes
            .iter()
            .map(|&n| {
                let part = self.subset(&(start..start + n).collect::<Vec<_>>());
                start += n;
                part
            })
            .collect())
    }

    /// Re-index labels against a known list of label spellings, e.g. the
    /// mapping recorded when a model was trained.
    pub fn relabel(&self, values: &[String]) -> Result<Self> {
        let y = self
            .y
            .iter()
            .map(|&k| {
                let name = self.label_name(k);
                values
                    .iter()
                    .position(|v| *v == name)
                    .ok_or_else(|| Error::invalid("labels", format!("{name:?} is not one of {values:?}")))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            x: self.x.clone(),
            y,
            num_classes: values.len(),
            feature_names: self.feature_names.clone(),
            label_values: Some(values.to_vec()),
        })
    }

    /// Text form of a label for export.
    pub fn label_name(&self, y: usize) -> String {
        match &self.label_values {
            Some(v) => v[y].clone(),
            None => (y + 1).to_string(),
        }
    }

    /// Write a header row plus one row per sample, label last.
    pub fn write_csv(&self, path: &Path, label_column: &str) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        let mut header = self.feature_names.clone();
        header.push(label_column.to_string());
        w.write_record(&header)?;
        for (row, &y) in self.x.iter_rows().zip(&self.y) {
            let mut rec: Vec<String> = row.iter().map(|v| v.to_string()).collect();
            rec.push(self.label_name(y));
            w.write_record(&rec)?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }
}

/// Draw `n` synthetic samples.
pub fn sample(cfg: &SyntheticConfig, n: usize, seed: u64) -> Result<Dataset> {
    cfg.validate()?;
    let mut rng = rng::stream(seed, "synthetic");
    let (p, k) = (cfg.num_features, cfg.num_classes);
    let half = k / 2;
    let mut data = Vec::with_capacity(n * p);
    let mut y = Vec::with_capacity(n);
    for _ in 0..n {
        let start = data.len();
        data.push(rng.random::<f64>() * cfg.shift);
        for _ in 1..p {
            data.push(rng.random::<f64>());
        }
        let x = &data[start..];
        let label = if cfg.is_hard(x) {
            let offset = if x[1] < 0.5 { 0 } else { half };
            offset + rng.random_range(0..half)
        } else {
            bin(x[2], k)
        };
        y.push(label);
    }
    Dataset::new(Matrix::from_vec(n, p, data)?, y, k)
}

/// Per-column z-score fitted on training data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Standardizer {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

/// Smallest standard deviation used when dividing.
pub const STD_FLOOR: f64 = 1e-8;

impl Standardizer {
    pub fn fit(x: &Matrix) -> Result<Self> {
        if x.rows() == 0 {
            return Err(Error::Empty { op: "Standardizer::fit" });
        }
        let n = x.rows() as f64;
        let mut mean = vec![0.0; x.cols()];
        for row in x.iter_rows() {
            for (m, v) in mean.iter_mut().zip(row) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= n);
        let mut var = vec![0.0; x.cols()];
        for row in x.iter_rows() {
            for ((s, v), m) in var.iter_mut().zip(row).zip(&mean) {
                *s += (v - m).powi(2);
            }
        }
        let std = var.iter().map(|s| (s / n).sqrt()).collect();
        Ok(Self { mean, std })
    }

    pub fn apply(&self, x: &Matrix) -> Result<Matrix> {
        if x.cols() != self.mean.len() {
            return Err(Error::invalid(
                "standardize",
                format!("{} columns, fitted on {}", x.cols(), self.mean.len()),
            ));
        }
        let mut out = x.clone();
        for r in 0..out.rows() {
            for ((v, m), s) in out.row_mut(r).iter_mut().zip(&self.mean).zip(&self.std) {
                *v = (*v - m) / s.max(STD_FLOOR);
            }
        }
        Ok(out)
    }
}

/// Read a CSV with a header row. Every column except `label_column` must be
/// numeric; labels are mapped to `0..K` in sorted order of their distinct
/// values (numerically when all parse as numbers).
pub fn load_csv(path: &Path, label_column: &str) -> Result<Dataset> {
    let mut reader = csv::Reader::from_path(path)?;
    let header = reader.headers()?.clone();
    let label_idx = header.iter().position(|h| h == label_column).ok_or_else(|| Error::Format {
        path: path.into(),
        detail: format!("no column named {label_column:?}"),
    })?;
    let feature_names: Vec<String> = header
        .iter()
        .enumerate()
        .filter(|&(i, _)| i != label_idx)
        .map(|(_, h)| h.to_string())
        .collect();
    let mut data = Vec::new();
    let mut raw_labels = Vec::new();
    let mut missing = Vec::new();
    for (r, rec) in reader.records().enumerate() {
        let rec = rec?;
        // Data rows are numbered from 1, after the header.
        let row = r + 1;
        if rec.len() != header.len() || rec.iter().any(|c| c.trim().is_empty()) {
            missing.push(row);
            continue;
        }
        for (i, cell) in rec.iter().enumerate() {
            if i == label_idx {
                raw_labels.push(cell.trim().to_string());
            } else {
                let v: f64 = cell.trim().parse().map_err(|_| Error::Format {
                    path: path.into(),
                    detail: format!("row {row}, column {:?}: {cell:?} is not numeric", &header[i]),
                })?;
                if !v.is_finite() {
                    return Err(Error::Format {
                        path: path.into(),
                        detail: format!("row {row}, column {:?}: non-finite value", &header[i]),
                    });
                }
                data.push(v);
            }
        }
    }
    if !missing.is_empty() {
        return Err(Error::Format {
            path: path.into(),
            detail: format!("missing values in rows {missing:?}"),
        });
    }
    let values = sorted_distinct(&raw_labels);
    if values.len() < 2 {
        return Err(Error::Format {
            path: path.into(),
            detail: format!("label column has {} distinct values, need 2", values.len()),
        });
    }
    let y = raw_labels
        .iter()
        .map(|l| values.iter().position(|v| v == l).expect("value listed"))
        .collect();
    let n = raw_labels.len();
    let mut ds = Dataset::new(Matrix::from_vec(n, feature_names.len(), data)?, y, values.len())?;
    ds.feature_names = feature_names;
    ds.label_values = Some(values);
    Ok(ds)
}

fn sorted_distinct(labels: &[String]) -> Vec<String> {
    let distinct: BTreeSet<&String> = labels.iter().collect();
    let mut values: Vec<String> = distinct.into_iter().cloned().collect();
    let numeric: Option<Vec<f64>> = values.iter().map(|v| v.parse().ok()).collect();
    if let Some(nums) = numeric {
        let mut pairs: Vec<(f64, String)> = nums.into_iter().zip(values).collect();
        pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
        values = pairs.into_iter().map(|(_, s)| s).collect();
    }
    values
}
