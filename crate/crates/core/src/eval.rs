//! Coverage, set size, score uniformity and classification metrics.
//!
//! Metrics over an empty selection are `None`, never zero.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::conformal::{PredictionSet, ProbMatrix};
use crate::error::{Error, Result};
use crate::losses::ks_uniformity_stat;
use crate::tensor::first_argmax;

fn check_aligned(a: usize, b: usize, what: &'static str) -> Result<()> {
    if a != b {
        return Err(Error::invalid(what, format!("{a} sets but {b} labels or mask entries")));
    }
    Ok(())
}

/// Fraction of selected samples whose label is in their set.
pub fn coverage(sets: &[PredictionSet], labels: &[usize], mask: &[bool]) -> Result<Option<f64>> {
    check_aligned(sets.len(), labels.len(), "coverage")?;
    check_aligned(sets.len(), mask.len(), "coverage")?;
    let (mut hit, mut n) = (0usize, 0usize);
    for ((s, &y), &m) in sets.iter().zip(labels).zip(mask) {
        if m {
            n += 1;
            hit += s.contains(y) as usize;
        }
    }
    Ok((n > 0).then(|| hit as f64 / n as f64))
}

/// Mean set size over selected samples.
pub fn avg_size(sets: &[PredictionSet], mask: &[bool]) -> Result<Option<f64>> {
    check_aligned(sets.len(), mask.len(), "avg_size")?;
    let (mut total, mut n) = (0usize, 0usize);
    for (s, &m) in sets.iter().zip(mask) {
        if m {
            n += 1;
            total += s.len();
        }
    }
    Ok((n > 0).then(|| total as f64 / n as f64))
}

/// Cramer-von Mises distance from uniform:
/// `1/(12M) + sum_i ((2i - 1)/(2M) - w_(i))^2`.
pub fn cvm_stat(scores: &[f64]) -> Result<f64> {
    if scores.is_empty() {
        return Err(Error::Empty { op: "cvm_stat" });
    }
    let mut sorted = scores.to_vec();
    sorted.sort_by(f64::total_cmp);
    let m = sorted.len() as f64;
    let sum: f64 = sorted
        .iter()
        .enumerate()
        .map(|(i, &w)| ((2.0 * i as f64 + 1.0) / (2.0 * m) - w).powi(2))
        .sum();
    Ok(1.0 / (12.0 * m) + sum)
}

/// Kolmogorov-Smirnov distance from uniform.
pub fn ks_stat(scores: &[f64]) -> Result<f64> {
    ks_uniformity_stat(scores)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Classification {
    pub accuracy: f64,
    /// Per-class F-score; `None` when precision plus recall is zero.
    pub f_scores: Vec<Option<f64>>,
    /// Mean of the defined per-class F-scores.
    pub macro_f: Option<f64>,
}

/// Accuracy of the argmax label (first index on ties) and F-scores.
pub fn accuracy_and_fscore(probs: &ProbMatrix, labels: &[usize]) -> Result<Classification> {
    check_aligned(probs.len(), labels.len(), "accuracy_and_fscore")?;
    if labels.is_empty() {
        return Err(Error::Empty { op: "accuracy_and_fscore" });
    }
    let k = probs.classes();
    let mut tp = vec![0usize; k];
    let mut predicted = vec![0usize; k];
    let mut actual = vec![0usize; k];
    for (row, &y) in probs.iter_rows().zip(labels) {
        if y >= k {
            return Err(Error::LabelOutOfRange { label: y, classes: k });
        }
        let guess = first_argmax(row).map_or(0, |(i, _)| i);
        predicted[guess] += 1;
        actual[y] += 1;
        if guess == y {
            tp[y] += 1;
        }
    }
    let accuracy = tp.iter().sum::<usize>() as f64 / labels.len() as f64;
    let f_scores: Vec<Option<f64>> = (0..k)
        .map(|c| {
            let p = (predicted[c] > 0).then(|| tp[c] as f64 / predicted[c] as f64).unwrap_or(0.0);
            let r = (actual[c] > 0).then(|| tp[c] as f64 / actual[c] as f64).unwrap_or(0.0);
            (p + r > 0.0).then(|| 2.0 * p * r / (p + r))
        })
        .collect();
    let defined: Vec<f64> = f_scores.iter().flatten().copied().collect();
    let macro_f = (!defined.is_empty()).then(|| defined.iter().sum::<f64>() / defined.len() as f64);
    Ok(Classification {
        accuracy,
        f_scores,
        macro_f,
    })
}

/// Metrics restricted to one named subset of the test data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StratumMetrics {
    pub count: usize,
    pub coverage: Option<f64>,
    pub avg_size: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluationReport {
    pub marginal_coverage: f64,
    pub avg_size: f64,
    pub strata: BTreeMap<String, StratumMetrics>,
    pub ks_stat: f64,
    pub cvm_stat: f64,
    pub accuracy: f64,
    pub f_score: Option<f64>,
    pub test_size: usize,
}

/// Everything needed to score one model on one test set.
pub struct EvaluationInput<'a> {
    pub probs: &'a ProbMatrix,
    pub labels: &'a [usize],
    pub sets: &'a [PredictionSet],
    /// Conformity scores of the test labels.
    pub scores: &'a [f64],
    /// Named boolean masks over the test samples.
    pub strata: &'a [(String, Vec<bool>)],
}

pub fn evaluate(input: &EvaluationInput<'_>) -> Result<EvaluationReport> {
    let n = input.labels.len();
    if n == 0 {
        return Err(Error::Empty { op: "evaluate" });
    }
    check_aligned(input.sets.len(), n, "evaluate")?;
    check_aligned(input.scores.len(), n, "evaluate")?;
    let all = vec![true; n];
    let marginal_coverage = coverage(input.sets, input.labels, &all)?.expect("nonempty");
    let avg = avg_size(input.sets, &all)?.expect("nonempty");
    let mut strata = BTreeMap::new();
    for (name, mask) in input.strata {
        strata.insert(
            name.clone(),
            StratumMetrics {
                count: mask.iter().filter(|&&m| m).count(),
                coverage: coverage(input.sets, input.labels, mask)?,
                avg_size: avg_size(input.sets, mask)?,
            },
        );
    }
    let cls = accuracy_and_fscore(input.probs, input.labels)?;
    Ok(EvaluationReport {
        marginal_coverage,
        avg_size: avg,
        strata,
        ks_stat: ks_stat(input.scores)?,
        cvm_stat: cvm_stat(input.scores)?,
        accuracy: cls.accuracy,
        f_score: cls.macro_f,
        test_size: n,
    })
}

/// Text for an optional metric in reports.
pub fn fmt_metric(v: Option<f64>) -> String {
    v.map_or_else(|| NA.to_string(), |x| x.to_string())
}

/// Token written for undefined metrics.
pub const NA: &str = "NA";
