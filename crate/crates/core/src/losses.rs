//! Training objectives.
//!
//! The accuracy term is cross entropy (or focal loss). The uncertainty term
//! measures how far the hold-out conformity scores are from uniform, via a
//! Kolmogorov-Smirnov distance between a smooth empirical CDF and the
//! identity. The hybrid baseline replaces it with a differentiable average
//! size of sets calibrated inside the batch.

use serde::{Deserialize, Serialize};

use crate::conformal::calibration_rank;
use crate::diagnostics;
use crate::error::{Error, Result};
use crate::soft::{
    smooth_ecdf_at, soft_index_rows, soft_order_statistic, soft_rank_rows, soft_sort_rows, Temperature,
};
use crate::tensor::{Matrix, Tensor};

/// Floor applied to probabilities before taking logs.
pub const PROB_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    Conformal,
    CrossEntropy,
    Focal,
    Hybrid,
}

impl LossKind {
    pub const ALL: [LossKind; 4] = [
        LossKind::Conformal,
        LossKind::CrossEntropy,
        LossKind::Focal,
        LossKind::Hybrid,
    ];

    pub fn name(self) -> &'static str {
        match self {
            LossKind::Conformal => "conformal",
            LossKind::CrossEntropy => "cross_entropy",
            LossKind::Focal => "focal",
            LossKind::Hybrid => "hybrid",
        }
    }

    /// Whether training splits the data and evaluates a second term.
    pub fn uses_holdout(self) -> bool {
        matches!(self, LossKind::Conformal | LossKind::Hybrid)
    }
}

impl std::fmt::Display for LossKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for LossKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        LossKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::invalid("loss kind", format!("unknown method {s:?}")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Temperatures {
    pub sort: Temperature,
    pub rank: Temperature,
    pub cdf: Temperature,
}

impl Default for Temperatures {
    fn default() -> Self {
        Self {
            sort: Temperature::DEFAULT,
            rank: Temperature::DEFAULT,
            cdf: Temperature::DEFAULT,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossConfig {
    pub kind: LossKind,
    pub lambda: f64,
    pub focal_gamma: f64,
    pub alpha_hybrid: f64,
    pub temperatures: Temperatures,
    pub label_conditional: bool,
    pub ks_grid_size: usize,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            kind: LossKind::Conformal,
            lambda: 0.2,
            focal_gamma: 1.0,
            alpha_hybrid: 0.1,
            temperatures: Temperatures::default(),
            label_conditional: false,
            ks_grid_size: 101,
        }
    }
}

impl LossConfig {
    pub fn for_kind(kind: LossKind) -> Self {
        Self {
            kind,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.lambda) {
            return Err(Error::invalid("lambda", format!("{} is not in [0, 1]", self.lambda)));
        }
        if !(self.focal_gamma >= 0.0) {
            return Err(Error::invalid("focal_gamma", format!("{} is negative", self.focal_gamma)));
        }
        if !(self.alpha_hybrid > 0.0 && self.alpha_hybrid < 1.0) {
            return Err(Error::invalid(
                "alpha_hybrid",
                format!("{} is not in (0, 1)", self.alpha_hybrid),
            ));
        }
        if self.ks_grid_size < 2 {
            return Err(Error::invalid("ks_grid_size", "need at least 2 points"));
        }
        Ok(())
    }

    /// Weight of the hold-out term actually used in training.
    pub fn effective_lambda(&self) -> f64 {
        if self.kind.uses_holdout() {
            self.lambda
        } else {
            0.0
        }
    }
}

fn picked_probs<'t>(probs: Tensor<'t>, labels: &[usize]) -> Result<Tensor<'t>> {
    let k = probs.shape().1;
    if let Some(&bad) = labels.iter().find(|&&y| y >= k) {
        return Err(Error::LabelOutOfRange { label: bad, classes: k });
    }
    if labels.is_empty() {
        return Err(Error::Empty { op: "loss" });
    }
    Ok(probs.pick(labels)?)
}

/// Mean negative log-probability of the true labels.
pub fn cross_entropy<'t>(probs: Tensor<'t>, labels: &[usize]) -> Result<Tensor<'t>> {
    let py = picked_probs(probs, labels)?;
    Ok(py.clamp_min(PROB_FLOOR).log().mean()?.scale(-1.0))
}

/// Focal loss `-mean((1 - p_y)^gamma log p_y)`; gamma 0 is cross entropy.
pub fn focal_loss<'t>(probs: Tensor<'t>, labels: &[usize], gamma: f64) -> Result<Tensor<'t>> {
    if gamma == 0.0 {
        return cross_entropy(probs, labels);
    }
    let py = picked_probs(probs, labels)?;
    let weight = py.scale(-1.0).add_scalar(1.0).powf(gamma);
    Ok(weight.mul(py.clamp_min(PROB_FLOOR).log())?.mean()?.scale(-1.0))
}

/// Exact `sup_w |F_hat(w) - w|` for scores in [0, 1].
pub fn ks_uniformity_stat(scores: &[f64]) -> Result<f64> {
    if scores.is_empty() {
        return Err(Error::Empty { op: "ks_uniformity_stat" });
    }
    let mut sorted = scores.to_vec();
    sorted.sort_by(f64::total_cmp);
    let m = sorted.len() as f64;
    Ok(sorted
        .iter()
        .enumerate()
        .map(|(i, &w)| {
            let i = i as f64;
            ((i + 1.0) / m - w).abs().max((i / m - w).abs())
        })
        .fold(0.0, f64::max))
}

/// Smoothed conformity scores, one per row, as an n x 1 column.
pub fn soft_conformity_scores<'t>(
    probs: Tensor<'t>,
    labels: &[usize],
    noise: &[f64],
    temps: &Temperatures,
) -> Result<Tensor<'t>> {
    let n = probs.shape().0;
    if noise.len() != n {
        return Err(Error::invalid(
            "soft_conformity_scores",
            format!("{n} rows but {} noise values", noise.len()),
        ));
    }
    let tape = probs.tape();
    let sorted = soft_sort_rows(probs, temps.sort)?;
    let cum = sorted.cumsum_rows();
    let rank = soft_rank_rows(probs, labels, temps.rank)?;
    let cum_at = soft_index_rows(cum, rank)?;
    let prob_at = soft_index_rows(sorted, rank)?;
    let u = tape.constant(Matrix::column_vector(noise))?;
    Ok(cum_at.sub(prob_at.mul(u)?)?)
}

/// Evaluation points `0, 1/(g-1), ..., 1`.
pub fn ks_grid(size: usize) -> Vec<f64> {
    let last = (size - 1) as f64;
    (0..size).map(|i| i as f64 / last).collect()
}

/// Smoothed KS distance of `scores` from uniform.
///
/// Evaluated on a fixed grid plus the scores themselves, with a hard max.
pub fn soft_ks_loss<'t>(scores: Tensor<'t>, t_cdf: Temperature, grid_size: usize) -> Result<Tensor<'t>> {
    if grid_size < 2 {
        return Err(Error::invalid("soft_ks_loss", "grid needs at least 2 points"));
    }
    let (m, cols) = scores.shape();
    if cols != 1 {
        return Err(Error::invalid("soft_ks_loss", format!("scores must be a column, got {m}x{cols}")));
    }
    if m == 0 {
        return Err(Error::Empty { op: "soft_ks_loss" });
    }
    let tape = scores.tape();
    let grid = tape.constant(Matrix::column_vector(&ks_grid(grid_size)))?;
    let points = tape.concat_rows(&[grid, scores])?;
    let ecdf = smooth_ecdf_at(scores, points, t_cdf)?;
    Ok(ecdf.sub(points)?.abs().max()?)
}

/// Sum of per-class soft KS losses over classes with at least two samples.
pub fn label_conditional_ks<'t>(
    scores: Tensor<'t>,
    labels: &[usize],
    t_cdf: Temperature,
    grid_size: usize,
) -> Result<Tensor<'t>> {
    if scores.shape() != (labels.len(), 1) {
        return Err(Error::invalid(
            "label_conditional_ks",
            format!("{:?} scores for {} labels", scores.shape(), labels.len()),
        ));
    }
    let classes = labels.iter().copied().max().map_or(0, |m| m + 1);
    let mut total: Option<Tensor<'t>> = None;
    for c in 0..classes {
        let rows: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == c).collect();
        if rows.is_empty() {
            continue;
        }
        if rows.len() < 2 {
            diagnostics::record_skipped_class();
            continue;
        }
        let term = soft_ks_loss(scores.select_rows(&rows)?, t_cdf, grid_size)?;
        total = Some(match total {
            Some(acc) => acc.add(term)?,
            None => term,
        });
    }
    total.ok_or_else(|| Error::invalid("label_conditional_ks", "no class has two or more samples"))
}

/// Differentiable mean size of sets calibrated at level `1 - alpha` within
/// the batch.
///
/// The threshold is the smoothed `ceil((1 - alpha)(M + 1))`-th smallest soft
/// score (clamped to `M`). Each sample counts its top label plus a sigmoid
/// for every further label whose soft score `c_j - u p_(j)` is below it.
pub fn hybrid_size_loss<'t>(
    probs: Tensor<'t>,
    labels: &[usize],
    noise: &[f64],
    temps: &Temperatures,
    alpha: f64,
) -> Result<Tensor<'t>> {
    let (m, _) = probs.shape();
    if m < 2 {
        return Err(Error::invalid("hybrid_size_loss", format!("batch of {m} is too small")));
    }
    let tape = probs.tape();
    let scores = soft_conformity_scores(probs, labels, noise, temps)?;
    let k = calibration_rank(m, alpha).min(m);
    let threshold = soft_order_statistic(scores, m - k + 1, temps.sort)?;
    let sorted = soft_sort_rows(probs, temps.sort)?;
    let u = tape.constant(Matrix::column_vector(noise))?;
    let label_scores = sorted.cumsum_rows().sub(sorted.mul(u)?)?;
    let inside = label_scores
        .sub(threshold)?
        .scale(-1.0 / temps.cdf.value())
        .sigmoid();
    let first = vec![0; m];
    let size = inside.sum_rows().sub(inside.pick(&first)?)?.add_scalar(1.0);
    Ok(size.mean()?)
}

/// Samples for the hold-out term of one step.
#[derive(Clone, Copy)]
pub struct HoldoutBatch<'a, 't> {
    pub probs: Tensor<'t>,
    pub labels: &'a [usize],
    pub noise: &'a [f64],
}

/// Loss value with its components kept for logging.
pub struct LossTerms<'t> {
    pub total: Tensor<'t>,
    pub loss_a: f64,
    pub loss_u: Option<f64>,
}

pub fn accuracy_loss<'t>(probs: Tensor<'t>, labels: &[usize], cfg: &LossConfig) -> Result<Tensor<'t>> {
    match cfg.kind {
        LossKind::Focal => focal_loss(probs, labels, cfg.focal_gamma),
        _ => cross_entropy(probs, labels),
    }
}

/// Hold-out term for conformal or hybrid training.
pub fn holdout_loss<'t>(batch: HoldoutBatch<'_, 't>, cfg: &LossConfig) -> Result<Tensor<'t>> {
    let t = &cfg.temperatures;
    match cfg.kind {
        LossKind::Hybrid => hybrid_size_loss(batch.probs, batch.labels, batch.noise, t, cfg.alpha_hybrid),
        _ => {
            let scores = soft_conformity_scores(batch.probs, batch.labels, batch.noise, t)?;
            if cfg.label_conditional {
                label_conditional_ks(scores, batch.labels, t.cdf, cfg.ks_grid_size)
            } else {
                soft_ks_loss(scores, t.cdf, cfg.ks_grid_size)
            }
        }
    }
}

/// `(1 - lambda) * accuracy + lambda * holdout`.
///
/// With zero effective weight the hold-out batch is ignored and the result
/// is the accuracy term itself.
pub fn combined_loss<'t>(
    probs: Tensor<'t>,
    labels: &[usize],
    holdout: Option<HoldoutBatch<'_, 't>>,
    cfg: &LossConfig,
) -> Result<LossTerms<'t>> {
    let acc = accuracy_loss(probs, labels, cfg)?;
    let loss_a = acc.item();
    let lambda = cfg.effective_lambda();
    if lambda == 0.0 {
        return Ok(LossTerms {
            total: acc,
            loss_a,
            loss_u: None,
        });
    }
    let batch = holdout
        .filter(|b| !b.labels.is_empty())
        .ok_or(Error::Empty { op: "combined_loss hold-out batch" })?;
    let unc = holdout_loss(batch, cfg)?;
    let loss_u = unc.item();
    let total = acc.scale(1.0 - lambda).add(unc.scale(lambda))?;
    Ok(LossTerms {
        total,
        loss_a,
        loss_u: Some(loss_u),
    })
}

#[cfg(test)]
mod tests;
