//! Exact order statistics and their temperature-smoothed surrogates.
//!
//! Hard versions (`sort_desc`, `rank_desc`) define the tie-break used
//! everywhere in the crate: equal values keep their original index order.
//! The smooth versions converge to them as the temperature goes to zero.
//!
//! * soft sort: unimodal row-stochastic relaxation. Row `i` of
//!   `P = softmax_j(((K + 1 - 2i) p_j - sum_k |p_j - p_k|) / T)` concentrates
//!   on the i-th largest entry; the sorted values are `P p`.
//! * soft rank: `1 + sum_{k != y} sigmoid((p_k - p_y) / T)`.
//! * soft index: linear interpolation at a fractional 1-based position.
//! * smooth ECDF: `mean_i sigmoid((w - s_i) / T)`.
//!
//! Each surrogate also exists as a fused tape op so batches cost one node.

use serde::{Deserialize, Serialize};

use crate::diagnostics;
use crate::error::{Error, Result};
use crate::tensor::{sigmoid, softmax_in_place, CustomOp, Matrix, Tensor, TensorError};

/// Positive smoothing scale for the soft surrogates.
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd, Serialize, Deserialize)]
#[serde(try_from = "f64", into = "f64")]
pub struct Temperature(f64);

impl Temperature {
    pub const DEFAULT: Temperature = Temperature(0.01);

    pub fn new(value: f64) -> Result<Self> {
        if value > 0.0 && value.is_finite() {
            Ok(Self(value))
        } else {
            Err(Error::invalid("temperature", format!("{value} is not positive")))
        }
    }

    pub fn value(self) -> f64 {
        self.0
    }
}

impl Default for Temperature {
    fn default() -> Self {
        Self::DEFAULT
    }
}

impl TryFrom<f64> for Temperature {
    type Error = Error;

    fn try_from(value: f64) -> Result<Self> {
        Self::new(value)
    }
}

impl From<Temperature> for f64 {
    fn from(t: Temperature) -> f64 {
        t.0
    }
}

/// Descending order with ties broken by lower original index.
///
/// Returns the sorted values and the 0-based source index of each position.
pub fn sort_desc(p: &[f64]) -> Result<(Vec<f64>, Vec<usize>)> {
    if p.is_empty() {
        return Err(Error::Empty { op: "sort_desc" });
    }
    let perm = descending_order(p);
    Ok((perm.iter().map(|&i| p[i]).collect(), perm))
}

pub(crate) fn descending_order(p: &[f64]) -> Vec<usize> {
    let mut perm: Vec<usize> = (0..p.len()).collect();
    // Stable sort keeps lower indices first among equal values.
    perm.sort_by(|&a, &b| p[b].total_cmp(&p[a]));
    perm
}

/// 1-based position of `p[y]` in [`sort_desc`] order.
pub fn rank_desc(y: usize, p: &[f64]) -> Result<usize> {
    if y >= p.len() {
        return Err(Error::LabelOutOfRange {
            label: y,
            classes: p.len(),
        });
    }
    Ok(rank_unchecked(y, p))
}

#[inline]
pub(crate) fn rank_unchecked(y: usize, p: &[f64]) -> usize {
    let py = p[y];
    let above = p
        .iter()
        .enumerate()
        .filter(|&(k, &v)| v > py || (v == py && k < y))
        .count();
    above + 1
}

/// Pairwise absolute-difference sums `A_j = sum_k |p_j - p_k|`.
fn abs_diff_sums(p: &[f64]) -> Vec<f64> {
    p.iter()
        .map(|&pj| p.iter().map(|&pk| (pj - pk).abs()).sum())
        .collect()
}

/// Softmax weights of relaxed permutation row `i` (0-based).
fn relaxed_row(p: &[f64], sums: &[f64], i: usize, t: f64) -> Vec<f64> {
    let n = p.len() as f64;
    let coef = n - 1.0 - 2.0 * i as f64;
    let mut row: Vec<f64> = p
        .iter()
        .zip(sums)
        .map(|(&pj, &aj)| (coef * pj - aj) / t)
        .collect();
    softmax_in_place(&mut row);
    row
}

/// Smoothed descending sort.
pub fn soft_sort_desc(p: &[f64], t: Temperature) -> Vec<f64> {
    let sums = abs_diff_sums(p);
    (0..p.len())
        .map(|i| {
            relaxed_row(p, &sums, i, t.value())
                .iter()
                .zip(p)
                .map(|(w, v)| w * v)
                .sum()
        })
        .collect()
}

/// Smoothed 1-based rank of `p[y]`, always in `[1, K]`.
pub fn soft_rank_desc(y: usize, p: &[f64], t: Temperature) -> Result<f64> {
    if y >= p.len() {
        return Err(Error::LabelOutOfRange {
            label: y,
            classes: p.len(),
        });
    }
    Ok(soft_rank_unchecked(y, p, t.value()))
}

fn soft_rank_unchecked(y: usize, p: &[f64], t: f64) -> f64 {
    let py = p[y];
    1.0 + p
        .iter()
        .enumerate()
        .filter(|&(k, _)| k != y)
        .map(|(_, &pk)| sigmoid((pk - py) / t))
        .sum::<f64>()
}

/// Interpolation segment for a clamped 1-based position: the 0-based lower
/// index and the fractional offset towards the next entry.
fn segment(len: usize, r: f64) -> (usize, f64, bool) {
    let upper = len as f64;
    let clamped = !(1.0..=upper).contains(&r);
    let r = r.clamp(1.0, upper);
    if len == 1 {
        return (0, 0.0, clamped);
    }
    let lo = (r.floor() as usize).min(len - 1);
    (lo - 1, r - lo as f64, clamped)
}

/// Value of `a` at fractional 1-based position `r` by linear interpolation.
///
/// Positions outside `[1, len]` are clamped and counted in
/// [`diagnostics::index_clamps`].
pub fn soft_index(a: &[f64], r: f64) -> Result<f64> {
    if a.is_empty() {
        return Err(Error::Empty { op: "soft_index" });
    }
    let (lo, frac, clamped) = segment(a.len(), r);
    if clamped {
        diagnostics::record_index_clamp();
    }
    Ok(interpolate(a, lo, frac))
}

#[inline]
fn interpolate(a: &[f64], lo: usize, frac: f64) -> f64 {
    if frac == 0.0 {
        a[lo]
    } else if frac == 1.0 {
        a[lo + 1]
    } else {
        a[lo] + frac * (a[lo + 1] - a[lo])
    }
}

/// Sigmoid-smoothed empirical CDF of `scores` evaluated at `w`.
pub fn smooth_ecdf(scores: &[f64], w: f64, t: Temperature) -> Result<f64> {
    if scores.is_empty() {
        return Err(Error::Empty { op: "smooth_ecdf" });
    }
    let t = t.value();
    Ok(scores.iter().map(|&s| sigmoid((w - s) / t)).sum::<f64>() / scores.len() as f64)
}

// ---------------------------------------------------------------------------
// Fused tape ops
// ---------------------------------------------------------------------------

/// Gradient of selected relaxed-sort outputs with respect to the input vector.
///
/// `rows` holds `(row index, softmax weights, upstream gradient)` for each
/// output position that received a gradient.
fn relaxed_sort_backward(p: &[f64], rows: &[(usize, &[f64], f64)], t: f64) -> Vec<f64> {
    let n = p.len();
    let nf = n as f64;
    let mut grad = vec![0.0; n];
    // Column sums of dL/dZ and the per-row coefficient term.
    let mut col = vec![0.0; n];
    let mut coef_term = vec![0.0; n];
    for &(i, w, g) in rows {
        if g == 0.0 {
            continue;
        }
        let v: f64 = w.iter().zip(p).map(|(w, p)| w * p).sum();
        let coef = nf - 1.0 - 2.0 * i as f64;
        for j in 0..n {
            grad[j] += g * w[j];
            let dz = w[j] * g * (p[j] - v);
            col[j] += dz;
            coef_term[j] += dz * coef;
        }
    }
    for m in 0..n {
        let mut own_sign = 0.0;
        let mut cross = 0.0;
        for k in 0..n {
            let s = sign(p[m] - p[k]);
            own_sign += s;
            // sign(p_k - p_m) = -s
            cross -= col[k] * s;
        }
        grad[m] += (coef_term[m] - col[m] * own_sign + cross) / t;
    }
    grad
}

#[inline]
fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

struct SoftSortRows {
    t: f64,
    /// Per input row, the K x K relaxed permutation (row-major).
    weights: Vec<Vec<f64>>,
}

impl CustomOp for SoftSortRows {
    fn name(&self) -> &'static str {
        "soft_sort_rows"
    }

    fn backward(&self, inputs: &[&Matrix], _output: &Matrix, g: &Matrix) -> Vec<Matrix> {
        let x = inputs[0];
        let k = x.cols();
        let mut grad = Matrix::zeros(x.rows(), k);
        for r in 0..x.rows() {
            let w = &self.weights[r];
            let rows: Vec<(usize, &[f64], f64)> = (0..k)
                .map(|i| (i, &w[i * k..(i + 1) * k], g.get(r, i)))
                .collect();
            grad.row_mut(r)
                .copy_from_slice(&relaxed_sort_backward(x.row(r), &rows, self.t));
        }
        vec![grad]
    }
}

/// Soft-sort every row of `x` in descending order.
pub fn soft_sort_rows<'t>(x: Tensor<'t>, t: Temperature) -> Result<Tensor<'t>> {
    let value = x.value();
    let (n, k) = value.shape();
    let mut out = Matrix::zeros(n, k);
    let mut weights = Vec::with_capacity(n);
    for r in 0..n {
        let p = value.row(r);
        let sums = abs_diff_sums(p);
        let mut w = Vec::with_capacity(k * k);
        for i in 0..k {
            let row = relaxed_row(p, &sums, i, t.value());
            out.set(r, i, row.iter().zip(p).map(|(a, b)| a * b).sum());
            w.extend(row);
        }
        weights.push(w);
    }
    let op = SoftSortRows {
        t: t.value(),
        weights,
    };
    Ok(x.tape().custom(Box::new(op), &[x], out)?)
}

struct SoftOrderStatistic {
    row: usize,
    t: f64,
    weights: Vec<f64>,
}

impl CustomOp for SoftOrderStatistic {
    fn name(&self) -> &'static str {
        "soft_order_statistic"
    }

    fn backward(&self, inputs: &[&Matrix], _output: &Matrix, g: &Matrix) -> Vec<Matrix> {
        let x = inputs[0];
        let rows = [(self.row, self.weights.as_slice(), g.as_slice()[0])];
        let grad = relaxed_sort_backward(x.as_slice(), &rows, self.t);
        vec![Matrix::from_vec(x.rows(), x.cols(), grad).expect("shape")]
    }
}

/// The `position`-th largest entry (1-based) of all values in `x`, smoothed.
///
/// Only one relaxed permutation row is formed, so the cost is quadratic in
/// the number of entries rather than cubic.
pub fn soft_order_statistic<'t>(x: Tensor<'t>, position: usize, t: Temperature) -> Result<Tensor<'t>> {
    let value = x.value();
    let p = value.as_slice();
    if position == 0 || position > p.len() {
        return Err(TensorError::IndexOutOfRange {
            op: "soft_order_statistic",
            index: position,
            bound: p.len(),
        }
        .into());
    }
    let sums = abs_diff_sums(p);
    let weights = relaxed_row(p, &sums, position - 1, t.value());
    let v = weights.iter().zip(p).map(|(a, b)| a * b).sum();
    let op = SoftOrderStatistic {
        row: position - 1,
        t: t.value(),
        weights,
    };
    Ok(x.tape().custom(Box::new(op), &[x], Matrix::scalar(v))?)
}

struct SoftRankRows {
    labels: Vec<usize>,
    t: f64,
}

impl CustomOp for SoftRankRows {
    fn name(&self) -> &'static str {
        "soft_rank_rows"
    }

    fn backward(&self, inputs: &[&Matrix], _output: &Matrix, g: &Matrix) -> Vec<Matrix> {
        let x = inputs[0];
        let mut grad = Matrix::zeros(x.rows(), x.cols());
        for (r, &y) in self.labels.iter().enumerate() {
            let p = x.row(r);
            let gr = g.as_slice()[r];
            let out = grad.row_mut(r);
            for k in 0..p.len() {
                if k == y {
                    continue;
                }
                let s = sigmoid((p[k] - p[y]) / self.t);
                let d = gr * s * (1.0 - s) / self.t;
                out[k] += d;
                out[y] -= d;
            }
        }
        vec![grad]
    }
}

/// Soft rank of `labels[i]` within row `i`; returns an n x 1 column.
pub fn soft_rank_rows<'t>(x: Tensor<'t>, labels: &[usize], t: Temperature) -> Result<Tensor<'t>> {
    let value = x.value();
    if labels.len() != value.rows() {
        return Err(TensorError::shape("soft_rank_rows", value.shape(), (labels.len(), 1)).into());
    }
    let mut out = Vec::with_capacity(labels.len());
    for (r, &y) in labels.iter().enumerate() {
        if y >= value.cols() {
            return Err(Error::LabelOutOfRange {
                label: y,
                classes: value.cols(),
            });
        }
        out.push(soft_rank_unchecked(y, value.row(r), t.value()));
    }
    let op = SoftRankRows {
        labels: labels.to_vec(),
        t: t.value(),
    };
    Ok(x.tape().custom(Box::new(op), &[x], Matrix::column_vector(&out))?)
}

struct SoftIndexRows {
    /// Per row: lower 0-based index, fraction, whether the position was clamped.
    segments: Vec<(usize, f64, bool)>,
}

impl CustomOp for SoftIndexRows {
    fn name(&self) -> &'static str {
        "soft_index_rows"
    }

    fn backward(&self, inputs: &[&Matrix], _output: &Matrix, g: &Matrix) -> Vec<Matrix> {
        let a = inputs[0];
        let mut ga = Matrix::zeros(a.rows(), a.cols());
        let mut gr = Matrix::zeros(a.rows(), 1);
        for (r, &(lo, frac, clamped)) in self.segments.iter().enumerate() {
            let gv = g.as_slice()[r];
            let row = ga.row_mut(r);
            row[lo] += gv * (1.0 - frac);
            if lo + 1 < a.cols() {
                row[lo + 1] += gv * frac;
                if !clamped {
                    gr.as_mut_slice()[r] = gv * (a.get(r, lo + 1) - a.get(r, lo));
                }
            }
        }
        vec![ga, gr]
    }
}

/// Row-wise [`soft_index`]: row `i` of `a` read at position `positions[i]`.
pub fn soft_index_rows<'t>(a: Tensor<'t>, positions: Tensor<'t>) -> Result<Tensor<'t>> {
    let av = a.value();
    let rv = positions.value();
    if rv.shape() != (av.rows(), 1) {
        return Err(TensorError::shape("soft_index_rows", av.shape(), rv.shape()).into());
    }
    if av.cols() == 0 {
        return Err(Error::Empty { op: "soft_index_rows" });
    }
    let mut out = Vec::with_capacity(av.rows());
    let mut segments = Vec::with_capacity(av.rows());
    for r in 0..av.rows() {
        let seg = segment(av.cols(), rv.as_slice()[r]);
        if seg.2 {
            diagnostics::record_index_clamp();
        }
        out.push(interpolate(av.row(r), seg.0, seg.1));
        segments.push(seg);
    }
    let op = SoftIndexRows { segments };
    Ok(a.tape().custom(Box::new(op), &[a, positions], Matrix::column_vector(&out))?)
}

struct SmoothEcdfOp {
    t: f64,
    /// sigmoid((w_j - s_i) / T), points-major.
    sig: Vec<f64>,
}

impl CustomOp for SmoothEcdfOp {
    fn name(&self) -> &'static str {
        "smooth_ecdf"
    }

    fn backward(&self, inputs: &[&Matrix], _output: &Matrix, g: &Matrix) -> Vec<Matrix> {
        let (scores, points) = (inputs[0], inputs[1]);
        let m = scores.len();
        let scale = 1.0 / (m as f64 * self.t);
        let mut gs = vec![0.0; m];
        let mut gw = vec![0.0; points.len()];
        for (j, gwj) in gw.iter_mut().enumerate() {
            let gj = g.as_slice()[j] * scale;
            if gj == 0.0 {
                continue;
            }
            let sig = &self.sig[j * m..(j + 1) * m];
            for (gsi, &s) in gs.iter_mut().zip(sig) {
                let d = gj * s * (1.0 - s);
                *gwj += d;
                *gsi -= d;
            }
        }
        vec![
            Matrix::from_vec(scores.rows(), scores.cols(), gs).expect("shape"),
            Matrix::from_vec(points.rows(), points.cols(), gw).expect("shape"),
        ]
    }
}

/// Smooth ECDF of all entries of `scores`, evaluated at each entry of
/// `points`; returns a column with one value per point.
pub fn smooth_ecdf_at<'t>(scores: Tensor<'t>, points: Tensor<'t>, t: Temperature) -> Result<Tensor<'t>> {
    let sv = scores.value();
    let pv = points.value();
    if sv.is_empty() {
        return Err(Error::Empty { op: "smooth_ecdf" });
    }
    let m = sv.len();
    let tv = t.value();
    let mut sig = Vec::with_capacity(m * pv.len());
    let mut out = Vec::with_capacity(pv.len());
    for &w in pv.as_slice() {
        let mut total = 0.0;
        for &s in sv.as_slice() {
            let v = sigmoid((w - s) / tv);
            total += v;
            sig.push(v);
        }
        out.push(total / m as f64);
    }
    let op = SmoothEcdfOp { t: tv, sig };
    Ok(scores
        .tape()
        .custom(Box::new(op), &[scores, points], Matrix::column_vector(&out))?)
}
