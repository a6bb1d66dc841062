//! Adaptive prediction sets, conformity scores and split-conformal
//! calibration.
//!
//! Labels are 0-based throughout the library. Probabilities are ranked with
//! the tie-break of [`crate::soft::sort_desc`].
//!
//! For probabilities sorted descending, `c_k` is the cumulative mass of the
//! top `k` labels. The generalized quantile `L(tau)` is the smallest `k` with
//! `c_k >= tau`; the set keeps the top `L - 1` labels when the noise `u` is at
//! most `V = (c_L - tau) / p_(L)` and the top `L` otherwise. A label of rank
//! `r` enters the set exactly when `tau > c_r - u p_(r)`, which is its
//! conformity score.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::soft::{descending_order, rank_unchecked};
use crate::tensor::Matrix;

const SIMPLEX_TOLERANCE: f64 = 1e-6;

/// Row-stochastic matrix of class probabilities.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbMatrix(Matrix);

impl ProbMatrix {
    pub fn new(m: Matrix) -> Result<Self> {
        if m.cols() == 0 {
            return Err(Error::Empty { op: "ProbMatrix" });
        }
        for (i, row) in m.iter_rows().enumerate() {
            let total: f64 = row.iter().sum();
            if row.iter().any(|&v| !(v >= 0.0)) || (total - 1.0).abs() > SIMPLEX_TOLERANCE {
                return Err(Error::invalid(
                    "probability row",
                    format!("row {i} is not on the simplex: {row:?}"),
                ));
            }
        }
        Ok(Self(m))
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        Self::new(Matrix::from_rows(rows)?)
    }

    pub fn len(&self) -> usize {
        self.0.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.0.rows() == 0
    }

    pub fn classes(&self) -> usize {
        self.0.cols()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        self.0.row(i)
    }

    pub fn iter_rows(&self) -> impl Iterator<Item = &[f64]> {
        self.0.iter_rows()
    }

    pub fn as_matrix(&self) -> &Matrix {
        &self.0
    }

    pub fn into_matrix(self) -> Matrix {
        self.0
    }
}

/// What to do when the randomized rule would return no labels.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EmptySetPolicy {
    /// Return the top label whenever `L = 1`, without randomizing.
    #[default]
    KeepTop,
    /// Apply the randomized rule as is; the set may be empty.
    Randomized,
}

/// Labels of a prediction set, most probable first.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PredictionSet {
    labels: Vec<usize>,
}

impl PredictionSet {
    /// Set from explicit labels; duplicates and out-of-range labels are errors.
    pub fn from_labels(labels: Vec<usize>, classes: usize) -> Result<Self> {
        for (i, &l) in labels.iter().enumerate() {
            check_label(l, classes)?;
            if labels[..i].contains(&l) {
                return Err(Error::invalid("prediction set", format!("label {l} repeated")));
            }
        }
        Ok(Self { labels })
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn contains(&self, label: usize) -> bool {
        self.labels.contains(&label)
    }

    /// Same labels in increasing order.
    pub fn sorted(&self) -> Vec<usize> {
        let mut v = self.labels.clone();
        v.sort_unstable();
        v
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CalibrationThreshold {
    pub tau_hat: f64,
    pub alpha: f64,
    pub calibration_size: usize,
}

fn check_label(y: usize, k: usize) -> Result<()> {
    if y >= k {
        return Err(Error::LabelOutOfRange { label: y, classes: k });
    }
    Ok(())
}

fn check_nonempty(p: &[f64], op: &'static str) -> Result<()> {
    if p.is_empty() {
        return Err(Error::Empty { op });
    }
    Ok(())
}

/// Smallest `L` (1-based) whose top-`L` mass reaches `tau`.
pub fn generalized_quantile(p: &[f64], tau: f64) -> Result<usize> {
    check_nonempty(p, "generalized_quantile")?;
    let order = descending_order(p);
    Ok(quantile_in_order(p, &order, tau).0)
}

/// `(L, c_L)` for an already computed descending order.
fn quantile_in_order(p: &[f64], order: &[usize], tau: f64) -> (usize, f64) {
    let mut cum = 0.0;
    for (k, &i) in order.iter().enumerate() {
        cum += p[i];
        if cum >= tau {
            return (k + 1, cum);
        }
    }
    // Rounding can leave the full sum a hair below tau = 1.
    (order.len(), cum)
}

/// Randomized adaptive prediction set at level `tau`.
pub fn prediction_set(p: &[f64], u: f64, tau: f64, policy: EmptySetPolicy) -> Result<PredictionSet> {
    check_nonempty(p, "prediction_set")?;
    let order = descending_order(p);
    let (l, cum) = quantile_in_order(p, &order, tau);
    let size = if l == 1 && policy == EmptySetPolicy::KeepTop {
        1
    } else {
        let pl = p[order[l - 1]];
        let v = if pl > 0.0 { (cum - tau) / pl } else { 0.0 };
        if u <= v {
            l - 1
        } else {
            l
        }
    };
    Ok(PredictionSet {
        labels: order[..size].to_vec(),
    })
}

/// Smallest level at which `y` enters the randomized set.
pub fn conformity_score(p: &[f64], y: usize, u: f64) -> Result<f64> {
    check_label(y, p.len())?;
    let r = rank_unchecked(y, p);
    let order = descending_order(p);
    let cum: f64 = order[..r].iter().map(|&i| p[i]).sum();
    Ok((cum - u * p[y]).clamp(0.0, 1.0))
}

/// Scores for every row of `probs`.
pub fn conformity_scores(probs: &ProbMatrix, labels: &[usize], noise: &[f64]) -> Result<Vec<f64>> {
    if labels.len() != probs.len() || noise.len() != probs.len() {
        return Err(Error::invalid(
            "conformity_scores",
            format!(
                "{} rows, {} labels, {} noise values",
                probs.len(),
                labels.len(),
                noise.len()
            ),
        ));
    }
    probs
        .iter_rows()
        .zip(labels.iter().zip(noise))
        .map(|(p, (&y, &u))| conformity_score(p, y, u))
        .collect()
}

/// Calibration order-statistic index `ceil((1 - alpha)(m + 1))`.
pub fn calibration_rank(m: usize, alpha: f64) -> usize {
    // Guard against products such as 0.9 * 10 landing a hair above 9.
    let x = (1.0 - alpha) * (m as f64 + 1.0);
    (x - 1e-9).ceil().max(1.0) as usize
}

/// Split-conformal threshold: the k-th smallest score, or 1 when k > m.
pub fn calibrate(scores: &[f64], alpha: f64) -> Result<CalibrationThreshold> {
    if scores.is_empty() {
        return Err(Error::Empty { op: "calibrate" });
    }
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(Error::invalid("alpha", format!("{alpha} is not in (0, 1)")));
    }
    let m = scores.len();
    let k = calibration_rank(m, alpha);
    let tau_hat = if k > m {
        1.0
    } else {
        let mut sorted = scores.to_vec();
        sorted.sort_by(f64::total_cmp);
        sorted[k - 1]
    };
    Ok(CalibrationThreshold {
        tau_hat,
        alpha,
        calibration_size: m,
    })
}

pub fn predict_calibrated(p: &[f64], u: f64, thr: &CalibrationThreshold) -> Result<PredictionSet> {
    prediction_set(p, u, thr.tau_hat, EmptySetPolicy::KeepTop)
}

/// Oracle set at level `1 - alpha` from the true class probabilities.
pub fn oracle_set(p_true: &[f64], u: f64, alpha: f64) -> Result<PredictionSet> {
    prediction_set(p_true, u, 1.0 - alpha, EmptySetPolicy::KeepTop)
}

/// Sets for every row at a fixed level.
pub fn prediction_sets(probs: &ProbMatrix, noise: &[f64], tau: f64) -> Result<Vec<PredictionSet>> {
    if noise.len() != probs.len() {
        return Err(Error::invalid(
            "prediction_sets",
            format!("{} rows, {} noise values", probs.len(), noise.len()),
        ));
    }
    probs
        .iter_rows()
        .zip(noise)
        .map(|(p, &u)| prediction_set(p, u, tau, EmptySetPolicy::KeepTop))
        .collect()
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::rng::open_unit;

    const P: [f64; 3] = [0.3, 0.6, 0.1];

    fn random_simplex(rng: &mut ChaCha8Rng, k: usize) -> Vec<f64> {
        let raw: Vec<f64> = (0..k).map(|_| -open_unit(rng).ln()).collect();
        let total: f64 = raw.iter().sum();
        raw.iter().map(|v| v / total).collect()
    }

    #[test]
    fn quantile_examples() {
        assert_eq!(generalized_quantile(&P, 0.8).unwrap(), 2);
        assert_eq!(generalized_quantile(&P, 0.0).unwrap(), 1);
        assert_eq!(generalized_quantile(&P, 1.0).unwrap(), 3);
        assert!(generalized_quantile(&[], 0.5).is_err());
    }

    #[test]
    fn worked_example_frequencies() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let n = 30_000;
        let (mut single, mut pair) = (0, 0);
        for _ in 0..n {
            let s = oracle_set(&P, open_unit(&mut rng), 0.2).unwrap();
            match s.sorted().as_slice() {
                [1] => single += 1,
                [0, 1] => pair += 1,
                other => panic!("unexpected set {other:?}"),
            }
        }
        assert!((single as f64 / n as f64 - 1.0 / 3.0).abs() < 0.01);
        assert!((pair as f64 / n as f64 - 2.0 / 3.0).abs() < 0.01);
    }

    #[test]
    fn full_level_gives_full_set() {
        let s = prediction_set(&P, 0.01, 1.0, EmptySetPolicy::KeepTop).unwrap();
        assert_eq!(s.sorted(), vec![0, 1, 2]);
        assert_eq!(oracle_set(&P, 0.5, 0.0).unwrap().len(), 3);
    }

    #[test]
    fn singleton_below_top_mass() {
        for u in [0.001, 0.5, 0.999] {
            assert_eq!(prediction_set(&P, u, 0.55, EmptySetPolicy::KeepTop).unwrap().labels(), &[1]);
            assert_eq!(oracle_set(&P, u, 0.5).unwrap().labels(), &[1]);
        }
        // The randomized rule alone can drop the top label.
        assert!(prediction_set(&P, 0.3, 0.3, EmptySetPolicy::Randomized).unwrap().is_empty());
    }

    #[test]
    fn zero_mass_boundary_keeps_l_labels() {
        let p = [0.5, 0.5, 0.0];
        let s = prediction_set(&p, 0.7, 1.0, EmptySetPolicy::KeepTop).unwrap();
        assert!(s.len() >= 2);
    }

    #[test]
    fn score_example_and_limits() {
        assert!((conformity_score(&P, 0, 0.5).unwrap() - 0.75).abs() < 1e-12);
        assert!(conformity_score(&P, 1, 1.0 - 1e-12).unwrap() < 1e-9);
        assert!((conformity_score(&P, 1, 1e-12).unwrap() - 0.6).abs() < 1e-9);
        assert!(conformity_score(&P, 3, 0.5).is_err());
    }

    #[test]
    fn score_matches_brute_force_grid_search() {
        // Smallest grid level whose randomized set contains the label.
        let w = conformity_score(&P, 0, 0.5).unwrap();
        let step = 1e-4;
        let found = (0..=10_000)
            .map(|i| i as f64 * step)
            .find(|&tau| prediction_set(&P, 0.5, tau, EmptySetPolicy::Randomized).unwrap().contains(0))
            .unwrap();
        assert!((found - w).abs() <= step + 1e-12);
    }

    #[test]
    fn calibration_examples() {
        let scores: Vec<f64> = (1..=9).map(|i| i as f64 / 10.0).collect();
        let thr = calibrate(&scores, 0.1).unwrap();
        assert_eq!(thr.tau_hat, 0.9);
        assert_eq!(calibrate(&scores, 0.95).unwrap().tau_hat, 0.1);
        assert_eq!(calibrate(&scores[..5], 0.1).unwrap().tau_hat, 1.0);
        assert!(calibrate(&[], 0.1).is_err());
        assert!(calibrate(&scores, 1.0).is_err());
        assert_eq!(calibration_rank(9, 0.1), 9);
        assert_eq!(calibration_rank(1999, 0.1), 1800);
    }

    #[test]
    fn calibrated_prediction_delegates() {
        let thr = CalibrationThreshold {
            tau_hat: 1.0,
            alpha: 0.1,
            calibration_size: 10,
        };
        assert_eq!(predict_calibrated(&P, 0.3, &thr).unwrap().len(), 3);
        let thr = CalibrationThreshold { tau_hat: 0.9, ..thr };
        for u in [0.1, 0.5, 0.9] {
            assert_eq!(
                predict_calibrated(&P, u, &thr).unwrap(),
                prediction_set(&P, u, 0.9, EmptySetPolicy::KeepTop).unwrap()
            );
        }
    }

    #[test]
    fn prob_matrix_validation() {
        assert!(ProbMatrix::from_rows(&[vec![0.5, 0.5], vec![0.2, 0.8]]).is_ok());
        assert!(ProbMatrix::from_rows(&[vec![0.5, 0.6]]).is_err());
        assert!(ProbMatrix::from_rows(&[vec![1.5, -0.5]]).is_err());
    }

    #[test]
    fn duality_on_random_instances() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        for _ in 0..500 {
            let k = rng.random_range(2..=12);
            let p = random_simplex(&mut rng, k);
            let y = rng.random_range(0..k);
            let u = open_unit(&mut rng);
            let w = conformity_score(&p, y, u).unwrap();
            for i in 0..=1000 {
                let tau = i as f64 * 1e-3;
                if (tau - w).abs() < 1e-9 {
                    continue;
                }
                let inside = prediction_set(&p, u, tau, EmptySetPolicy::Randomized).unwrap().contains(y);
                assert_eq!(inside, tau > w, "p={p:?} y={y} u={u} tau={tau} w={w}");
            }
        }
    }

    proptest! {
        #[test]
        fn sets_grow_with_level(
            raw in proptest::collection::vec(0.01f64..1.0, 2..10),
            u in 0.001f64..0.999,
            a in 0.0f64..1.0,
            b in 0.0f64..1.0,
        ) {
            let total: f64 = raw.iter().sum();
            let p: Vec<f64> = raw.iter().map(|v| v / total).collect();
            let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
            for policy in [EmptySetPolicy::KeepTop, EmptySetPolicy::Randomized] {
                let small = prediction_set(&p, u, lo, policy).unwrap();
                let big = prediction_set(&p, u, hi, policy).unwrap();
                prop_assert!(small.labels().iter().all(|&l| big.contains(l)));
                prop_assert!(big.len() <= p.len());
            }
            prop_assert!(!prediction_set(&p, u, lo, EmptySetPolicy::KeepTop).unwrap().is_empty());
        }

        #[test]
        fn scores_lie_in_unit_interval(
            raw in proptest::collection::vec(0.0f64..1.0, 2..10),
            u in 0.0f64..1.0,
            y in 0usize..10,
        ) {
            let total: f64 = raw.iter().sum::<f64>() + 1e-9;
            let p: Vec<f64> = raw.iter().map(|v| v / total).collect();
            let y = y % p.len();
            let w = conformity_score(&p, y, u).unwrap();
            prop_assert!((0.0..=1.0).contains(&w));
        }
    }
}
