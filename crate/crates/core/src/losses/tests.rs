use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::conformal::{conformity_score, EmptySetPolicy};
use crate::rng::open_unit;
use crate::tensor::{grad_check, objective, Tape};

fn temps(t: f64) -> Temperatures {
    let t = Temperature::new(t).unwrap();
    Temperatures { sort: t, rank: t, cdf: t }
}

fn scalar<F>(f: F) -> f64
where
    F: for<'t> FnOnce(&'t Tape) -> Result<Tensor<'t>>,
{
    let tape = Tape::new();
    f(&tape).unwrap().item()
}

/// Softmax rows of random logits with every pairwise gap at least `gap`.
fn separated_probs(rng: &mut ChaCha8Rng, n: usize, k: usize, gap: f64) -> Matrix {
    let mut rows = Vec::with_capacity(n);
    while rows.len() < n {
        let mut row: Vec<f64> = (0..k).map(|_| rng.random_range(-2.0..2.0)).collect();
        crate::tensor::softmax_in_place(&mut row);
        let mut s = row.clone();
        s.sort_by(f64::total_cmp);
        if s.windows(2).all(|w| w[1] - w[0] >= gap) {
            rows.push(row);
        }
    }
    Matrix::from_rows(&rows).unwrap()
}

fn brute_force_ks(scores: &[f64]) -> f64 {
    // Evaluate |F(w) - w| on both sides of every jump and on a fine grid.
    let m = scores.len() as f64;
    let ecdf = |w: f64, strict: bool| {
        scores.iter().filter(|&&s| if strict { s < w } else { s <= w }).count() as f64 / m
    };
    let mut best: f64 = 0.0;
    for &s in scores {
        best = best.max((ecdf(s, true) - s).abs()).max((ecdf(s, false) - s).abs());
    }
    for i in 0..=10_000 {
        let w = i as f64 / 10_000.0;
        best = best.max((ecdf(w, false) - w).abs());
    }
    best
}

#[test]
fn cross_entropy_examples() {
    let ce = |rows: Vec<Vec<f64>>, labels: Vec<usize>| {
        scalar(|t| cross_entropy(t.constant(Matrix::from_rows(&rows)?)?, &labels))
    };
    assert!((ce(vec![vec![1.0 / 6.0; 6]; 3], vec![0, 3, 5]) - 6f64.ln()).abs() < 1e-12);
    assert_eq!(ce(vec![vec![0.0, 1.0], vec![1.0, 0.0]], vec![1, 0]), 0.0);
    let two = ce(vec![vec![0.5, 0.5], vec![0.75, 0.25]], vec![0, 1]);
    assert!((two - (2f64.ln() + 4f64.ln()) / 2.0).abs() < 1e-12);
    // Zero probability hits the floor instead of infinity.
    let floored = ce(vec![vec![1.0, 0.0]], vec![1]);
    assert!((floored + PROB_FLOOR.ln()).abs() < 1e-9);
}

#[test]
fn focal_examples() {
    let fl = |rows: Vec<Vec<f64>>, labels: Vec<usize>, g: f64| {
        scalar(|t| focal_loss(t.constant(Matrix::from_rows(&rows)?)?, &labels, g))
    };
    assert!((fl(vec![vec![0.5, 0.5]], vec![0], 1.0) - 0.5 * 2f64.ln()).abs() < 1e-12);
    assert_eq!(fl(vec![vec![0.0, 1.0]], vec![1], 2.0), 0.0);
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let p = separated_probs(&mut rng, 5, 4, 0.0);
    let labels = [0, 1, 2, 3, 0];
    let a = scalar(|t| focal_loss(t.constant(p.clone())?, &labels, 0.0));
    let b = scalar(|t| cross_entropy(t.constant(p.clone())?, &labels));
    assert_eq!(a.to_bits(), b.to_bits());
}

#[test]
fn losses_reject_bad_labels() {
    let tape = Tape::new();
    let p = tape.constant(Matrix::from_rows(&[vec![0.5, 0.5]]).unwrap()).unwrap();
    assert!(matches!(cross_entropy(p, &[2]), Err(Error::LabelOutOfRange { .. })));
    assert!(cross_entropy(p, &[]).is_err());
}

#[test]
fn ks_examples() {
    assert!((ks_uniformity_stat(&[0.25, 0.5, 0.75]).unwrap() - 0.25).abs() < 1e-15);
    assert_eq!(ks_uniformity_stat(&[0.5]).unwrap(), 0.5);
    let grid: Vec<f64> = (1..=9).map(|i| i as f64 / 10.0).collect();
    assert!((ks_uniformity_stat(&grid).unwrap() - 0.1).abs() < 1e-12);
    assert!(ks_uniformity_stat(&[]).is_err());
}

#[test]
fn ks_matches_brute_force() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for _ in 0..50 {
        let m = rng.random_range(1..30);
        let scores: Vec<f64> = (0..m).map(|_| rng.random::<f64>()).collect();
        let exact = ks_uniformity_stat(&scores).unwrap();
        assert!((exact - brute_force_ks(&scores)).abs() < 1e-12);
    }
}

#[test]
fn soft_scores_converge_to_exact() {
    let p = Matrix::from_rows(&[vec![0.3, 0.6, 0.1]]).unwrap();
    let w = scalar(|t| soft_conformity_scores(t.constant(p.clone())?, &[0], &[0.5], &temps(1e-4)));
    assert!((w - 0.75).abs() < 1e-3);
    let w = scalar(|t| soft_conformity_scores(t.constant(p.clone())?, &[1], &[0.999], &temps(1e-4)));
    assert!(w.abs() < 2e-3);

    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let probs = separated_probs(&mut rng, 200, 6, 1e-2);
    let labels: Vec<usize> = (0..200).map(|_| rng.random_range(0..6)).collect();
    let noise: Vec<f64> = (0..200).map(|_| open_unit(&mut rng)).collect();
    let tape = Tape::new();
    let soft = soft_conformity_scores(tape.constant(probs.clone()).unwrap(), &labels, &noise, &temps(1e-4))
        .unwrap()
        .value();
    for i in 0..200 {
        let exact = conformity_score(probs.row(i), labels[i], noise[i]).unwrap();
        assert!((soft.as_slice()[i] - exact).abs() < 1e-3);
    }
}

#[test]
fn soft_ks_examples() {
    let t = Temperature::DEFAULT;
    let grid: Vec<f64> = (1..=100).map(|i| i as f64 / 101.0).collect();
    let v = scalar(|tp| soft_ks_loss(tp.constant(Matrix::column_vector(&grid))?, t, 101));
    assert!(v < 0.02, "{v}");
    let zeros = scalar(|tp| soft_ks_loss(tp.constant(Matrix::column_vector(&[0.0; 20]))?, t, 101));
    assert!(zeros > 0.9, "{zeros}");

    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for _ in 0..20 {
        let s: Vec<f64> = (0..64).map(|_| rng.random::<f64>()).collect();
        let soft = scalar(|tp| soft_ks_loss(tp.constant(Matrix::column_vector(&s))?, t, 101));
        let exact = ks_uniformity_stat(&s).unwrap();
        assert!((soft - exact).abs() < 0.03, "{soft} vs {exact}");
        assert!((soft - exact).abs() < 2.0 * t.value() + 1.0 / 101.0 + 1.0 / 64.0);
    }
    let tape = Tape::new();
    assert!(soft_ks_loss(tape.constant(Matrix::zeros(0, 1)).unwrap(), t, 101).is_err());
    assert!(soft_ks_loss(tape.constant(Matrix::zeros(3, 1)).unwrap(), t, 1).is_err());
}

#[test]
fn soft_ks_gradient_on_random_scores() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut checked = 0;
    while checked < 10 {
        let s = Matrix::column_vector(&(0..16).map(|_| rng.random::<f64>()).collect::<Vec<_>>());
        let f = objective(|x| soft_ks_loss(x, Temperature::new(0.05).unwrap(), 101));
        // Skip near-ties of the hard max.
        let tape = Tape::new();
        let x = tape.constant(s.clone()).unwrap();
        let grid = tape.constant(Matrix::column_vector(&ks_grid(101))).unwrap();
        let pts = tape.concat_rows(&[grid, x]).unwrap();
        let dev = smooth_ecdf_at(x, pts, Temperature::new(0.05).unwrap()).unwrap().sub(pts).unwrap().abs().value();
        let mut d = dev.into_vec();
        d.sort_by(|a, b| b.total_cmp(a));
        if d[0] - d[1] < 1e-4 {
            continue;
        }
        let err = grad_check(f, &s, 1e-6).unwrap();
        assert!(err < 1e-4, "{err}");
        checked += 1;
    }
}

#[test]
fn soft_scores_gradient() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    for _ in 0..10 {
        let logits = Matrix::from_vec(5, 4, (0..20).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
        let labels: Vec<usize> = (0..5).map(|_| rng.random_range(0..4)).collect();
        let noise: Vec<f64> = (0..5).map(|_| open_unit(&mut rng)).collect();
        let f = objective(|x| -> Result<_> {
            let s = soft_conformity_scores(x.softmax_rows(), &labels, &noise, &temps(0.2))?;
            Ok(s.mul(s)?.sum())
        });
        assert!(grad_check(f, &logits, 1e-6).unwrap() < 1e-4);
    }
}

#[test]
fn combined_loss_reductions() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let p1 = separated_probs(&mut rng, 8, 4, 0.0);
    let p2 = separated_probs(&mut rng, 6, 4, 0.0);
    let l1 = [0, 1, 2, 3, 0, 1, 2, 3];
    let l2 = [3, 2, 1, 0, 0, 1];
    let u2: Vec<f64> = (0..6).map(|_| open_unit(&mut rng)).collect();
    let eval = |lambda: f64| {
        let tape = Tape::new();
        let a = tape.constant(p1.clone()).unwrap();
        let b = tape.constant(p2.clone()).unwrap();
        let cfg = LossConfig {
            lambda,
            ..LossConfig::default()
        };
        let hold = HoldoutBatch {
            probs: b,
            labels: &l2,
            noise: &u2,
        };
        let terms = combined_loss(a, &l1, Some(hold), &cfg).unwrap();
        let ce = cross_entropy(a, &l1).unwrap().item();
        let ks = soft_ks_loss(
            soft_conformity_scores(b, &l2, &u2, &cfg.temperatures).unwrap(),
            cfg.temperatures.cdf,
            101,
        )
        .unwrap()
        .item();
        (terms.total.item(), terms.loss_a, terms.loss_u, ce, ks)
    };
    let (t0, a0, u0, ce, _) = eval(0.0);
    assert_eq!(t0, ce);
    assert_eq!(a0, ce);
    assert!(u0.is_none());
    let (t1, _, _, _, ks) = eval(1.0);
    assert!((t1 - ks).abs() < 1e-15);
    let (t2, a2, u2v, _, _) = eval(0.2);
    assert!((t2 - (0.8 * a2 + 0.2 * u2v.unwrap())).abs() < 1e-15);

    let tape = Tape::new();
    let a = tape.constant(p1.clone()).unwrap();
    assert!(combined_loss(a, &l1, None, &LossConfig::default()).is_err());
    // Baselines ignore lambda.
    let ce_cfg = LossConfig::for_kind(LossKind::CrossEntropy);
    assert!(combined_loss(a, &l1, None, &ce_cfg).is_ok());
}

#[test]
fn combined_and_hybrid_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    for kind in [LossKind::Conformal, LossKind::Hybrid] {
        for _ in 0..5 {
            let x = Matrix::from_vec(10, 3, (0..30).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
            let labels: Vec<usize> = (0..10).map(|_| rng.random_range(0..3)).collect();
            let noise: Vec<f64> = (0..5).map(|_| open_unit(&mut rng)).collect();
            let cfg = LossConfig {
                kind,
                temperatures: temps(0.3),
                ..LossConfig::default()
            };
            let f = objective(|x| -> Result<_> {
                let probs = x.softmax_rows();
                let hold = HoldoutBatch {
                    probs: probs.select_rows(&[5, 6, 7, 8, 9])?,
                    labels: &labels[5..],
                    noise: &noise,
                };
                Ok(combined_loss(probs.select_rows(&[0, 1, 2, 3, 4])?, &labels[..5], Some(hold), &cfg)?.total)
            });
            let err = grad_check(f, &x, 1e-6).unwrap();
            assert!(err < 1e-4, "{kind}: {err}");
        }
    }
}

fn hard_batch_size(p: &Matrix, labels: &[usize], noise: &[f64], alpha: f64) -> f64 {
    let m = p.rows();
    let scores: Vec<f64> = (0..m)
        .map(|i| conformity_score(p.row(i), labels[i], noise[i]).unwrap())
        .collect();
    let k = calibration_rank(m, alpha).min(m);
    let mut sorted = scores.clone();
    sorted.sort_by(f64::total_cmp);
    let tau = sorted[k - 1];
    (0..m)
        .map(|i| {
            crate::conformal::prediction_set(p.row(i), noise[i], tau, EmptySetPolicy::KeepTop)
                .unwrap()
                .len() as f64
        })
        .sum::<f64>()
        / m as f64
}

#[test]
fn hybrid_size_limits() {
    let t = temps(1e-5);
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let m = 60;
    let labels: Vec<usize> = (0..m).map(|_| rng.random_range(0..6)).collect();
    let noise: Vec<f64> = (0..m).map(|_| open_unit(&mut rng)).collect();

    let one_hot: Vec<Vec<f64>> = labels
        .iter()
        .map(|&y| (0..6).map(|c| if c == y { 1.0 } else { 0.0 }).collect())
        .collect();
    let p = Matrix::from_rows(&one_hot).unwrap();
    let size = scalar(|tp| hybrid_size_loss(tp.constant(p.clone())?, &labels, &noise, &t, 0.1));
    assert!((size - 1.0).abs() < 1e-3, "{size}");

    // Nearly uniform rows with distinct entries.
    let near: Vec<Vec<f64>> = (0..m)
        .map(|_| {
            let raw: Vec<f64> = (0..6).map(|_| 1.0 + rng.random_range(-1e-2..1e-2)).collect();
            let s: f64 = raw.iter().sum();
            raw.iter().map(|v| v / s).collect()
        })
        .collect();
    let p = Matrix::from_rows(&near).unwrap();
    let size = scalar(|tp| hybrid_size_loss(tp.constant(p.clone())?, &labels, &noise, &t, 0.1));
    assert!((5.0..=7.0).contains(&size), "{size}");
    let hard = hard_batch_size(&p, &labels, &noise, 0.1);
    assert!((size - hard).abs() < 0.05, "{size} vs {hard}");
}

#[test]
fn hybrid_matches_hard_oracle_on_separated_rows() {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    for _ in 0..10 {
        let m = 40;
        let p = separated_probs(&mut rng, m, 5, 1e-3);
        let labels: Vec<usize> = (0..m).map(|_| rng.random_range(0..5)).collect();
        let noise: Vec<f64> = (0..m).map(|_| open_unit(&mut rng)).collect();
        let soft = scalar(|tp| hybrid_size_loss(tp.constant(p.clone())?, &labels, &noise, &temps(1e-6), 0.1));
        let hard = hard_batch_size(&p, &labels, &noise, 0.1);
        assert!((soft - hard).abs() < 0.05, "{soft} vs {hard}");
    }
    let tape = Tape::new();
    let one = tape.constant(Matrix::from_rows(&[vec![0.5, 0.5]]).unwrap()).unwrap();
    assert!(hybrid_size_loss(one, &[0], &[0.5], &temps(0.1), 0.1).is_err());
}

#[test]
fn label_conditional_composition() {
    let t = Temperature::DEFAULT;
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let s: Vec<f64> = (0..12).map(|_| rng.random::<f64>()).collect();
    let single = scalar(|tp| soft_ks_loss(tp.constant(Matrix::column_vector(&s))?, t, 101));
    let same = scalar(|tp| label_conditional_ks(tp.constant(Matrix::column_vector(&s))?, &[2; 12], t, 101));
    assert_eq!(single, same);

    let doubled: Vec<f64> = s.iter().chain(&s).copied().collect();
    let labels: Vec<usize> = (0..24).map(|i| i / 12).collect();
    let two = scalar(|tp| label_conditional_ks(tp.constant(Matrix::column_vector(&doubled))?, &labels, t, 101));
    assert!((two - 2.0 * single).abs() < 1e-12);

    let labels: Vec<usize> = (0..12).map(|_| rng.random_range(0..2)).collect();
    let sum: f64 = (0..2)
        .map(|c| {
            let part: Vec<f64> = (0..12).filter(|&i| labels[i] == c).map(|i| s[i]).collect();
            scalar(|tp| soft_ks_loss(tp.constant(Matrix::column_vector(&part))?, t, 101))
        })
        .sum();
    let got = scalar(|tp| label_conditional_ks(tp.constant(Matrix::column_vector(&s))?, &labels, t, 101));
    assert!((got - sum).abs() < 1e-12);

    let before = diagnostics::skipped_classes();
    let got = scalar(|tp| label_conditional_ks(tp.constant(Matrix::column_vector(&s[..3]))?, &[0, 0, 1], t, 101));
    assert!(got > 0.0);
    assert!(diagnostics::skipped_classes() > before);
    let tape = Tape::new();
    let lone = tape.constant(Matrix::column_vector(&s[..2])).unwrap();
    assert!(label_conditional_ks(lone, &[0, 1], t, 101).is_err());
}

#[test]
fn config_validation_and_names() {
    assert!(LossConfig::default().validate().is_ok());
    let bad = LossConfig {
        lambda: 1.5,
        ..LossConfig::default()
    };
    assert!(bad.validate().is_err());
    for k in LossKind::ALL {
        assert_eq!(k.name().parse::<LossKind>().unwrap(), k);
    }
    assert!("mixup".parse::<LossKind>().is_err());
}

proptest! {
    #[test]
    fn ks_losses_are_bounded(s in proptest::collection::vec(0.0f64..=1.0, 1..40)) {
        let exact = ks_uniformity_stat(&s).unwrap();
        prop_assert!((0.0..1.0).contains(&exact));
        let soft = scalar(|tp| soft_ks_loss(tp.constant(Matrix::column_vector(&s))?, Temperature::DEFAULT, 101));
        prop_assert!(soft >= 0.0);
    }
}
