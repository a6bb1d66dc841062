use std::collections::HashSet;

use proptest::prelude::*;

use super::*;
use crate::data::{sample, SyntheticConfig};
use crate::losses::cross_entropy;

fn small_data(n: usize, seed: u64) -> Dataset {
    let cfg = SyntheticConfig {
        num_features: 5,
        ..SyntheticConfig::default()
    };
    sample(&cfg, n, seed).unwrap()
}

fn small_spec() -> MlpSpec {
    MlpSpec::new(5, vec![8, 6], 6).unwrap()
}

fn config(kind: LossKind, epochs: usize, batch: usize) -> TrainConfig {
    TrainConfig {
        epochs,
        batch_size: batch,
        loss: LossConfig::for_kind(kind),
        ..TrainConfig::default()
    }
}

fn bits(m: &Mlp) -> Vec<u64> {
    m.params().iter().flat_map(|p| p.as_slice().iter().map(|v| v.to_bits())).collect()
}

#[test]
fn split_sizes_and_determinism() {
    let (a, b) = split_train_data(12, 5.0 / 6.0, 1).unwrap();
    assert_eq!((a.len(), b.len()), (10, 2));
    assert_eq!(split_train_data(12, 5.0 / 6.0, 1).unwrap(), (a, b));
    assert!(split_train_data(1, 0.5, 1).is_err());
    assert!(split_train_data(5, 0.01, 1).is_err());
}

proptest! {
    #[test]
    fn split_is_a_partition(n in 2usize..300, f in 0.05f64..0.95, seed in 0u64..1000) {
        if let Ok((a, b)) = split_train_data(n, f, seed) {
            let sa: HashSet<_> = a.iter().collect();
            let sb: HashSet<_> = b.iter().collect();
            prop_assert!(sa.is_disjoint(&sb));
            prop_assert_eq!(sa.len() + sb.len(), n);
            prop_assert_eq!(a.len(), (f * n as f64).round() as usize);
        }
    }
}

#[test]
fn sgd_with_zero_gradient_is_identity() {
    let mut p = Matrix::from_rows(&[vec![1.0, -2.0]]).unwrap();
    let before = p.clone();
    sgd_step(vec![&mut p], &[Matrix::zeros(1, 2)], 0.1);
    assert_eq!(p, before);
    sgd_step(vec![&mut p], &[Matrix::from_rows(&[vec![1.0, 1.0]]).unwrap()], 0.5);
    assert_eq!(p.as_slice(), &[0.5, -2.5]);
}

#[test]
fn adam_first_step_has_learning_rate_magnitude() {
    for g in [1e-3, 0.5, 40.0, -7.0] {
        let mut p = Matrix::scalar(3.0);
        let mut state = AdamState::new(AdamConfig::default(), &[1]);
        state.step(vec![&mut p], &[Matrix::scalar(g)], 0.01);
        let moved = 3.0 - p.as_slice()[0];
        assert!((moved.abs() - 0.01).abs() < 1e-6, "{moved}");
        assert_eq!(moved.signum(), g.signum());
    }
}

#[test]
fn optimizers_descend_a_quadratic() {
    let target = [1.5, -0.5, 2.0];
    let loss = |p: &Matrix| p.as_slice().iter().zip(target).map(|(a, b)| (a - b).powi(2)).sum::<f64>();
    let grad = |p: &Matrix| Matrix::row_vector(&p.as_slice().iter().zip(target).map(|(a, b)| 2.0 * (a - b)).collect::<Vec<_>>());
    for use_adam in [false, true] {
        let mut p = Matrix::zeros(1, 3);
        let mut state = AdamState::new(AdamConfig::default(), &[3]);
        let mut last = loss(&p);
        for _ in 0..200 {
            let g = grad(&p);
            if use_adam {
                state.step(vec![&mut p], &[g], 1e-3);
            } else {
                sgd_step(vec![&mut p], &[g], 1e-2);
            }
            let now = loss(&p);
            assert!(now < last);
            last = now;
        }
    }
}

#[test]
fn single_sgd_step_matches_gradient() {
    let data = small_data(1, 2);
    let spec = small_spec();
    let mut cfg = config(LossKind::CrossEntropy, 1, 1);
    cfg.optimizer = OptimizerKind::Sgd;
    cfg.learning_rate = 0.05;
    cfg.lr_drop_at = 1.0;
    let out = train(&data, None, &spec, &cfg, 9).unwrap();

    let mut expected = Mlp::init(spec, rng::derive(9, "init", 0)).unwrap();
    let tape = Tape::new();
    let bound = expected.bind(&tape).unwrap();
    let x = tape.constant(data.x.clone()).unwrap();
    let loss = cross_entropy(expected.forward(&bound, x).unwrap(), &data.y).unwrap();
    tape.backward(loss).unwrap();
    let grads: Vec<Matrix> = bound.iter().map(|t| t.grad().unwrap()).collect();
    drop(tape);
    for (p, g) in expected.params_mut().into_iter().zip(&grads) {
        for (w, d) in p.as_mut_slice().iter_mut().zip(g.as_slice()) {
            *w -= 0.05 * d;
        }
    }
    assert_eq!(bits(&out.final_model), bits(&expected));
}

#[test]
fn replay_is_bitwise_deterministic() {
    let data = small_data(120, 3);
    let val = small_data(40, 4);
    for kind in LossKind::ALL {
        let cfg = config(kind, 3, 20);
        let a = train(&data, Some(&val), &small_spec(), &cfg, 11).unwrap();
        let b = train(&data, Some(&val), &small_spec(), &cfg, 11).unwrap();
        assert_eq!(bits(&a.final_model), bits(&b.final_model), "{kind}");
        assert_eq!(a.log, b.log);
        let c = train(&data, Some(&val), &small_spec(), &cfg, 12).unwrap();
        assert_ne!(bits(&a.final_model), bits(&c.final_model));
    }
}

#[test]
fn learning_rate_drops_exactly() {
    let data = small_data(60, 5);
    let mut cfg = config(LossKind::CrossEntropy, 10, 30);
    cfg.learning_rate = 0.3;
    cfg.lr_drop_factor = 7.0;
    cfg.lr_drop_at = 0.5;
    let out = train(&data, None, &small_spec(), &cfg, 1).unwrap();
    for m in &out.log {
        let want = if m.epoch <= 5 { 0.3 } else { 0.3 / 7.0 };
        assert_eq!(m.lr, want);
    }
}

#[test]
fn terms_never_share_samples() {
    let data = small_data(120, 6);
    for kind in [LossKind::Conformal, LossKind::Hybrid] {
        let cfg = config(kind, 3, 15);
        let mut seen_a = HashSet::new();
        let mut seen_u = HashSet::new();
        let mut steps = 0;
        let out = train_with_observer(&data, None, &small_spec(), &cfg, 2, &mut |ev| {
            seen_a.extend(ev.accuracy_rows.iter().copied());
            seen_u.extend(ev.holdout_rows.iter().copied());
            assert!(!ev.holdout_rows.is_empty());
            steps += 1;
        })
        .unwrap();
        let (i1, i2) = &out.split;
        let s1: HashSet<usize> = i1.iter().copied().collect();
        let s2: HashSet<usize> = i2.iter().copied().collect();
        assert!(s1.is_disjoint(&s2));
        assert_eq!(seen_a, s1);
        assert_eq!(seen_u, s2);
        // 100 accuracy rows in batches of 15 set the pace.
        assert_eq!(steps, 3 * 7);
    }
}

#[test]
fn zero_lambda_matches_cross_entropy_on_the_accuracy_side() {
    let data = small_data(90, 7);
    let mut cfg = config(LossKind::Conformal, 4, 16);
    cfg.loss.lambda = 0.0;
    let conformal = train(&data, None, &small_spec(), &cfg, 21).unwrap();
    let ce_cfg = TrainConfig {
        loss: LossConfig::for_kind(LossKind::CrossEntropy),
        ..cfg.clone()
    };
    let subset = data.subset(&conformal.split.0);
    let ce = train(&subset, None, &small_spec(), &ce_cfg, 21).unwrap();
    assert_eq!(bits(&conformal.final_model), bits(&ce.final_model));
}

#[test]
fn checkpoints_track_the_best_epochs() {
    let data = small_data(150, 8);
    let val = small_data(60, 9);
    let mut cfg = config(LossKind::Conformal, 12, 20);
    cfg.learning_rate = 5e-3;
    let out = train(&data, Some(&val), &small_spec(), &cfg, 3).unwrap();
    let best_acc = out.best_accuracy.as_ref().unwrap();
    let best_loss = out.best_loss.as_ref().unwrap();
    let accs: Vec<f64> = out.log.iter().map(|m| m.val_accuracy.unwrap()).collect();
    let losses: Vec<f64> = out.log.iter().map(|m| m.val_loss.unwrap()).collect();
    assert!(accs.iter().all(|&a| a <= accs[best_acc.epoch - 1]));
    assert!(losses.iter().all(|&l| l >= losses[best_loss.epoch - 1]));
    // Re-evaluating the saved model reproduces the logged accuracy.
    let probs = best_acc.model.predict_proba(&val.x).unwrap();
    assert_eq!(accuracy_and_fscore(&probs, &val.y).unwrap().accuracy, accs[best_acc.epoch - 1]);
    assert_eq!(out.select(EarlyStopping::None), &out.final_model);
    assert_eq!(out.log.len(), 12);
    assert!(out.log.iter().all(|m| m.loss_u.is_some()));

    let no_val = train(&data, None, &small_spec(), &config(LossKind::Focal, 2, 50), 3).unwrap();
    assert!(no_val.best_accuracy.is_none());
    assert_eq!(no_val.select(EarlyStopping::BestLoss), &no_val.final_model);
    assert!(no_val.log.iter().all(|m| m.loss_u.is_none() && m.val_loss.is_none()));
}

#[test]
fn conformal_training_reduces_the_loss() {
    let data = small_data(300, 10);
    let mut cfg = config(LossKind::Conformal, 40, 50);
    cfg.learning_rate = 1e-2;
    for seed in 0..3 {
        let out = train(&data, None, &small_spec(), &cfg, seed).unwrap();
        assert!(out.log.last().unwrap().train_loss < out.log[0].train_loss);
    }
}

#[test]
fn non_finite_inputs_abort_training() {
    let mut data = small_data(40, 11);
    data.x.as_mut_slice()[7] = f64::INFINITY;
    let cfg = config(LossKind::CrossEntropy, 5, 10);
    let err = train(&data, None, &small_spec(), &cfg, 1).unwrap_err();
    assert!(matches!(err, Error::Tensor(_) | Error::NonFiniteLoss { .. }), "{err}");
}

#[test]
fn oversized_batches_take_the_whole_side() {
    let data = small_data(60, 12);
    let mut sizes = Vec::new();
    train_with_observer(&data, None, &small_spec(), &config(LossKind::Hybrid, 2, 20), 1, &mut |ev| {
        sizes.push((ev.accuracy_rows.len(), ev.holdout_rows.len()));
    })
    .unwrap();
    assert_eq!(sizes, [(20, 10), (20, 10), (10, 10)].repeat(2));
}

#[test]
fn invalid_configurations_are_rejected() {
    let data = small_data(60, 12);
    let bad_split = TrainConfig {
        split_fraction: 1.0,
        ..config(LossKind::Conformal, 1, 5)
    };
    assert!(bad_split.validate().is_err());
    let wrong_dims = MlpSpec::new(4, vec![3], 6).unwrap();
    assert!(train(&data, None, &wrong_dims, &config(LossKind::CrossEntropy, 1, 5), 1).is_err());
}

#[test]
fn metrics_log_csv() {
    let data = small_data(40, 13);
    let val = small_data(20, 14);
    let out = train(&data, Some(&val), &small_spec(), &config(LossKind::Conformal, 2, 5), 1).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("log.csv");
    out.write_log(&path).unwrap();
    let text = std::fs::read_to_string(&path).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], "epoch,train_loss,loss_a,loss_u,val_accuracy,val_loss,lr,val_loss_a");
    assert_eq!(lines.len(), 3);
    assert!(lines[1].starts_with("1,"));
}
