//! Mini-batch training with a split between the accuracy and hold-out terms.
//!
//! For conformal and hybrid losses the training indices are split once into
//! `I1` (accuracy term) and `I2` (hold-out term). Each epoch walks the larger
//! side in `ceil(|side| / M)` batches; the smaller side is cycled, reshuffling
//! whenever it wraps. Shuffling of each side and the hold-out noise use
//! separate random streams, so a zero-weight hold-out term leaves the
//! accuracy batches exactly as a plain cross-entropy run would see them.

use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::conformal::{calibration_rank, conformity_scores, prediction_set, EmptySetPolicy, ProbMatrix};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::eval::{accuracy_and_fscore, fmt_metric};
use crate::losses::{combined_loss, ks_uniformity_stat, HoldoutBatch, LossConfig, LossKind, PROB_FLOOR};
use crate::model::{Mlp, MlpSpec};
use crate::rng::{self, open_unit_vec, StreamRng};
use crate::tensor::{Matrix, Tape};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    Sgd,
    Adam,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Which checkpoint a run reports as its model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EarlyStopping {
    None,
    BestAccuracy,
    BestLoss,
}

impl EarlyStopping {
    pub const ALL: [EarlyStopping; 3] = [EarlyStopping::None, EarlyStopping::BestAccuracy, EarlyStopping::BestLoss];

    pub fn name(self) -> &'static str {
        match self {
            EarlyStopping::None => "final",
            EarlyStopping::BestAccuracy => "best_accuracy",
            EarlyStopping::BestLoss => "best_loss",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub optimizer: OptimizerKind,
    pub learning_rate: f64,
    pub lr_drop_factor: f64,
    pub lr_drop_at: f64,
    pub split_fraction: f64,
    pub adam: AdamConfig,
    pub early_stopping: EarlyStopping,
    pub loss: LossConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 300,
            batch_size: 200,
            optimizer: OptimizerKind::Adam,
            learning_rate: 1e-3,
            lr_drop_factor: 10.0,
            lr_drop_at: 0.5,
            split_fraction: 5.0 / 6.0,
            adam: AdamConfig::default(),
            early_stopping: EarlyStopping::None,
            loss: LossConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |what: &'static str, detail: String| Err(Error::invalid(what, detail));
        if self.epochs == 0 {
            return bad("epochs", "must be positive".into());
        }
        if self.batch_size == 0 {
            return bad("batch_size", "must be positive".into());
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad("learning_rate", format!("{} is not positive", self.learning_rate));
        }
        if !(self.lr_drop_factor > 0.0) {
            return bad("lr_drop_factor", format!("{} is not positive", self.lr_drop_factor));
        }
        if !(self.lr_drop_at >= 0.0) {
            return bad("lr_drop_at", format!("{} is negative", self.lr_drop_at));
        }
        if !(self.split_fraction > 0.0 && self.split_fraction < 1.0) {
            return bad("split_fraction", format!("{} is not in (0, 1)", self.split_fraction));
        }
        self.loss.validate()
    }

    /// First epoch (0-based) trained at the reduced rate.
    pub fn drop_epoch(&self) -> usize {
        (self.lr_drop_at * self.epochs as f64).floor() as usize
    }

    pub fn lr_at(&self, epoch: usize) -> f64 {
        if epoch >= self.drop_epoch() {
            self.learning_rate / self.lr_drop_factor
        } else {
            self.learning_rate
        }
    }
}

/// Disjoint random split of `0..n`; `|I1| = round(fraction * n)`.
pub fn split_train_data(n: usize, fraction: f64, seed: u64) -> Result<(Vec<usize>, Vec<usize>)> {
    let n1 = (fraction * n as f64).round() as usize;
    if n1 == 0 || n1 >= n {
        return Err(Error::invalid(
            "train split",
            format!("fraction {fraction} of {n} samples leaves a side empty"),
        ));
    }
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut rng::stream(seed, "split"));
    let i2 = idx.split_off(n1);
    Ok((idx, i2))
}

/// `theta <- theta - lr * g`.
pub fn sgd_step(params: Vec<&mut Matrix>, grads: &[Matrix], lr: f64) {
    for (p, g) in params.into_iter().zip(grads) {
        for (w, d) in p.as_mut_slice().iter_mut().zip(g.as_slice()) {
            *w -= lr * d;
        }
    }
}

/// Bias-corrected adaptive moment estimates.
#[derive(Debug, Clone)]
pub struct AdamState {
    cfg: AdamConfig,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: i32,
}

impl AdamState {
    pub fn new(cfg: AdamConfig, shapes: &[usize]) -> Self {
        Self {
            cfg,
            m: shapes.iter().map(|&n| vec![0.0; n]).collect(),
            v: shapes.iter().map(|&n| vec![0.0; n]).collect(),
            t: 0,
        }
    }

    pub fn step(&mut self, params: Vec<&mut Matrix>, grads: &[Matrix], lr: f64) {
        self.t += 1;
        let AdamConfig { beta1, beta2, eps } = self.cfg;
        let c1 = 1.0 - beta1.powi(self.t);
        let c2 = 1.0 - beta2.powi(self.t);
        for (((p, g), m), v) in params.into_iter().zip(grads).zip(&mut self.m).zip(&mut self.v) {
            for (((w, &d), mi), vi) in p.as_mut_slice().iter_mut().zip(g.as_slice()).zip(m).zip(v) {
                *mi = beta1 * *mi + (1.0 - beta1) * d;
                *vi = beta2 * *vi + (1.0 - beta2) * d * d;
                *w -= lr * (*mi / c1) / ((*vi / c2).sqrt() + eps);
            }
        }
    }
}

enum Optimizer {
    Sgd,
    Adam(AdamState),
}

impl Optimizer {
    fn new(cfg: &TrainConfig, model: &Mlp) -> Self {
        match cfg.optimizer {
            OptimizerKind::Sgd => Optimizer::Sgd,
            OptimizerKind::Adam => {
                let shapes: Vec<usize> = model.params().iter().map(|p| p.len()).collect();
                Optimizer::Adam(AdamState::new(cfg.adam, &shapes))
            }
        }
    }

    fn step(&mut self, model: &mut Mlp, grads: &[Matrix], lr: f64) {
        match self {
            Optimizer::Sgd => sgd_step(model.params_mut(), grads, lr),
            Optimizer::Adam(state) => state.step(model.params_mut(), grads, lr),
        }
    }
}

/// Endless batches over a fixed index set, reshuffled on every pass. A batch
/// size above the set size yields the whole set each time.
struct BatchCycler {
    order: Vec<usize>,
    pos: usize,
    size: usize,
    rng: StreamRng,
}

impl BatchCycler {
    fn new(indices: Vec<usize>, size: usize, rng: StreamRng) -> Self {
        Self {
            pos: indices.len(),
            order: indices,
            size,
            rng,
        }
    }

    fn batches_per_pass(&self) -> usize {
        self.order.len().div_ceil(self.size)
    }

    fn start_pass(&mut self) {
        self.order.shuffle(&mut self.rng);
        self.pos = 0;
    }

    fn next_batch(&mut self) -> Vec<usize> {
        if self.pos >= self.order.len() {
            self.start_pass();
        }
        let end = (self.pos + self.size).min(self.order.len());
        let batch = self.order[self.pos..end].to_vec();
        self.pos = end;
        batch
    }
}

/// One row of the per-epoch metrics log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    /// 1-based.
    pub epoch: usize,
    pub train_loss: f64,
    pub loss_a: f64,
    pub loss_u: Option<f64>,
    pub val_accuracy: Option<f64>,
    pub val_loss: Option<f64>,
    pub val_loss_a: Option<f64>,
    pub lr: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SavedModel {
    /// 1-based epoch after which the parameters were taken.
    pub epoch: usize,
    pub model: Mlp,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CheckpointSet {
    pub final_model: Mlp,
    pub best_accuracy: Option<SavedModel>,
    pub best_loss: Option<SavedModel>,
    pub log: Vec<EpochMetrics>,
    /// Index sets used for the accuracy and hold-out terms.
    pub split: (Vec<usize>, Vec<usize>),
}

impl CheckpointSet {
    /// The requested checkpoint, falling back to the final model when no
    /// validation data was given.
    pub fn select(&self, which: EarlyStopping) -> &Mlp {
        let saved = match which {
            EarlyStopping::None => None,
            EarlyStopping::BestAccuracy => self.best_accuracy.as_ref(),
            EarlyStopping::BestLoss => self.best_loss.as_ref(),
        };
        saved.map_or(&self.final_model, |s| &s.model)
    }

    pub fn write_log(&self, path: &Path) -> Result<()> {
        let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = std::io::BufWriter::new(file);
        let write = |w: &mut std::io::BufWriter<std::fs::File>, line: String| {
            writeln!(w, "{line}").map_err(|e| Error::io(path, e))
        };
        write(&mut w, "epoch,train_loss,loss_a,loss_u,val_accuracy,val_loss,lr,val_loss_a".into())?;
        for m in &self.log {
            write(
                &mut w,
                format!(
                    "{},{},{},{},{},{},{},{}",
                    m.epoch,
                    m.train_loss,
                    m.loss_a,
                    fmt_metric(m.loss_u),
                    fmt_metric(m.val_accuracy),
                    fmt_metric(m.val_loss),
                    m.lr,
                    fmt_metric(m.val_loss_a),
                ),
            )?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }
}

/// Indices seen by each term in one optimizer step.
#[derive(Debug, Clone, Copy)]
pub struct BatchEvent<'a> {
    pub epoch: usize,
    pub step: usize,
    pub accuracy_rows: &'a [usize],
    pub holdout_rows: &'a [usize],
}

/// Validation data with the noise fixed once per run.
struct Validation<'a> {
    data: &'a Dataset,
    noise: Vec<f64>,
}

impl Validation<'_> {
    /// `(accuracy, combined loss, accuracy term)` of `model`.
    ///
    /// The hold-out term is evaluated exactly: KS distance of the exact
    /// conformity scores, or the mean size of sets calibrated on the
    /// validation data itself for the hybrid loss.
    fn evaluate(&self, model: &Mlp, cfg: &LossConfig) -> Result<(f64, f64, f64)> {
        let probs = model.predict_proba(&self.data.x)?;
        let y = &self.data.y;
        let acc = accuracy_and_fscore(&probs, y)?.accuracy;
        let loss_a = exact_accuracy_loss(&probs, y, cfg);
        let lambda = cfg.effective_lambda();
        if lambda == 0.0 {
            return Ok((acc, loss_a, loss_a));
        }
        let scores = conformity_scores(&probs, y, &self.noise)?;
        let loss_u = match cfg.kind {
            LossKind::Hybrid => within_sample_size(&probs, &scores, &self.noise, cfg.alpha_hybrid)?,
            _ => ks_uniformity_stat(&scores)?,
        };
        Ok((acc, (1.0 - lambda) * loss_a + lambda * loss_u, loss_a))
    }
}

fn exact_accuracy_loss(probs: &ProbMatrix, labels: &[usize], cfg: &LossConfig) -> f64 {
    let gamma = if cfg.kind == LossKind::Focal { cfg.focal_gamma } else { 0.0 };
    let total: f64 = probs
        .iter_rows()
        .zip(labels)
        .map(|(p, &y)| {
            let py = p[y].max(PROB_FLOOR);
            -(1.0 - p[y]).powf(gamma) * py.ln()
        })
        .sum();
    total / labels.len() as f64
}

fn within_sample_size(probs: &ProbMatrix, scores: &[f64], noise: &[f64], alpha: f64) -> Result<f64> {
    let m = scores.len();
    let mut sorted = scores.to_vec();
    sorted.sort_by(f64::total_cmp);
    let tau = sorted[calibration_rank(m, alpha).min(m) - 1];
    let mut total = 0usize;
    for (p, &u) in probs.iter_rows().zip(noise) {
        total += prediction_set(p, u, tau, EmptySetPolicy::KeepTop)?.len();
    }
    Ok(total as f64 / m as f64)
}

pub fn train(
    data: &Dataset,
    validation: Option<&Dataset>,
    spec: &MlpSpec,
    cfg: &TrainConfig,
    seed: u64,
) -> Result<CheckpointSet> {
    train_with_observer(data, validation, spec, cfg, seed, &mut |_| {})
}

/// [`train`] with a callback receiving the rows used in every step.
pub fn train_with_observer(
    data: &Dataset,
    validation: Option<&Dataset>,
    spec: &MlpSpec,
    cfg: &TrainConfig,
    seed: u64,
    observer: &mut dyn FnMut(BatchEvent<'_>),
) -> Result<CheckpointSet> {
    cfg.validate()?;
    spec.validate()?;
    if data.num_features() != spec.input_dim {
        return Err(Error::invalid(
            "training data",
            format!("{} features, model expects {}", data.num_features(), spec.input_dim),
        ));
    }
    if data.num_classes > spec.num_classes {
        return Err(Error::invalid(
            "training data",
            format!("{} classes, model has {}", data.num_classes, spec.num_classes),
        ));
    }
    let lambda = cfg.loss.effective_lambda();
    let (i1, i2) = if cfg.loss.kind.uses_holdout() {
        split_train_data(data.len(), cfg.split_fraction, seed)?
    } else {
        if data.is_empty() {
            return Err(Error::Empty { op: "train" });
        }
        ((0..data.len()).collect(), Vec::new())
    };

    let mut model = Mlp::init(spec.clone(), rng::derive(seed, "init", 0))?;
    let mut optimizer = Optimizer::new(cfg, &model);
    let mut side_a = BatchCycler::new(i1.clone(), cfg.batch_size, rng::stream(seed, "shuffle_a"));
    let mut side_u = BatchCycler::new(i2.clone(), cfg.batch_size, rng::stream(seed, "shuffle_u"));
    let mut noise_rng = rng::stream(seed, "noise");
    let val = validation.map(|d| Validation {
        data: d,
        noise: open_unit_vec(&mut rng::stream(seed, "val_noise"), d.len()),
    });

    let steps = if lambda > 0.0 {
        side_a.batches_per_pass().max(side_u.batches_per_pass())
    } else {
        side_a.batches_per_pass()
    };
    let mut log = Vec::with_capacity(cfg.epochs);
    let mut best_accuracy: Option<(f64, SavedModel)> = None;
    let mut best_loss: Option<(f64, SavedModel)> = None;

    for epoch in 0..cfg.epochs {
        let lr = cfg.lr_at(epoch);
        side_a.start_pass();
        if lambda > 0.0 {
            side_u.start_pass();
        }
        let (mut sum_total, mut sum_a, mut sum_u) = (0.0, 0.0, 0.0);
        for step in 0..steps {
            let rows_a = side_a.next_batch();
            let rows_u = if lambda > 0.0 { side_u.next_batch() } else { Vec::new() };
            observer(BatchEvent {
                epoch,
                step,
                accuracy_rows: &rows_a,
                holdout_rows: &rows_u,
            });
            let labels_a: Vec<usize> = rows_a.iter().map(|&i| data.y[i]).collect();
            let labels_u: Vec<usize> = rows_u.iter().map(|&i| data.y[i]).collect();
            let noise = open_unit_vec(&mut noise_rng, rows_u.len());

            let tape = Tape::new();
            let bound = model.bind(&tape)?;
            let xa = tape.constant(data.x.select_rows(&rows_a))?;
            let probs_a = model.forward(&bound, xa)?;
            let holdout = if lambda > 0.0 {
                let xu = tape.constant(data.x.select_rows(&rows_u))?;
                Some(HoldoutBatch {
                    probs: model.forward(&bound, xu)?,
                    labels: &labels_u,
                    noise: &noise,
                })
            } else {
                None
            };
            let terms = combined_loss(probs_a, &labels_a, holdout, &cfg.loss)?;
            let total = terms.total.item();
            if !total.is_finite() {
                return Err(Error::NonFiniteLoss {
                    epoch: epoch + 1,
                    batch: step + 1,
                    total,
                    loss_a: terms.loss_a,
                    loss_u: terms.loss_u.unwrap_or(f64::NAN),
                });
            }
            tape.backward(terms.total)?;
            let grads: Vec<Matrix> = bound.iter().map(|t| t.grad().expect("parameter leaf")).collect();
            let (loss_a, loss_u) = (terms.loss_a, terms.loss_u);
            drop(terms);
            drop(bound);
            drop(tape);
            optimizer.step(&mut model, &grads, lr);
            sum_total += total;
            sum_a += loss_a;
            sum_u += loss_u.unwrap_or(0.0);
        }
        if !model.is_finite() {
            return Err(Error::NonFiniteLoss {
                epoch: epoch + 1,
                batch: steps,
                total: f64::NAN,
                loss_a: sum_a / steps as f64,
                loss_u: sum_u / steps as f64,
            });
        }
        let mut row = EpochMetrics {
            epoch: epoch + 1,
            train_loss: sum_total / steps as f64,
            loss_a: sum_a / steps as f64,
            loss_u: (lambda > 0.0).then(|| sum_u / steps as f64),
            val_accuracy: None,
            val_loss: None,
            val_loss_a: None,
            lr,
        };
        if let Some(v) = &val {
            let (acc, loss, loss_a) = v.evaluate(&model, &cfg.loss)?;
            row.val_accuracy = Some(acc);
            row.val_loss = Some(loss);
            row.val_loss_a = Some(loss_a);
            if best_accuracy.as_ref().is_none_or(|(b, _)| acc > *b) {
                best_accuracy = Some((acc, SavedModel { epoch: epoch + 1, model: model.clone() }));
            }
            if best_loss.as_ref().is_none_or(|(b, _)| loss < *b) {
                best_loss = Some((loss, SavedModel { epoch: epoch + 1, model: model.clone() }));
            }
        }
        log.push(row);
    }

    Ok(CheckpointSet {
        final_model: model,
        best_accuracy: best_accuracy.map(|(_, s)| s),
        best_loss: best_loss.map(|(_, s)| s),
        log,
        split: (i1, i2),
    })
}

#[cfg(test)]
mod tests;
