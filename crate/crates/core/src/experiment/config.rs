use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::data::SyntheticConfig;
use crate::error::{Error, Result};
use crate::losses::{LossConfig, LossKind};
use crate::train::{OptimizerKind, TrainConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Preset {
    Desk,
    Paper,
}

impl FromStr for Preset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "desk" => Ok(Preset::Desk),
            "paper" => Ok(Preset::Paper),
            other => Err(Error::Config(format!("unknown preset {other:?} (expected desk or paper)"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Normalization {
    #[default]
    Zscore,
    None,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CsvSource {
    pub path: PathBuf,
    #[serde(default = "default_label_column")]
    pub label_column: String,
    #[serde(default)]
    pub normalization: Normalization,
}

fn default_label_column() -> String {
    "label".into()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "snake_case")]
pub enum DataSource {
    Synthetic(SyntheticConfig),
    Csv(CsvSource),
}

/// Row counts of the four disjoint splits.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Sizes {
    pub train: usize,
    /// 0 disables validation and with it the early-stopped checkpoints.
    pub validation: usize,
    pub calibration: usize,
    pub test: usize,
}

impl Default for Sizes {
    fn default() -> Self {
        Self {
            train: 2400,
            validation: 2000,
            calibration: 2000,
            test: 2000,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepAxis {
    NTrain,
    NumClasses,
    Delta,
    Lambda,
    Shift,
}

impl SweepAxis {
    pub fn name(self) -> &'static str {
        match self {
            SweepAxis::NTrain => "n_train",
            SweepAxis::NumClasses => "num_classes",
            SweepAxis::Delta => "delta",
            SweepAxis::Lambda => "lambda",
            SweepAxis::Shift => "shift",
        }
    }

    /// Whether the value changes the sampled data (as opposed to the
    /// training objective or only the test distribution).
    pub fn changes_data(self) -> bool {
        matches!(self, SweepAxis::NTrain | SweepAxis::NumClasses | SweepAxis::Delta)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Sweep {
    pub axis: SweepAxis,
    pub values: Vec<f64>,
}

/// One training configuration per method.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MethodTraining {
    pub conformal: TrainConfig,
    pub cross_entropy: TrainConfig,
    pub focal: TrainConfig,
    pub hybrid: TrainConfig,
}

impl MethodTraining {
    pub fn get(&self, kind: LossKind) -> &TrainConfig {
        match kind {
            LossKind::Conformal => &self.conformal,
            LossKind::CrossEntropy => &self.cross_entropy,
            LossKind::Focal => &self.focal,
            LossKind::Hybrid => &self.hybrid,
        }
    }

    pub fn get_mut(&mut self, kind: LossKind) -> &mut TrainConfig {
        match kind {
            LossKind::Conformal => &mut self.conformal,
            LossKind::CrossEntropy => &mut self.cross_entropy,
            LossKind::Focal => &mut self.focal,
            LossKind::Hybrid => &mut self.hybrid,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub data: DataSource,
    pub methods: Vec<LossKind>,
    pub hidden_widths: Vec<usize>,
    pub train: MethodTraining,
    pub alpha: f64,
    pub replicates: usize,
    pub seed: u64,
    pub sizes: Sizes,
    /// Values of `a` for the test-time covariate shift; 1 is no shift.
    pub test_shifts: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sweep: Option<Sweep>,
    /// Also report sets at the nominal level `1 - alpha` without calibration.
    pub calibration_ablation: bool,
    pub save_checkpoints: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output_dir: Option<PathBuf>,
}

fn method_config(kind: LossKind, epochs: usize, batch: usize, optimizer: OptimizerKind, lr: f64) -> TrainConfig {
    TrainConfig {
        epochs,
        batch_size: batch,
        optimizer,
        learning_rate: lr,
        loss: LossConfig::for_kind(kind),
        ..TrainConfig::default()
    }
}

impl Preset {
    pub fn config(self) -> ExperimentConfig {
        match self {
            Preset::Desk => {
                // Optimizers follow the full preset; batch 200 throughout so
                // 300 epochs still give enough steps.
                let sgd = |kind| method_config(kind, 300, 200, OptimizerKind::Sgd, 0.01);
                ExperimentConfig {
                    data: DataSource::Synthetic(SyntheticConfig::default()),
                    methods: LossKind::ALL.to_vec(),
                    hidden_widths: vec![64, 64, 32],
                    train: MethodTraining {
                        conformal: method_config(LossKind::Conformal, 300, 200, OptimizerKind::Adam, 1e-3),
                        cross_entropy: sgd(LossKind::CrossEntropy),
                        focal: sgd(LossKind::Focal),
                        hybrid: sgd(LossKind::Hybrid),
                    },
                    alpha: 0.1,
                    replicates: 10,
                    seed: 0,
                    sizes: Sizes::default(),
                    test_shifts: vec![1.0],
                    sweep: None,
                    calibration_ablation: true,
                    save_checkpoints: true,
                    output_dir: None,
                }
            }
            Preset::Paper => ExperimentConfig {
                data: DataSource::Synthetic(SyntheticConfig::default()),
                methods: LossKind::ALL.to_vec(),
                hidden_widths: vec![256, 256, 128, 64],
                train: MethodTraining {
                    conformal: method_config(LossKind::Conformal, 4000, 750, OptimizerKind::Adam, 1e-3),
                    cross_entropy: method_config(LossKind::CrossEntropy, 3000, 200, OptimizerKind::Sgd, 0.01),
                    focal: method_config(LossKind::Focal, 3000, 200, OptimizerKind::Sgd, 0.01),
                    hybrid: method_config(LossKind::Hybrid, 4000, 750, OptimizerKind::Sgd, 0.01),
                },
                alpha: 0.1,
                replicates: 50,
                seed: 0,
                sizes: Sizes {
                    train: 2400,
                    validation: 2000,
                    calibration: 10_000,
                    test: 2000,
                },
                test_shifts: vec![1.0],
                sweep: None,
                calibration_ablation: true,
                save_checkpoints: true,
                output_dir: None,
            },
        }
    }
}

/// Recursive table merge; arrays and scalars in `overlay` replace `base`.
/// A table whose `source` tag changes is replaced as a whole.
fn merge(base: &mut toml::Table, overlay: toml::Table) {
    for (key, value) in overlay {
        match (base.get_mut(&key), value) {
            (Some(toml::Value::Table(b)), toml::Value::Table(o)) if b.get("source") == o.get("source") || !o.contains_key("source") => {
                merge(b, o)
            }
            (_, value) => {
                base.insert(key, value);
            }
        }
    }
}

impl ExperimentConfig {
    /// Parse TOML on top of `base`; keys absent from the text keep the base
    /// values and unknown keys are rejected.
    pub fn from_toml(text: &str, base: &ExperimentConfig) -> Result<Self> {
        let overlay: toml::Table = toml::from_str(text).map_err(|e| Error::Config(e.message().to_string()))?;
        let mut merged = toml::Table::try_from(base).map_err(|e| Error::Config(e.to_string()))?;
        merge(&mut merged, overlay);
        let cfg: ExperimentConfig = toml::Value::Table(merged)
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(e.message().to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path, base: &ExperimentConfig) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text, base).map_err(|e| match e {
            Error::Config(msg) => Error::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.replicates == 0 {
            return bad("replicates must be at least 1".into());
        }
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return bad(format!("alpha {} is not in (0, 1)", self.alpha));
        }
        if self.methods.is_empty() {
            return bad("methods is empty".into());
        }
        if self.hidden_widths.contains(&0) {
            return bad("hidden_widths entries must be positive".into());
        }
        if self.sizes.train == 0 || self.sizes.calibration == 0 || self.sizes.test == 0 {
            return bad("sizes.train, sizes.calibration and sizes.test must be positive".into());
        }
        if self.test_shifts.is_empty() {
            return bad("test_shifts is empty".into());
        }
        for kind in LossKind::ALL {
            let t = self.train.get(kind);
            if t.loss.kind != kind {
                return bad(format!(
                    "train.{kind}.loss.kind is {}, expected {kind}",
                    t.loss.kind
                ));
            }
            t.validate().map_err(|e| Error::Config(format!("train.{kind}: {e}")))?;
        }
        if let DataSource::Synthetic(s) = &self.data {
            s.validate().map_err(|e| Error::Config(format!("data: {e}")))?;
            for &a in &self.test_shifts {
                s.with_shift(a).validate().map_err(|e| Error::Config(format!("test_shifts: {e}")))?;
            }
        }
        if let Some(sweep) = &self.sweep {
            if sweep.values.is_empty() {
                return bad(format!("sweep over {} has no values", sweep.axis.name()));
            }
            if let (DataSource::Csv(_), SweepAxis::NumClasses | SweepAxis::Delta | SweepAxis::Shift) =
                (&self.data, sweep.axis)
            {
                return bad(format!("sweep axis {} needs synthetic data", sweep.axis.name()));
            }
            for (i, &v) in sweep.values.iter().enumerate() {
                self.variant(Some(i))
                    .validate_variant()
                    .map_err(|e| Error::Config(format!("sweep value {v}: {e}")))?;
            }
        }
        Ok(())
    }

    fn validate_variant(&self) -> Result<()> {
        if let DataSource::Synthetic(s) = &self.data {
            s.validate()?;
            for &a in &self.test_shifts {
                s.with_shift(a).validate()?;
            }
        }
        if self.sizes.train == 0 {
            return Err(Error::Config("n_train must be positive".into()));
        }
        for kind in LossKind::ALL {
            self.train.get(kind).validate()?;
        }
        Ok(())
    }

    /// Configuration with the `index`-th sweep value applied.
    pub fn variant(&self, index: Option<usize>) -> ExperimentConfig {
        let mut cfg = self.clone();
        let (Some(sweep), Some(i)) = (&self.sweep, index) else {
            return cfg;
        };
        let v = sweep.values[i];
        match sweep.axis {
            SweepAxis::NTrain => cfg.sizes.train = v as usize,
            SweepAxis::NumClasses => {
                if let DataSource::Synthetic(s) = &mut cfg.data {
                    s.num_classes = v as usize;
                }
            }
            SweepAxis::Delta => {
                if let DataSource::Synthetic(s) = &mut cfg.data {
                    s.delta = v;
                }
            }
            SweepAxis::Lambda => {
                for kind in LossKind::ALL {
                    cfg.train.get_mut(kind).loss.lambda = v;
                }
            }
            SweepAxis::Shift => cfg.test_shifts = vec![v],
        }
        cfg
    }

    /// Output width of the network for this data.
    pub fn num_classes(&self) -> Option<usize> {
        match &self.data {
            DataSource::Synthetic(s) => Some(s.num_classes),
            DataSource::Csv(_) => None,
        }
    }
}
