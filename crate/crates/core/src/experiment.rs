//! Replicated train / calibrate / evaluate runs and their report files.
//!
//! Every job (replicate x method x sweep value) rebuilds its data from
//! seeds, so jobs are independent and may run on any worker in any order;
//! results are gathered and written by the calling thread.

mod config;
mod report;

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::Serialize;

pub use config::{
    CsvSource, DataSource, ExperimentConfig, MethodTraining, Normalization, Preset, Sizes, Sweep, SweepAxis,
};
pub use report::{
    emit_plot_data, read_report, summarize, write_long_report, write_report, CheckpointChoice, ReportRecord,
    ReportRow, SummaryRow, LONG_COLUMNS, REPORT_COLUMNS,
};

use crate::conformal::{calibrate, conformity_scores, prediction_sets, ProbMatrix};
use crate::data::{load_csv, sample, Dataset, Standardizer, SyntheticConfig};
use crate::error::{Error, Result};
use crate::eval::{evaluate, EvaluationInput, EvaluationReport};
use crate::losses::LossKind;
use crate::model::{Checkpoint, Mlp, MlpSpec};
use crate::rng::{self, open_unit_vec};
use crate::train::{train, CheckpointSet, EarlyStopping};

/// Environment variable overriding the number of worker threads.
pub const WORKERS_ENV: &str = "CONFTRAIN_WORKERS";

pub fn worker_count() -> usize {
    std::env::var(WORKERS_ENV)
        .ok()
        .and_then(|s| s.trim().parse().ok())
        .filter(|&n: &usize| n > 0)
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()))
}

/// Rows of a split, as a half-open range of a generated sample or as
/// explicit indices into a loaded file.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
#[serde(untagged)]
pub enum Rows {
    Range { start: usize, end: usize },
    List(Vec<usize>),
}

impl Rows {
    pub fn to_vec(&self) -> Vec<usize> {
        match self {
            Rows::Range { start, end } => (*start..*end).collect(),
            Rows::List(v) => v.clone(),
        }
    }
}

/// Where each split of one replicate came from.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Partition {
    pub replicate: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub sweep_value: Option<f64>,
    /// Seed of the sample holding train, validation and calibration rows
    /// (synthetic data only).
    #[serde(skip_serializing_if = "Option::is_none")]
    pub pool_seed: Option<u64>,
    /// Seed of the separately drawn test sample (synthetic data only).
    #[serde(skip_serializing_if = "Option::is_none")]
    pub test_seed: Option<u64>,
    pub train: Rows,
    pub validation: Rows,
    pub calibration: Rows,
    pub test: Rows,
}

/// Standardized splits for one replicate and sweep value.
pub struct ReplicateData {
    pub train: Dataset,
    pub validation: Option<Dataset>,
    pub calibration: Dataset,
    /// Test sets keyed by covariate shift (`None` for file data).
    pub tests: Vec<(Option<f64>, Dataset)>,
    pub standardizer: Option<Standardizer>,
    /// Threshold on the first feature defining the hard stratum.
    pub hard_delta: Option<f64>,
    pub calibration_noise: Vec<f64>,
    pub test_noise: Vec<f64>,
    pub partition: Partition,
}

fn split_len(total: usize, sizes: &Sizes) -> Result<()> {
    let need = sizes.train + sizes.validation + sizes.calibration + sizes.test;
    if need > total {
        return Err(Error::Config(format!(
            "sizes need {need} rows but the data file has {total}"
        )));
    }
    Ok(())
}

fn standardize(d: &Dataset, s: Option<&Standardizer>) -> Result<Dataset> {
    let mut out = d.clone();
    if let Some(s) = s {
        out.x = s.apply(&d.x)?;
    }
    Ok(out)
}

/// Build the splits for `replicate`; `data_index` distinguishes sweep
/// values that change the data.
pub fn prepare_data(
    cfg: &ExperimentConfig,
    file_data: Option<&Dataset>,
    replicate: usize,
    data_index: u64,
    sweep_value: Option<f64>,
) -> Result<ReplicateData> {
    let data_seed = rng::derive(cfg.seed, "data", replicate as u64);
    let sz = cfg.sizes;
    let (n_tr, n_va, n_ca) = (sz.train, sz.validation, sz.calibration);
    let calibration_noise = open_unit_vec(&mut rng::stream(rng::derive(data_seed, "calibration_noise", data_index), "u"), n_ca);
    let test_noise = open_unit_vec(&mut rng::stream(rng::derive(data_seed, "test_noise", data_index), "u"), sz.test);
    let range = |start: usize, len: usize| Rows::Range { start, end: start + len };

    match &cfg.data {
        DataSource::Synthetic(syn) => {
            let pool_seed = rng::derive(data_seed, "pool", data_index);
            let test_seed = rng::derive(data_seed, "test", data_index);
            let base = SyntheticConfig { shift: 1.0, ..syn.clone() };
            let pool = sample(&base, n_tr + n_va + n_ca, pool_seed)?;
            let parts = pool.split_sizes(&[n_tr, n_va, n_ca])?;
            let [train, validation, calibration]: [Dataset; 3] = parts.try_into().expect("three parts");
            let tests = cfg
                .test_shifts
                .iter()
                .map(|&a| Ok((Some(a), sample(&base.with_shift(a), sz.test, test_seed)?)))
                .collect::<Result<Vec<_>>>()?;
            Ok(ReplicateData {
                train,
                validation: (n_va > 0).then_some(validation),
                calibration,
                tests,
                standardizer: None,
                hard_delta: Some(syn.delta),
                calibration_noise,
                test_noise,
                partition: Partition {
                    replicate,
                    sweep_value,
                    pool_seed: Some(pool_seed),
                    test_seed: Some(test_seed),
                    train: range(0, n_tr),
                    validation: range(n_tr, n_va),
                    calibration: range(n_tr + n_va, n_ca),
                    test: range(0, sz.test),
                },
            })
        }
        DataSource::Csv(src) => {
            let all = file_data.ok_or_else(|| Error::Config("file data not loaded".into()))?;
            split_len(all.len(), &sz)?;
            let mut perm: Vec<usize> = (0..all.len()).collect();
            perm.shuffle(&mut rng::stream(rng::derive(data_seed, "permutation", data_index), "shuffle"));
            let mut cuts = Vec::new();
            let mut start = 0;
            for n in [n_tr, n_va, n_ca, sz.test] {
                cuts.push(perm[start..start + n].to_vec());
                start += n;
            }
            let raw_train = all.subset(&cuts[0]);
            let standardizer = match src.normalization {
                Normalization::Zscore => Some(Standardizer::fit(&raw_train.x)?),
                Normalization::None => None,
            };
            let s = standardizer.as_ref();
            Ok(ReplicateData {
                train: standardize(&raw_train, s)?,
                validation: if n_va > 0 { Some(standardize(&all.subset(&cuts[1]), s)?) } else { None },
                calibration: standardize(&all.subset(&cuts[2]), s)?,
                tests: vec![(None, standardize(&all.subset(&cuts[3]), s)?)],
                standardizer,
                hard_delta: None,
                calibration_noise,
                test_noise,
                partition: Partition {
                    replicate,
                    sweep_value,
                    pool_seed: None,
                    test_seed: None,
                    train: Rows::List(cuts[0].clone()),
                    validation: Rows::List(cuts[1].clone()),
                    calibration: Rows::List(cuts[2].clone()),
                    test: Rows::List(cuts[3].clone()),
                },
            })
        }
    }
}

/// Named masks over `data`: `hard`/`easy` when a threshold is given, plus
/// `label_<name>` for every class.
pub fn strata(data: &Dataset, hard_delta: Option<f64>) -> Vec<(String, Vec<bool>)> {
    let mut out = Vec::new();
    if let Some(delta) = hard_delta {
        let hard: Vec<bool> = data.x.iter_rows().map(|r| r[0] <= delta).collect();
        out.push(("easy".to_string(), hard.iter().map(|h| !h).collect()));
        out.push(("hard".to_string(), hard));
    }
    for k in 0..data.num_classes {
        out.push((format!("label_{}", data.label_name(k)), data.y.iter().map(|&y| y == k).collect()));
    }
    out
}

/// Sets at level `tau` for `probs` and the report on `data`.
pub fn evaluate_at(
    probs: &ProbMatrix,
    data: &Dataset,
    noise: &[f64],
    tau: f64,
    strata: &[(String, Vec<bool>)],
) -> Result<EvaluationReport> {
    let sets = prediction_sets(probs, noise, tau)?;
    let scores = conformity_scores(probs, &data.y, noise)?;
    evaluate(&EvaluationInput {
        probs,
        labels: &data.y,
        sets: &sets,
        scores: &scores,
        strata,
    })
}

/// Per-job facts recorded in the manifest.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct JobRecord {
    pub replicate: usize,
    pub method: LossKind,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub variant: Option<usize>,
    pub train_seed: u64,
    pub accuracy_rows: usize,
    pub holdout_rows: usize,
    /// Epoch of each saved checkpoint.
    pub checkpoints: BTreeMap<String, usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

struct Job {
    replicate: usize,
    method: LossKind,
    /// Sweep value index used for training.
    variant: Option<usize>,
    /// Sweep values the trained model is reported under.
    report_values: Vec<Option<f64>>,
}

fn plan(cfg: &ExperimentConfig) -> Vec<Job> {
    let mut jobs = Vec::new();
    for replicate in 0..cfg.replicates {
        for &method in &cfg.methods {
            match &cfg.sweep {
                None => jobs.push(Job {
                    replicate,
                    method,
                    variant: None,
                    report_values: vec![None],
                }),
                Some(s) if s.axis == SweepAxis::Shift => jobs.push(Job {
                    replicate,
                    method,
                    variant: None,
                    report_values: vec![None],
                }),
                Some(s) if s.axis == SweepAxis::Lambda && !method.uses_holdout() => jobs.push(Job {
                    replicate,
                    method,
                    variant: Some(0),
                    report_values: s.values.iter().map(|&v| Some(v)).collect(),
                }),
                Some(s) => jobs.extend((0..s.values.len()).map(|i| Job {
                    replicate,
                    method,
                    variant: Some(i),
                    report_values: vec![Some(s.values[i])],
                })),
            }
        }
    }
    jobs
}

struct JobOutput {
    rows: Vec<ReportRow>,
    record: JobRecord,
    partition: Option<Partition>,
    holdout_split: Option<(Vec<usize>, Vec<usize>)>,
}

fn job_stem(job: &Job) -> String {
    match job.variant {
        Some(v) => format!("r{:03}_{}_v{v}", job.replicate, job.method),
        None => format!("r{:03}_{}", job.replicate, job.method),
    }
}

fn train_seed(cfg: &ExperimentConfig, job: &Job) -> u64 {
    rng::derive(
        rng::derive(cfg.seed, job.method.name(), job.replicate as u64),
        "variant",
        job.variant.unwrap_or(0) as u64,
    )
}

fn run_job(cfg: &ExperimentConfig, file_data: Option<&Dataset>, job: &Job) -> JobOutput {
    let seed = train_seed(cfg, job);
    let mut record = JobRecord {
        replicate: job.replicate,
        method: job.method,
        variant: job.variant,
        train_seed: seed,
        accuracy_rows: 0,
        holdout_rows: 0,
        checkpoints: BTreeMap::new(),
        error: None,
    };
    let axis = cfg.sweep.as_ref().map(|s| s.axis);
    let mut partition = None;
    let mut holdout_split = None;
    let result = (|| -> Result<Vec<ReportRow>> {
        let mut vcfg = cfg.variant(job.variant);
        if let Some(s) = cfg.sweep.as_ref().filter(|s| s.axis == SweepAxis::Shift) {
            vcfg.test_shifts = s.values.clone();
        }
        let data_index = match (axis, job.variant) {
            (Some(a), Some(v)) if a.changes_data() => v as u64,
            _ => 0,
        };
        let data_value = if axis.is_some_and(|a| a.changes_data()) { job.report_values[0] } else { None };
        let data = prepare_data(&vcfg, file_data, job.replicate, data_index, data_value)?;
        partition = Some(data.partition.clone());
        let classes = vcfg.num_classes().unwrap_or(data.train.num_classes);
        let spec = MlpSpec::new(data.train.num_features(), vcfg.hidden_widths.clone(), classes)?;
        let tcfg = vcfg.train.get(job.method);
        let trained = train(&data.train, data.validation.as_ref(), &spec, tcfg, seed)?;
        record.accuracy_rows = trained.split.0.len();
        record.holdout_rows = trained.split.1.len();
        holdout_split = Some(trained.split.clone());
        if cfg.save_checkpoints {
            if let Some(dir) = &cfg.output_dir {
                save_job_artifacts(dir, &job_stem(job), job.method, &trained, &data)?;
            }
        }
        evaluate_job(&vcfg, job, &data, &trained, &mut record)
    })();
    let rows = match result {
        Ok(rows) => rows,
        Err(e) => {
            record.error = Some(e.to_string());
            job.report_values
                .iter()
                .map(|&v| ReportRow {
                    replicate: job.replicate,
                    method: job.method,
                    sweep_axis: axis,
                    sweep_value: v,
                    shift: None,
                    checkpoint: None,
                    calibrated: true,
                    epoch: None,
                    tau_hat: None,
                    result: Err(e.to_string()),
                })
                .collect()
        }
    };
    JobOutput {
        rows,
        record,
        partition,
        holdout_split,
    }
}

fn evaluate_job(
    cfg: &ExperimentConfig,
    job: &Job,
    data: &ReplicateData,
    trained: &CheckpointSet,
    record: &mut JobRecord,
) -> Result<Vec<ReportRow>> {
    let axis = cfg.sweep.as_ref().map(|s| s.axis);
    let last_epoch = trained.log.len();
    let mut rows = Vec::new();
    for which in EarlyStopping::ALL {
        let epoch = match which {
            EarlyStopping::None => last_epoch,
            EarlyStopping::BestAccuracy => match &trained.best_accuracy {
                Some(s) => s.epoch,
                None => continue,
            },
            EarlyStopping::BestLoss => match &trained.best_loss {
                Some(s) => s.epoch,
                None => continue,
            },
        };
        record.checkpoints.insert(which.name().to_string(), epoch);
        let model = trained.select(which);
        let cal_probs = model.predict_proba(&data.calibration.x)?;
        let cal_scores = conformity_scores(&cal_probs, &data.calibration.y, &data.calibration_noise)?;
        let thr = calibrate(&cal_scores, cfg.alpha)?;
        for (shift, test) in &data.tests {
            let probs = model.predict_proba(&test.x)?;
            let masks = strata(test, data.hard_delta);
            let mut modes = vec![(true, thr.tau_hat)];
            if cfg.calibration_ablation {
                modes.push((false, 1.0 - cfg.alpha));
            }
            for (calibrated, tau) in modes {
                let report = evaluate_at(&probs, test, &data.test_noise, tau, &masks)?;
                for &value in &job.report_values {
                    let sweep_value = if axis == Some(SweepAxis::Shift) { *shift } else { value };
                    rows.push(ReportRow {
                        replicate: job.replicate,
                        method: job.method,
                        sweep_axis: axis,
                        sweep_value,
                        shift: *shift,
                        checkpoint: Some(which),
                        calibrated,
                        epoch: Some(epoch),
                        tau_hat: Some(tau),
                        result: Ok(report.clone()),
                    });
                }
            }
        }
    }
    Ok(rows)
}

fn checkpoint_for(model: &Mlp, method: LossKind, data: &ReplicateData) -> Checkpoint {
    let mut ck = Checkpoint::new(model.clone());
    ck.method = Some(method);
    ck.standardizer = data.standardizer.clone();
    ck.label_values = data.train.label_values.clone();
    ck
}

fn save_job_artifacts(dir: &Path, stem: &str, method: LossKind, trained: &CheckpointSet, data: &ReplicateData) -> Result<()> {
    let ck_dir = dir.join("checkpoints");
    let log_dir = dir.join("logs");
    for d in [&ck_dir, &log_dir] {
        fs::create_dir_all(d).map_err(|e| Error::io(d, e))?;
    }
    for which in EarlyStopping::ALL {
        let present = match which {
            EarlyStopping::None => true,
            EarlyStopping::BestAccuracy => trained.best_accuracy.is_some(),
            EarlyStopping::BestLoss => trained.best_loss.is_some(),
        };
        if present {
            checkpoint_for(trained.select(which), method, data).save(&ck_dir.join(format!("{stem}_{}.json", which.name())))?;
        }
    }
    trained.write_log(&log_dir.join(format!("{stem}.csv")))
}

/// Everything a run produced, in deterministic job order.
#[derive(Debug, Clone)]
pub struct ExperimentOutcome {
    pub rows: Vec<ReportRow>,
    pub jobs: Vec<JobRecord>,
    pub partitions: Vec<Partition>,
    /// `(replicate, method, variant) -> (I1, I2)` training index split.
    pub holdout_splits: BTreeMap<(usize, LossKind, Option<usize>), (Vec<usize>, Vec<usize>)>,
}

impl ExperimentOutcome {
    pub fn failures(&self) -> usize {
        self.jobs.iter().filter(|j| j.error.is_some()).count()
    }

    pub fn records(&self) -> Vec<ReportRecord> {
        self.rows.iter().map(ReportRow::record).collect()
    }
}

pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ExperimentOutcome> {
    run_experiment_with_progress(cfg, &|_| {})
}

/// [`run_experiment`] calling `progress` as each job finishes.
pub fn run_experiment_with_progress(
    cfg: &ExperimentConfig,
    progress: &(dyn Fn(&JobRecord) + Sync),
) -> Result<ExperimentOutcome> {
    cfg.validate()?;
    let file_data = match &cfg.data {
        DataSource::Csv(src) => Some(load_csv(&src.path, &src.label_column)?),
        DataSource::Synthetic(_) => None,
    };
    if let Some(dir) = &cfg.output_dir {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let jobs = plan(cfg);
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(worker_count())
        .build()
        .map_err(|e| Error::Config(format!("worker pool: {e}")))?;
    let outputs: Vec<JobOutput> = pool.install(|| {
        jobs.par_iter()
            .map(|job| {
                let out = run_job(cfg, file_data.as_ref(), job);
                progress(&out.record);
                out
            })
            .collect()
    });

    let mut outcome = ExperimentOutcome {
        rows: Vec::new(),
        jobs: Vec::new(),
        partitions: Vec::new(),
        holdout_splits: BTreeMap::new(),
    };
    for (job, out) in jobs.iter().zip(outputs) {
        outcome.rows.extend(out.rows);
        if let Some(p) = out.partition {
            if !outcome.partitions.contains(&p) {
                outcome.partitions.push(p);
            }
        }
        if let Some(split) = out.holdout_split {
            outcome.holdout_splits.insert((job.replicate, job.method, job.variant), split);
        }
        outcome.jobs.push(out.record);
    }
    if let Some(dir) = &cfg.output_dir {
        write_outputs(dir, cfg, &outcome)?;
    }
    Ok(outcome)
}

#[derive(Serialize)]
struct Manifest<'a> {
    tool: &'static str,
    version: &'static str,
    config: &'a ExperimentConfig,
    jobs: &'a [JobRecord],
    failures: usize,
    files: BTreeMap<&'static str, &'static str>,
}

#[derive(Serialize)]
struct SplitEntry<'a> {
    replicate: usize,
    method: LossKind,
    #[serde(skip_serializing_if = "Option::is_none")]
    variant: Option<usize>,
    accuracy_rows: &'a [usize],
    holdout_rows: &'a [usize],
}

#[derive(Serialize)]
struct Splits<'a> {
    partitions: &'a [Partition],
    training: Vec<SplitEntry<'a>>,
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Report CSVs, the manifest and the index splits.
pub fn write_outputs(dir: &Path, cfg: &ExperimentConfig, outcome: &ExperimentOutcome) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let report = dir.join("report.csv");
    let long = dir.join("report_long.csv");
    let manifest = dir.join("manifest.json");
    let splits = dir.join("splits.json");
    write_report(&report, &outcome.rows)?;
    write_long_report(&long, &outcome.rows)?;
    write_json(
        &manifest,
        &Manifest {
            tool: "conftrain",
            version: env!("CARGO_PKG_VERSION"),
            config: cfg,
            jobs: &outcome.jobs,
            failures: outcome.failures(),
            files: BTreeMap::from([
                ("report", "report.csv"),
                ("report_long", "report_long.csv"),
                ("splits", "splits.json"),
            ]),
        },
    )?;
    write_json(
        &splits,
        &Splits {
            partitions: &outcome.partitions,
            training: outcome
                .holdout_splits
                .iter()
                .map(|((r, m, v), (a, u))| SplitEntry {
                    replicate: *r,
                    method: *m,
                    variant: *v,
                    accuracy_rows: a,
                    holdout_rows: u,
                })
                .collect(),
        },
    )?;
    Ok(vec![report, long, manifest, splits])
}
