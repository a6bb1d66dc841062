use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::atomic::{AtomicUsize, Ordering};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use conftrain::conformal::{calibrate, conformity_scores, CalibrationThreshold};
use conftrain::data::{load_csv, sample, Dataset, Standardizer};
use conftrain::experiment::{
    emit_plot_data, evaluate_at, run_experiment_with_progress, strata, write_report, CheckpointChoice, DataSource,
    ExperimentConfig, Normalization, Preset, ReportRow,
};
use conftrain::losses::LossKind;
use conftrain::model::{Checkpoint, MlpSpec};
use conftrain::rng::{self, open_unit_vec};
use conftrain::train::{train, EarlyStopping};

#[derive(Parser)]
#[command(name = "conftrain", version, about = "Train, calibrate and evaluate conformalized classifiers")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Sample synthetic data to CSV.
    GenerateData(GenerateArgs),
    /// Train one model on a CSV file.
    Train(TrainArgs),
    /// Compute the split-conformal threshold of a checkpoint.
    Calibrate(CalibrateArgs),
    /// Score a calibrated checkpoint on a test file (one report row).
    Evaluate(EvaluateArgs),
    /// Run the replicated experiment, optionally over a sweep axis.
    #[command(visible_alias = "run")]
    Sweep(SweepArgs),
    /// Pivot a report into one line per sweep value and method.
    EmitPlotData(PlotArgs),
    /// Print the effective configuration as TOML.
    PrintConfig(ConfigArgs),
}

#[derive(Args, Clone)]
struct ConfigArgs {
    /// TOML file layered over the preset.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, default_value = "desk")]
    preset: Preset,
}

impl ConfigArgs {
    fn load(&self) -> Result<ExperimentConfig> {
        let base = self.preset.config();
        match &self.config {
            Some(path) => Ok(ExperimentConfig::load(path, &base)?),
            None => Ok(base),
        }
    }
}

#[derive(Args)]
struct GenerateArgs {
    #[command(flatten)]
    cfg: ConfigArgs,
    /// Number of samples.
    #[arg(long)]
    n: usize,
    #[arg(long)]
    seed: Option<u64>,
    /// Range of the first feature is [0, shift].
    #[arg(long, default_value_t = 1.0)]
    shift: f64,
    #[arg(long, default_value = "label")]
    label_column: String,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    cfg: ConfigArgs,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    validation: Option<PathBuf>,
    #[arg(long, default_value = "label")]
    label_column: String,
    #[arg(long, default_value = "conformal")]
    method: LossKind,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, value_enum, default_value = "zscore")]
    normalization: NormArg,
    /// Directory for checkpoints and the training log.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, clap::ValueEnum)]
enum NormArg {
    Zscore,
    None,
}

#[derive(Args)]
struct CalibrateArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value = "label")]
    label_column: String,
    #[arg(long, default_value_t = 0.1)]
    alpha: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EvaluateArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Threshold file from `calibrate`; without it sets use 1 - alpha.
    #[arg(long)]
    threshold: Option<PathBuf>,
    #[arg(long, default_value_t = 0.1)]
    alpha: f64,
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value = "label")]
    label_column: String,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Report hard/easy strata split at this value of the first feature.
    #[arg(long)]
    hard_delta: Option<f64>,
    /// Method label when the checkpoint does not record one.
    #[arg(long)]
    method: Option<LossKind>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct SweepArgs {
    #[command(flatten)]
    cfg: ConfigArgs,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    replicates: Option<usize>,
    /// Comma-separated subset of conformal, cross_entropy, focal, hybrid.
    #[arg(long, value_delimiter = ',')]
    methods: Option<Vec<LossKind>>,
    #[arg(long)]
    no_calibration_ablation: bool,
}

#[derive(Args)]
struct PlotArgs {
    #[arg(long)]
    report: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// best, final, best_accuracy or best_loss.
    #[arg(long, default_value = "best")]
    checkpoint: CheckpointChoice,
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}

fn run(cli: Cli) -> Result<ExitCode> {
    match cli.command {
        Command::GenerateData(a) => generate(a)?,
        Command::Train(a) => train_cmd(a)?,
        Command::Calibrate(a) => calibrate_cmd(a)?,
        Command::Evaluate(a) => evaluate_cmd(a)?,
        Command::Sweep(a) => return sweep(a),
        Command::EmitPlotData(a) => {
            let n = emit_plot_data(&a.report, &a.out, a.checkpoint)?;
            println!("wrote {} lines to {}", n, a.out.display());
        }
        Command::PrintConfig(a) => print!("{}", a.load()?.to_toml()?),
    }
    Ok(ExitCode::SUCCESS)
}

fn generate(a: GenerateArgs) -> Result<()> {
    let cfg = a.cfg.load()?;
    let DataSource::Synthetic(syn) = &cfg.data else {
        bail!("generate-data needs a synthetic data source");
    };
    let data = sample(&syn.with_shift(a.shift), a.n, a.seed.unwrap_or(cfg.seed))?;
    data.write_csv(&a.out, &a.label_column)?;
    println!("wrote {} samples to {}", data.len(), a.out.display());
    Ok(())
}

/// Load a file and map it into a checkpoint's feature and label space.
fn load_for(ck: &Checkpoint, path: &Path, label_column: &str) -> Result<Dataset> {
    let mut data = load_csv(path, label_column)?;
    if let Some(values) = &ck.label_values {
        data = data.relabel(values)?;
    }
    if let Some(s) = &ck.standardizer {
        data.x = s.apply(&data.x)?;
    }
    if data.num_features() != ck.model.spec().input_dim {
        bail!(
            "{} has {} features, the model expects {}",
            path.display(),
            data.num_features(),
            ck.model.spec().input_dim
        );
    }
    Ok(data)
}

fn train_cmd(a: TrainArgs) -> Result<()> {
    let cfg = a.cfg.load()?;
    let tcfg = cfg.train.get(a.method);
    let raw = load_csv(&a.data, &a.label_column)?;
    let labels = raw.label_values.clone().unwrap_or_default();
    let standardizer = match a.normalization {
        NormArg::Zscore => Some(Standardizer::fit(&raw.x)?),
        NormArg::None => None,
    };
    let mut template = Checkpoint::new(conftrain::model::Mlp::init(
        MlpSpec::new(raw.num_features(), cfg.hidden_widths.clone(), raw.num_classes)?,
        0,
    )?);
    template.standardizer = standardizer;
    template.label_values = Some(labels);
    template.method = Some(a.method);

    let mut data = raw;
    if let Some(s) = &template.standardizer {
        data.x = s.apply(&data.x)?;
    }
    let validation = a
        .validation
        .as_deref()
        .map(|p| load_for(&template, p, &a.label_column))
        .transpose()?;
    let spec = template.model.spec().clone();
    let seed = a.seed.unwrap_or(cfg.seed);
    let out = train(&data, validation.as_ref(), &spec, tcfg, seed)?;

    fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    for which in EarlyStopping::ALL {
        let present = match which {
            EarlyStopping::None => true,
            EarlyStopping::BestAccuracy => out.best_accuracy.is_some(),
            EarlyStopping::BestLoss => out.best_loss.is_some(),
        };
        if present {
            let mut ck = template.clone();
            ck.model = out.select(which).clone();
            ck.save(&a.out.join(format!("{}.json", which.name())))?;
        }
    }
    out.write_log(&a.out.join("log.csv"))?;
    let split = serde_json::json!({ "accuracy_rows": out.split.0, "holdout_rows": out.split.1, "seed": seed });
    fs::write(a.out.join("split.json"), serde_json::to_string_pretty(&split)?)?;
    let last = out.log.last().expect("at least one epoch");
    println!(
        "trained {} for {} epochs: final loss {:.4}; checkpoints in {}",
        a.method,
        last.epoch,
        last.train_loss,
        a.out.display()
    );
    Ok(())
}

fn calibrate_cmd(a: CalibrateArgs) -> Result<()> {
    let ck = Checkpoint::load(&a.checkpoint)?;
    let data = load_for(&ck, &a.data, &a.label_column)?;
    let probs = ck.model.predict_proba(&data.x)?;
    let noise = open_unit_vec(&mut rng::stream(a.seed, "calibration_noise"), data.len());
    let scores = conformity_scores(&probs, &data.y, &noise)?;
    let thr = calibrate(&scores, a.alpha)?;
    fs::write(&a.out, serde_json::to_string_pretty(&thr)?)?;
    println!("tau_hat = {} from {} samples", thr.tau_hat, thr.calibration_size);
    Ok(())
}

fn evaluate_cmd(a: EvaluateArgs) -> Result<()> {
    let ck = Checkpoint::load(&a.checkpoint)?;
    let method = match (a.method, ck.method) {
        (Some(m), _) | (None, Some(m)) => m,
        (None, None) => bail!("the checkpoint records no method; pass --method"),
    };
    let (tau, calibrated) = match &a.threshold {
        Some(p) => {
            let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            let thr: CalibrationThreshold =
                serde_json::from_str(&text).with_context(|| format!("parsing {}", p.display()))?;
            (thr.tau_hat, true)
        }
        None => (1.0 - a.alpha, false),
    };
    let data = load_for(&ck, &a.data, &a.label_column)?;
    let probs = ck.model.predict_proba(&data.x)?;
    let noise = open_unit_vec(&mut rng::stream(a.seed, "test_noise"), data.len());
    let report = evaluate_at(&probs, &data, &noise, tau, &strata(&data, a.hard_delta))?;
    println!(
        "coverage {:.4}, average size {:.4}, accuracy {:.4}",
        report.marginal_coverage, report.avg_size, report.accuracy
    );
    let row = ReportRow {
        replicate: 0,
        method,
        sweep_axis: None,
        sweep_value: None,
        shift: None,
        checkpoint: None,
        calibrated,
        epoch: None,
        tau_hat: Some(tau),
        result: Ok(report),
    };
    write_report(&a.out, &[row])?;
    Ok(())
}

fn sweep(a: SweepArgs) -> Result<ExitCode> {
    let mut cfg = a.cfg.load()?;
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    if let Some(r) = a.replicates {
        cfg.replicates = r;
    }
    if let Some(m) = a.methods {
        cfg.methods = m;
    }
    if a.no_calibration_ablation {
        cfg.calibration_ablation = false;
    }
    if let Some(out) = a.out {
        cfg.output_dir = Some(out);
    }
    let Some(dir) = cfg.output_dir.clone() else {
        bail!("no output directory: pass --out or set output_dir");
    };
    if let DataSource::Csv(src) = &cfg.data {
        if src.normalization == Normalization::None {
            eprintln!("note: features are used without standardization");
        }
    }
    cfg.validate()?;
    let done = AtomicUsize::new(0);
    let per_rep = cfg.methods.len()
        * match &cfg.sweep {
            Some(s) if s.axis.changes_data() || s.axis == conftrain::experiment::SweepAxis::Lambda => s.values.len(),
            _ => 1,
        };
    let total = cfg.replicates * per_rep;
    let outcome = run_experiment_with_progress(&cfg, &|job| {
        let k = done.fetch_add(1, Ordering::SeqCst) + 1;
        let status = job.error.as_deref().map_or("ok".to_string(), |e| format!("failed: {e}"));
        eprintln!("[{k}/~{total}] replicate {} {}: {status}", job.replicate, job.method);
    })?;
    let failures = outcome.failures();
    println!(
        "{} jobs, {} failed; reports in {}",
        outcome.jobs.len(),
        failures,
        dir.display()
    );
    Ok(if failures == 0 { ExitCode::SUCCESS } else { ExitCode::FAILURE })
}
