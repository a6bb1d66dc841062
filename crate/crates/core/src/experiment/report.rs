use std::collections::BTreeMap;
use std::path::Path;

use serde::Serialize;

use super::config::SweepAxis;
use crate::error::{Error, Result};
use crate::eval::{fmt_metric, EvaluationReport, NA};
use crate::losses::LossKind;
use crate::train::EarlyStopping;

/// Evaluation of one checkpoint on one test set, or the failure that
/// prevented it.
#[derive(Debug, Clone, PartialEq)]
pub struct ReportRow {
    pub replicate: usize,
    pub method: LossKind,
    pub sweep_axis: Option<SweepAxis>,
    pub sweep_value: Option<f64>,
    pub shift: Option<f64>,
    pub checkpoint: Option<EarlyStopping>,
    pub calibrated: bool,
    /// Epoch the checkpoint was taken after.
    pub epoch: Option<usize>,
    pub tau_hat: Option<f64>,
    pub result: std::result::Result<EvaluationReport, String>,
}

pub const REPORT_COLUMNS: [&str; 22] = [
    "replicate",
    "method",
    "sweep_axis",
    "sweep_value",
    "shift",
    "checkpoint",
    "calibrated",
    "status",
    "epoch",
    "tau_hat",
    "marginal_coverage",
    "avg_size",
    "hard_coverage",
    "hard_size",
    "easy_coverage",
    "easy_size",
    "ks_stat",
    "cvm_stat",
    "accuracy",
    "f_score",
    "test_size",
    "error",
];

pub const LONG_COLUMNS: [&str; 10] = [
    "replicate",
    "method",
    "sweep_axis",
    "sweep_value",
    "shift",
    "checkpoint",
    "calibrated",
    "stratum",
    "metric",
    "value",
];

fn opt<T: ToString>(v: Option<T>) -> String {
    v.map_or_else(|| NA.to_string(), |x| x.to_string())
}

impl ReportRow {
    pub fn is_ok(&self) -> bool {
        self.result.is_ok()
    }

    fn key_fields(&self) -> Vec<String> {
        vec![
            self.replicate.to_string(),
            self.method.name().to_string(),
            opt(self.sweep_axis.map(SweepAxis::name)),
            opt(self.sweep_value),
            opt(self.shift),
            opt(self.checkpoint.map(EarlyStopping::name)),
            self.calibrated.to_string(),
        ]
    }

    fn wide_fields(&self) -> Vec<String> {
        let mut f = self.key_fields();
        match &self.result {
            Ok(r) => {
                let stratum = |name: &str| r.strata.get(name);
                f.push("ok".into());
                f.push(opt(self.epoch));
                f.push(opt(self.tau_hat));
                f.push(r.marginal_coverage.to_string());
                f.push(r.avg_size.to_string());
                f.push(fmt_metric(stratum("hard").and_then(|s| s.coverage)));
                f.push(fmt_metric(stratum("hard").and_then(|s| s.avg_size)));
                f.push(fmt_metric(stratum("easy").and_then(|s| s.coverage)));
                f.push(fmt_metric(stratum("easy").and_then(|s| s.avg_size)));
                f.push(r.ks_stat.to_string());
                f.push(r.cvm_stat.to_string());
                f.push(r.accuracy.to_string());
                f.push(fmt_metric(r.f_score));
                f.push(r.test_size.to_string());
                f.push(String::new());
            }
            Err(msg) => {
                f.push("failed".into());
                f.extend(std::iter::repeat_n(NA.to_string(), 13));
                f.push(msg.clone());
            }
        }
        f
    }

    fn long_records(&self) -> Vec<Vec<String>> {
        let Ok(r) = &self.result else {
            return Vec::new();
        };
        let key = self.key_fields();
        let mut out = Vec::new();
        let mut push = |stratum: &str, metric: &str, value: String| {
            let mut rec = key.clone();
            rec.extend([stratum.to_string(), metric.to_string(), value]);
            out.push(rec);
        };
        push("all", "coverage", r.marginal_coverage.to_string());
        push("all", "avg_size", r.avg_size.to_string());
        push("all", "count", r.test_size.to_string());
        push("all", "ks_stat", r.ks_stat.to_string());
        push("all", "cvm_stat", r.cvm_stat.to_string());
        push("all", "accuracy", r.accuracy.to_string());
        push("all", "f_score", fmt_metric(r.f_score));
        for (name, s) in &r.strata {
            push(name, "coverage", fmt_metric(s.coverage));
            push(name, "avg_size", fmt_metric(s.avg_size));
            push(name, "count", s.count.to_string());
        }
        out
    }

    /// Flattened view used for aggregation.
    pub fn record(&self) -> ReportRecord {
        let ok = self.result.as_ref().ok();
        let stratum = |name: &str| ok.and_then(|r| r.strata.get(name));
        ReportRecord {
            replicate: self.replicate,
            method: self.method.name().to_string(),
            sweep_axis: self.sweep_axis.map(|a| a.name().to_string()),
            sweep_value: self.sweep_value,
            shift: self.shift,
            checkpoint: self.checkpoint.map(|c| c.name().to_string()),
            calibrated: self.calibrated,
            ok: ok.is_some(),
            marginal_coverage: ok.map(|r| r.marginal_coverage),
            avg_size: ok.map(|r| r.avg_size),
            hard_coverage: stratum("hard").and_then(|s| s.coverage),
            hard_size: stratum("hard").and_then(|s| s.avg_size),
        }
    }
}

fn csv_writer(path: &Path) -> Result<csv::Writer<std::fs::File>> {
    Ok(csv::Writer::from_path(path)?)
}

/// One row per replicate, method, sweep value, shift, checkpoint and
/// calibration mode.
pub fn write_report(path: &Path, rows: &[ReportRow]) -> Result<()> {
    let mut w = csv_writer(path)?;
    w.write_record(REPORT_COLUMNS)?;
    for row in rows {
        w.write_record(row.wide_fields())?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Long format: one line per stratum and metric.
pub fn write_long_report(path: &Path, rows: &[ReportRow]) -> Result<()> {
    let mut w = csv_writer(path)?;
    w.write_record(LONG_COLUMNS)?;
    for row in rows {
        for rec in row.long_records() {
            w.write_record(rec)?;
        }
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// The subset of report columns needed to aggregate runs.
#[derive(Debug, Clone, PartialEq)]
pub struct ReportRecord {
    pub replicate: usize,
    pub method: String,
    pub sweep_axis: Option<String>,
    pub sweep_value: Option<f64>,
    pub shift: Option<f64>,
    pub checkpoint: Option<String>,
    pub calibrated: bool,
    pub ok: bool,
    pub marginal_coverage: Option<f64>,
    pub avg_size: Option<f64>,
    pub hard_coverage: Option<f64>,
    pub hard_size: Option<f64>,
}

pub fn read_report(path: &Path) -> Result<Vec<ReportRecord>> {
    let mut reader = csv::Reader::from_path(path)?;
    let header = reader.headers()?.clone();
    let col = |name: &str| {
        header.iter().position(|h| h == name).ok_or_else(|| Error::Format {
            path: path.into(),
            detail: format!("missing column {name:?}"),
        })
    };
    let idx: BTreeMap<&str, usize> = [
        "replicate",
        "method",
        "sweep_axis",
        "sweep_value",
        "shift",
        "checkpoint",
        "calibrated",
        "status",
        "marginal_coverage",
        "avg_size",
        "hard_coverage",
        "hard_size",
    ]
    .into_iter()
    .map(|n| col(n).map(|i| (n, i)))
    .collect::<Result<_>>()?;
    let mut out = Vec::new();
    for (line, rec) in reader.records().enumerate() {
        let rec = rec?;
        let bad = |what: &str| Error::Format {
            path: path.into(),
            detail: format!("row {}: bad {what}", line + 1),
        };
        let text = |n: &str| rec.get(idx[n]).unwrap_or("");
        let text_opt = |n: &str| Some(text(n)).filter(|s| *s != NA && !s.is_empty()).map(str::to_string);
        let num = |n: &str| -> Result<Option<f64>> {
            match text_opt(n) {
                None => Ok(None),
                Some(s) => s.parse().map(Some).map_err(|_| bad(n)),
            }
        };
        out.push(ReportRecord {
            replicate: text("replicate").parse().map_err(|_| bad("replicate"))?,
            method: text("method").to_string(),
            sweep_axis: text_opt("sweep_axis"),
            sweep_value: num("sweep_value")?,
            shift: num("shift")?,
            checkpoint: text_opt("checkpoint"),
            calibrated: text("calibrated").parse().map_err(|_| bad("calibrated"))?,
            ok: text("status") == "ok",
            marginal_coverage: num("marginal_coverage")?,
            avg_size: num("avg_size")?,
            hard_coverage: num("hard_coverage")?,
            hard_size: num("hard_size")?,
        });
    }
    Ok(out)
}

/// How one checkpoint per replicate and method is chosen for summaries.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CheckpointChoice {
    Fixed(EarlyStopping),
    /// The checkpoint with the highest hard-stratum coverage, earliest in
    /// final, best-accuracy, best-loss order on ties.
    BestHardCoverage,
}

impl std::str::FromStr for CheckpointChoice {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if s == "best" {
            return Ok(CheckpointChoice::BestHardCoverage);
        }
        EarlyStopping::ALL
            .into_iter()
            .find(|e| e.name() == s)
            .map(CheckpointChoice::Fixed)
            .ok_or_else(|| Error::Config(format!("unknown checkpoint {s:?}")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SummaryRow {
    pub sweep_value: Option<f64>,
    pub shift: Option<f64>,
    pub method: String,
    pub replicates: usize,
    pub marginal_coverage: f64,
    pub avg_size: f64,
    pub hard_coverage: Option<f64>,
    pub hard_size: Option<f64>,
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

fn mean_opt(v: &[Option<f64>]) -> Option<f64> {
    let vals: Option<Vec<f64>> = v.iter().copied().collect();
    vals.filter(|x| !x.is_empty()).map(|x| mean(&x))
}

fn key_bits(v: Option<f64>) -> Option<u64> {
    v.map(f64::to_bits)
}

/// Replicate means of successful calibrated (or uncalibrated) rows, one
/// checkpoint per replicate picked by `choice`.
pub fn summarize(records: &[ReportRecord], choice: CheckpointChoice, calibrated: bool) -> Vec<SummaryRow> {
    let order = |c: &Option<String>| {
        EarlyStopping::ALL
            .iter()
            .position(|e| Some(e.name()) == c.as_deref())
            .unwrap_or(usize::MAX)
    };
    // (value, shift, method, replicate) -> candidate rows
    let mut groups: BTreeMap<(Option<u64>, Option<u64>, String, usize), Vec<&ReportRecord>> = BTreeMap::new();
    for r in records.iter().filter(|r| r.ok && r.calibrated == calibrated) {
        groups
            .entry((key_bits(r.sweep_value), key_bits(r.shift), r.method.clone(), r.replicate))
            .or_default()
            .push(r);
    }
    let mut picked: BTreeMap<(Option<u64>, Option<u64>, String), Vec<&ReportRecord>> = BTreeMap::new();
    for ((value, shift, method, _), mut rows) in groups {
        rows.sort_by_key(|r| order(&r.checkpoint));
        let chosen = match choice {
            CheckpointChoice::Fixed(e) => rows.into_iter().find(|r| r.checkpoint.as_deref() == Some(e.name())),
            CheckpointChoice::BestHardCoverage => rows.into_iter().fold(None, |best: Option<&ReportRecord>, r| {
                match best {
                    Some(b) if r.hard_coverage.unwrap_or(f64::NEG_INFINITY) <= b.hard_coverage.unwrap_or(f64::NEG_INFINITY) => Some(b),
                    _ => Some(r),
                }
            }),
        };
        if let Some(r) = chosen {
            picked.entry((value, shift, method)).or_default().push(r);
        }
    }
    let mut out: Vec<SummaryRow> = picked
        .into_iter()
        .map(|((value, shift, method), rows)| SummaryRow {
            sweep_value: value.map(f64::from_bits),
            shift: shift.map(f64::from_bits),
            method,
            replicates: rows.len(),
            marginal_coverage: mean(&rows.iter().filter_map(|r| r.marginal_coverage).collect::<Vec<_>>()),
            avg_size: mean(&rows.iter().filter_map(|r| r.avg_size).collect::<Vec<_>>()),
            hard_coverage: mean_opt(&rows.iter().map(|r| r.hard_coverage).collect::<Vec<_>>()),
            hard_size: mean_opt(&rows.iter().map(|r| r.hard_size).collect::<Vec<_>>()),
        })
        .collect();
    out.sort_by(|a, b| {
        a.sweep_value
            .unwrap_or(f64::NEG_INFINITY)
            .total_cmp(&b.sweep_value.unwrap_or(f64::NEG_INFINITY))
            .then(a.shift.unwrap_or(1.0).total_cmp(&b.shift.unwrap_or(1.0)))
            .then(a.method.cmp(&b.method))
    });
    out
}

/// Pivot a report into `<axis>,method,hard_coverage,avg_size`, with the
/// x axis taken from the sweep (or the test shift when there is none).
/// Returns the number of data lines written.
pub fn emit_plot_data(report: &Path, out: &Path, choice: CheckpointChoice) -> Result<usize> {
    let records = read_report(report)?;
    let axis = records
        .iter()
        .find_map(|r| r.sweep_axis.clone())
        .unwrap_or_else(|| SweepAxis::Shift.name().to_string());
    let summary = summarize(&records, choice, true);
    let mut w = csv_writer(out)?;
    w.write_record([axis.as_str(), "method", "hard_coverage", "avg_size"])?;
    for s in &summary {
        let x = if axis == SweepAxis::Shift.name() { s.sweep_value.or(s.shift) } else { s.sweep_value };
        w.write_record([opt(x), s.method.clone(), fmt_metric(s.hard_coverage), s.avg_size.to_string()])?;
    }
    w.flush().map_err(|e| Error::io(out, e))?;
    Ok(summary.len())
}
