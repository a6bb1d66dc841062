use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn conftrain(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_conftrain"))
        .args(args)
        .env("CONFTRAIN_WORKERS", "1")
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = conftrain(args);
    assert!(
        out.status.success(),
        "{args:?} failed\nstdout: {}\nstderr: {}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

const TINY: &str = r#"
replicates = 1
hidden_widths = [8]
save_checkpoints = false

[data]
num_features = 5

[sizes]
train = 60
validation = 30
calibration = 40
test = 50

[train.conformal]
epochs = 2
batch_size = 10

[train.cross_entropy]
epochs = 2
batch_size = 10

[train.focal]
epochs = 2
batch_size = 10

[train.hybrid]
epochs = 2
batch_size = 10
"#;

fn write_config(dir: &Path, extra: &str) -> String {
    let path = dir.join("tiny.toml");
    fs::write(&path, format!("{TINY}\n{extra}")).unwrap();
    path.to_str().unwrap().to_string()
}

fn p(dir: &Path, name: &str) -> String {
    dir.join(name).to_str().unwrap().to_string()
}

#[test]
fn generate_data_is_stable_per_seed() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "");
    let (a, b, c) = (p(dir.path(), "a.csv"), p(dir.path(), "b.csv"), p(dir.path(), "c.csv"));
    for (out, seed) in [(&a, "3"), (&b, "3"), (&c, "4")] {
        ok(&["generate-data", "--config", &cfg, "--n", "25", "--seed", seed, "--out", out]);
    }
    let bytes = |f: &str| fs::read(f).unwrap();
    assert_eq!(bytes(&a), bytes(&b));
    assert_ne!(bytes(&a), bytes(&c));
    let text = fs::read_to_string(&a).unwrap();
    assert_eq!(text.lines().next().unwrap(), "x1,x2,x3,x4,x5,label");
    assert_eq!(text.lines().count(), 26);
}

#[test]
fn train_calibrate_evaluate_pipeline() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let cfg = write_config(d, "");
    for (name, n, seed) in [("train.csv", "120", "1"), ("val.csv", "40", "2"), ("cal.csv", "80", "3"), ("test.csv", "80", "4")] {
        ok(&["generate-data", "--config", &cfg, "--n", n, "--seed", seed, "--out", &p(d, name)]);
    }
    let model_dir = p(d, "model");
    ok(&[
        "train", "--config", &cfg, "--data", &p(d, "train.csv"), "--validation", &p(d, "val.csv"),
        "--method", "conformal", "--seed", "5", "--out", &model_dir,
    ]);
    for f in ["final.json", "best_accuracy.json", "best_loss.json", "log.csv", "split.json"] {
        assert!(d.join("model").join(f).exists(), "{f}");
    }
    let ck = p(d, "model/final.json");
    let thr = p(d, "thr.json");
    let text = ok(&["calibrate", "--checkpoint", &ck, "--data", &p(d, "cal.csv"), "--alpha", "0.1", "--out", &thr]);
    assert!(text.starts_with("tau_hat = "));
    let report = p(d, "eval.csv");
    ok(&[
        "evaluate", "--checkpoint", &ck, "--threshold", &thr, "--data", &p(d, "test.csv"), "--hard-delta", "0.2",
        "--out", &report,
    ]);
    let rep = fs::read_to_string(&report).unwrap();
    let lines: Vec<&str> = rep.lines().collect();
    assert_eq!(lines.len(), 2);
    let header: Vec<&str> = lines[0].split(',').collect();
    let row: Vec<&str> = lines[1].split(',').collect();
    let get = |c: &str| row[header.iter().position(|h| *h == c).unwrap()];
    assert_eq!(get("method"), "conformal");
    assert_eq!(get("status"), "ok");
    assert_eq!(get("calibrated"), "true");
    let cov: f64 = get("marginal_coverage").parse().unwrap();
    assert!((0.0..=1.0).contains(&cov));
    assert_ne!(get("hard_coverage"), "NA");
}

#[test]
fn sweep_writes_reports_and_plot_data() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let cfg = write_config(d, "[sweep]\naxis = \"n_train\"\nvalues = [40, 60]\n");
    let out = p(d, "run");
    ok(&[
        "sweep", "--config", &cfg, "--out", &out, "--seed", "9", "--replicates", "2", "--methods",
        "cross_entropy,focal", "--no-calibration-ablation",
    ]);
    for f in ["report.csv", "report_long.csv", "manifest.json", "splits.json"] {
        assert!(d.join("run").join(f).exists(), "{f}");
    }
    let report = fs::read_to_string(d.join("run/report.csv")).unwrap();
    // 2 replicates x 2 methods x 2 sizes x 3 checkpoints, calibrated only
    assert_eq!(report.lines().count(), 1 + 24);
    assert!(report.lines().skip(1).all(|l| l.contains(",true,ok,")));
    let manifest: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(d.join("run/manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["config"]["seed"], 9);

    let plot = p(d, "plot.csv");
    ok(&["emit-plot-data", "--report", &p(d, "run/report.csv"), "--out", &plot]);
    let text = fs::read_to_string(&plot).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], "n_train,method,hard_coverage,avg_size");
    assert_eq!(lines.len(), 5);

    // `run` is an alias and reruns reproduce the report.
    let again = p(d, "run2");
    ok(&[
        "run", "--config", &cfg, "--out", &again, "--seed", "9", "--replicates", "2", "--methods",
        "cross_entropy,focal", "--no-calibration-ablation",
    ]);
    assert_eq!(fs::read(d.join("run/report.csv")).unwrap(), fs::read(d.join("run2/report.csv")).unwrap());
}

#[test]
fn malformed_config_names_the_key() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "[train.focal.loss]\nfocal_gama = 2.0\n");
    let out = conftrain(&["sweep", "--config", &cfg, "--out", &p(dir.path(), "o")]);
    assert!(!out.status.success());
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("focal_gama"), "{err}");

    let bad_method = conftrain(&["sweep", "--methods", "svm", "--out", &p(dir.path(), "o")]);
    assert!(!bad_method.status.success());
}

#[test]
fn failed_replicates_give_a_nonzero_exit() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    fs::write(d.join("tiny.csv"), "a,b,label\n1,2,0\n2,3,1\n3,4,0\n4,5,1\n").unwrap();
    let extra = format!("[data]\nsource = \"csv\"\npath = {:?}\n", p(d, "tiny.csv"));
    let text = TINY.replace("[data]\nnum_features = 5\n", "");
    fs::write(d.join("csv.toml"), format!("{text}\n{extra}")).unwrap();
    let out = conftrain(&["sweep", "--config", &p(d, "csv.toml"), "--out", &p(d, "o")]);
    assert_eq!(out.status.code(), Some(1));
    let report = fs::read_to_string(d.join("o/report.csv")).unwrap();
    assert!(report.lines().skip(1).all(|l| l.contains(",failed,")));
}

#[test]
fn print_config_round_trips() {
    let dir = tempfile::tempdir().unwrap();
    let text = ok(&["print-config", "--preset", "paper"]);
    assert!(text.contains("hidden_widths = [\n    256,") || text.contains("hidden_widths = [256, 256, 128, 64]"));
    let path = dir.path().join("paper.toml");
    fs::write(&path, &text).unwrap();
    let again = ok(&["print-config", "--config", path.to_str().unwrap()]);
    assert_eq!(text, again);
}
