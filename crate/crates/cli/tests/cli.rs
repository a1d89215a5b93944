use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use bkmpc_core::datagen::read_dataset;
use bkmpc_core::model::{save_checkpoint, Checkpoint, ModelConfig, ModelKind, ModelParams, TensorId};
use bkmpc_core::numerics::Matrix;
use bkmpc_core::simulators::Preset;

fn bkmpc(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_bkmpc")).args(args).env("RUST_LOG", "warn").output().unwrap()
}

fn ok(args: &[&str]) {
    let out = bkmpc(args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn read_csv(path: &Path) -> (Vec<String>, Vec<Vec<String>>) {
    let mut r = csv::Reader::from_path(path).unwrap();
    let header = r.headers().unwrap().iter().map(String::from).collect();
    let rows = r.records().map(|rec| rec.unwrap().iter().map(String::from).collect()).collect();
    (header, rows)
}

fn column(header: &[String], rows: &[Vec<String>], name: &str) -> Vec<String> {
    let i = header.iter().position(|h| h == name).unwrap_or_else(|| panic!("no column {name}"));
    rows.iter().map(|r| r[i].clone()).collect()
}

fn small_data(dir: &Path, preset: &str) -> PathBuf {
    let p = dir.join(format!("{preset}.bkds"));
    ok(&["gen-data", "--preset", preset, "--out", s(&p), "--train-windows", "150", "--test-windows", "40", "--seed", "3"]);
    p
}

/// Random-init checkpoint on the dataset's statistics, with a visible coupling.
fn random_checkpoint(dir: &Path, data: &Path, preset: Preset, kind: ModelKind) -> PathBuf {
    let stats = read_dataset(data).unwrap().stats;
    let mut params = ModelParams::init(ModelConfig::for_preset(preset, kind), 5).unwrap();
    if kind == ModelKind::Bilinear {
        for j in 0..params.config.control_dim {
            let t = params.tensor_mut(TensorId::coupling_left(j));
            *t = Matrix::from_vec(t.rows(), t.cols(), vec![0.05; t.len()]).unwrap();
        }
    }
    let p = dir.join(format!("{preset}-{kind}.bkcp"));
    save_checkpoint(&p, &Checkpoint { preset, params, stats }, None).unwrap();
    p
}

#[test]
fn usage_errors_exit_with_one() {
    assert_eq!(bkmpc(&["no-such-command"]).status.code(), Some(1));
    assert_eq!(bkmpc(&["gen-data", "--preset", "pendulum", "--out", "/tmp/x.bkds"]).status.code(), Some(1));
    assert_eq!(bkmpc(&["--help"]).status.code(), Some(0));
}

#[test]
fn missing_checkpoint_names_the_path() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("nowhere.bkcp");
    let out = bkmpc(&["run-mpc", "--ckpt", s(&missing), "--preset", "rscp-tv", "--controller", "scp1", "--out", s(dir.path())]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("nowhere.bkcp"));
}

#[test]
fn corrupt_checkpoint_is_a_runtime_failure() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.bkcp");
    fs::write(&bad, b"not a checkpoint").unwrap();
    let out = bkmpc(&["diagnose", "--ckpt", s(&bad), "--out", s(dir.path())]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn flags_override_the_config_file_and_are_echoed() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("cfg.json");
    fs::write(&cfg, r#"{"seed": 5, "data": {"train_windows": 150, "test_windows": 40}}"#).unwrap();
    let data = dir.path().join("d.bkds");
    ok(&["gen-data", "--config", s(&cfg), "--seed", "6", "--preset", "cartpole-tv", "--out", s(&data), "--test-windows", "30"]);
    let echoed: serde_json::Value = serde_json::from_str(&fs::read_to_string(dir.path().join("d.config.json")).unwrap()).unwrap();
    assert_eq!(echoed["seed"], 6);
    assert_eq!(echoed["data"]["train_windows"], 150);
    assert_eq!(echoed["data"]["test_windows"], 30);
    let summary: serde_json::Value = serde_json::from_str(&fs::read_to_string(dir.path().join("d.summary.json")).unwrap()).unwrap();
    assert_eq!(summary["seed"], 6);
    assert_eq!(summary["test_windows"], 30);
}

#[test]
fn train_and_forecast_tables() {
    let dir = tempfile::tempdir().unwrap();
    let data = small_data(dir.path(), "cartpole-tv");
    let mut runs = Vec::new();
    for model in ["linear", "bilinear"] {
        let out = dir.path().join(model);
        ok(&["train", "--data", s(&data), "--model", model, "--preset", "cartpole-tv", "--out", s(&out), "--epochs", "3"]);
        let (header, rows) = read_csv(&out.join("train_log.csv"));
        assert_eq!(rows.len(), 3);
        assert_eq!(&header[..5], ["schema", "preset", "model", "seed", "git"]);
        assert!(column(&header, &rows, "model").iter().all(|m| m == model));
        assert!(out.join("best.bkcp").is_file() && out.join("final.bkcp").is_file());
        assert!(out.join("effective_config.json").is_file());
        runs.push(out);
    }
    let table = dir.path().join("table");
    let args = |out: &Path| {
        vec![
            "eval-forecast".to_string(),
            "--run".into(),
            s(&runs[0]).into(),
            "--run".into(),
            s(&runs[1]).into(),
            "--data".into(),
            s(&data).into(),
            "--out".into(),
            s(out).into(),
        ]
    };
    let run_eval = |out: &Path| ok(&args(out).iter().map(String::as_str).collect::<Vec<_>>());
    run_eval(&table);
    let (header, rows) = read_csv(&table.join("forecast_table.csv"));
    // models x cells x metrics
    assert_eq!(rows.len(), 2 * 2);
    assert_eq!(column(&header, &rows, "metric"), ["best", "mean_50", "best", "mean_50"]);
    assert!(column(&header, &rows, "checkpoint_mse").iter().all(|v| v.parse::<f64>().unwrap() > 0.0));
    let again = dir.path().join("again");
    run_eval(&again);
    assert_eq!(
        fs::read(table.join("forecast_table.csv")).unwrap(),
        fs::read(again.join("forecast_table.csv")).unwrap()
    );
}

#[test]
fn zero_coupling_scores_identically_as_linear_and_bilinear() {
    let dir = tempfile::tempdir().unwrap();
    let data = small_data(dir.path(), "cartpole-tv");
    let trained = dir.path().join("trained");
    ok(&["train", "--data", s(&data), "--model", "linear", "--preset", "cartpole-tv", "--out", s(&trained), "--epochs", "2"]);
    let stats = read_dataset(&data).unwrap().stats;
    let linear = ModelParams::init(ModelConfig::for_preset(Preset::CartpoleTv, ModelKind::Linear), 9).unwrap();
    let mut runs = Vec::new();
    for params in [linear.clone(), linear.with_kind(ModelKind::Bilinear)] {
        let run = dir.path().join(params.config.kind.name());
        fs::create_dir_all(&run).unwrap();
        fs::copy(trained.join("train_log.json"), run.join("train_log.json")).unwrap();
        let ck = Checkpoint {
            preset: Preset::CartpoleTv,
            params,
            stats: stats.clone(),
        };
        save_checkpoint(&run.join("best.bkcp"), &ck, None).unwrap();
        runs.push(run);
    }
    let out = dir.path().join("table");
    ok(&["eval-forecast", "--run", s(&runs[0]), "--run", s(&runs[1]), "--data", s(&data), "--out", s(&out)]);
    let (header, rows) = read_csv(&out.join("forecast_table.csv"));
    let mse: Vec<f64> = column(&header, &rows, "checkpoint_mse").iter().map(|v| v.parse().unwrap()).collect();
    assert_eq!(column(&header, &rows, "model"), ["linear", "linear", "bilinear", "bilinear"]);
    assert!((mse[0] - mse[2]).abs() <= 1e-12 * mse[0]);
}

#[test]
fn run_mpc_and_lead_sweep_agree_at_zero_lead() {
    let dir = tempfile::tempdir().unwrap();
    let data = small_data(dir.path(), "rscp-tv");
    let ckpt = random_checkpoint(dir.path(), &data, Preset::RscpTv, ModelKind::Bilinear);
    let single = dir.path().join("single");
    let common = ["--ckpt", s(&ckpt), "--preset", "rscp-tv", "--episodes", "3", "--steps", "12"];
    let mut args = vec!["run-mpc", "--controller", "scp1", "--out", s(&single)];
    args.extend(common);
    ok(&args);
    let sweep = dir.path().join("sweep");
    let mut args = vec!["lead-sweep", "--controllers", "linear,scp1", "--lead", "0,1,3", "--out", s(&sweep)];
    args.extend(common);
    ok(&args);

    let (h1, r1) = read_csv(&single.join("episodes.csv"));
    let (h2, r2) = read_csv(&sweep.join("episodes.csv"));
    let pick = |h: &[String], r: &[Vec<String>]| -> Vec<String> {
        let c = column(h, r, "controller");
        let l = column(h, r, "lead");
        let v = column(h, r, "final_log_cost");
        (0..r.len()).filter(|&i| c[i] == "scp1" && l[i] == "0").map(|i| v[i].clone()).collect()
    };
    assert_eq!(pick(&h1, &r1).len(), 3);
    assert_eq!(pick(&h1, &r1), pick(&h2, &r2));

    let (h, rows) = read_csv(&sweep.join("lead_table.csv"));
    assert_eq!(rows.len(), 2 * 3);
    assert!(column(&h, &rows, "failed").iter().all(|f| f == "0"));
    let (h, rows) = read_csv(&sweep.join("wall_clock.csv"));
    assert_eq!(rows.len(), 6);
    assert!(column(&h, &rows, "mean_wall_seconds_per_step").iter().all(|v| v.parse::<f64>().unwrap() > 0.0));

    let (h, rows) = read_csv(&sweep.join("running_average.csv"));
    let std = column(&h, &rows, "std");
    let hw = column(&h, &rows, "band_half_width");
    for (sd, w) in std.iter().zip(&hw) {
        let (sd, w): (f64, f64) = (sd.parse().unwrap(), w.parse().unwrap());
        assert!((w - 0.3 * sd).abs() <= 1e-15 * sd.max(1.0));
    }
    for c in ["linear", "scp1"] {
        let svg = fs::read_to_string(sweep.join(format!("running_average_{c}.svg"))).unwrap();
        assert_eq!(svg.matches("<polygon").count(), 3);
    }

    // solver calls follow the commitment window
    let (h, rows) = read_csv(&sweep.join("episodes.csv"));
    let leads = column(&h, &rows, "lead");
    let steps = column(&h, &rows, "steps");
    let calls = column(&h, &rows, "solve_calls");
    for i in 0..rows.len() {
        let (d, n, c): (usize, usize, usize) = (leads[i].parse().unwrap(), steps[i].parse().unwrap(), calls[i].parse().unwrap());
        assert_eq!(c, n.div_ceil(d + 1));
    }
}

#[test]
fn diagnose_reports_coupling_and_spectra() {
    let dir = tempfile::tempdir().unwrap();
    let data = small_data(dir.path(), "cartpole-tv");
    let lin = random_checkpoint(dir.path(), &data, Preset::CartpoleTv, ModelKind::Linear);
    let bil = random_checkpoint(dir.path(), &data, Preset::CartpoleTv, ModelKind::Bilinear);
    let out = dir.path().join("diag");
    ok(&["diagnose", "--ckpt", s(&lin), "--ckpt", s(&bil), "--data", s(&data), "--windows", "5", "--out", s(&out)]);
    let (h, rows) = read_csv(&out.join("diagnostics.csv"));
    assert_eq!(rows.len(), 2 * 4);
    let metric = column(&h, &rows, "metric");
    let value = column(&h, &rows, "value");
    let samples = column(&h, &rows, "samples");
    assert_eq!(metric[0], "g_norm");
    assert_eq!(value[0].parse::<f64>().unwrap(), 0.0);
    assert!(value[4].parse::<f64>().unwrap() > 0.0);
    assert_eq!(samples[1], (5 * 30).to_string());
    let frac: f64 = value[1].parse().unwrap();
    assert!((0.0..=1.0).contains(&frac));
}
