use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;

use bkmpc_core::datagen::Split;
use bkmpc_core::model::{save_checkpoint, Checkpoint, CheckpointMeta, ModelConfig, ModelKind, ModelParams};
use bkmpc_core::training::{evaluate_forecast, normalized_split, train as run_training, SelectionMetrics, TrainLog};

use super::{load_data, load_model, parse_preset, prepare_dir, require_file};
use crate::config::HarnessConfig;
use crate::error::CliError;
use crate::output::{git_describe, num, opt, write_json, Provenance, TableWriter};

pub const BEST_CHECKPOINT: &str = "best.bkcp";
pub const FINAL_CHECKPOINT: &str = "final.bkcp";
pub const TRAIN_LOG: &str = "train_log.json";

#[derive(Serialize)]
struct TrainSummary<'a> {
    schema: &'static str,
    preset: &'a str,
    model: &'a str,
    seed: u64,
    data_seed: u64,
    git: &'a str,
    epochs: usize,
    initial_train_loss: f64,
    final_train_loss: f64,
    best_epoch: Option<usize>,
    selection: Option<SelectionMetrics>,
}

pub fn train(cfg: &HarnessConfig, data_path: &Path, model: &str, preset: &str, out: &Path) -> Result<(), CliError> {
    let preset = parse_preset(preset)?;
    let kind: ModelKind = model.parse().map_err(|e: bkmpc_core::model::ModelError| CliError::Usage(e.to_string()))?;
    let data = load_data(data_path)?;
    if data.preset != preset {
        return Err(CliError::Usage(format!(
            "{} holds {} data but --preset is {preset}",
            data_path.display(),
            data.preset
        )));
    }
    prepare_dir(out)?;
    let mut tcfg = cfg.train;
    tcfg.seed = cfg.seed;
    let init = ModelParams::init(ModelConfig::for_preset(preset, kind), cfg.seed)?;
    let outcome = run_training(&data, init, &tcfg, cfg.exec(), |r| {
        log::info!(
            "epoch {:>4}  lr {:.3e}  train {:.4e}  val {:.4e}{}",
            r.epoch,
            r.learning_rate,
            r.train_loss,
            r.val_loss,
            r.test_mse.map(|t| format!("  test {t:.4e}")).unwrap_or_default()
        );
    })?;
    let log = &outcome.log;
    let meta = |params: &ModelParams, epoch: usize| CheckpointMeta {
        preset,
        kind,
        epoch,
        val_loss: log.records[epoch].val_loss,
        train_seed: cfg.seed,
        data_seed: data.seed,
        g_norm: params.g_norm(),
    };
    let best_epoch = log.best_epoch.unwrap_or(0);
    for (name, params, epoch) in [
        (BEST_CHECKPOINT, &outcome.best_params, best_epoch),
        (FINAL_CHECKPOINT, &outcome.final_params, log.records.len() - 1),
    ] {
        let ck = Checkpoint {
            preset,
            params: params.clone(),
            stats: data.stats.clone(),
        };
        save_checkpoint(&out.join(name), &ck, Some(&meta(params, epoch)))?;
    }

    let prov = Provenance {
        preset: preset.name().into(),
        model: kind.name().into(),
        seed: cfg.seed,
    };
    let mut w = TableWriter::create(
        &out.join("train_log.csv"),
        "train-log/1",
        &[
            "epoch",
            "learning_rate",
            "train_loss",
            "val_loss",
            "test_mse",
            "g_norm",
            "max_grad_norm",
            "penalty_skips",
            "wall_seconds",
        ],
    )?;
    for r in &log.records {
        w.row(
            &prov,
            &[
                r.epoch.to_string(),
                num(r.learning_rate),
                num(r.train_loss),
                num(r.val_loss),
                opt(r.test_mse),
                num(r.g_norm),
                num(r.max_grad_norm),
                r.penalty_skips.to_string(),
                num(r.wall_seconds),
            ],
        )?;
    }
    w.finish()?;
    write_json(&out.join(TRAIN_LOG), log)?;
    let summary = TrainSummary {
        schema: "train-summary/1",
        preset: preset.name(),
        model: kind.name(),
        seed: cfg.seed,
        data_seed: data.seed,
        git: git_describe(),
        epochs: log.records.len(),
        initial_train_loss: log.initial_train_loss,
        final_train_loss: log.records.last().map(|r| r.train_loss).unwrap_or(f64::NAN),
        best_epoch: log.best_epoch,
        selection: log.selection(tcfg.mean_window).ok(),
    };
    write_json(&out.join("summary.json"), &summary)?;
    let mut echoed = cfg.clone();
    echoed.train = tcfg;
    echoed.echo(&out.join("effective_config.json"))?;
    log::info!("wrote {}", out.display());
    Ok(())
}

#[derive(Serialize)]
struct ForecastRow {
    run: PathBuf,
    preset: String,
    model: String,
    seed: u64,
    best: f64,
    mean_final: f64,
    best_epoch: usize,
    partial: bool,
    checkpoint_mse: Option<f64>,
}

/// Forecast table with a `best` and a `mean_50` row per training run. When a
/// dataset is given, the best checkpoint is re-scored on its test split.
pub fn eval_forecast(cfg: &HarnessConfig, runs: &[PathBuf], data_path: Option<&Path>, out: &Path) -> Result<(), CliError> {
    if runs.is_empty() {
        return Err(CliError::Usage("eval-forecast needs at least one --run directory".into()));
    }
    for run in runs {
        require_file(&run.join(BEST_CHECKPOINT), "checkpoint")?;
        require_file(&run.join(TRAIN_LOG), "training log")?;
    }
    let data = data_path.map(load_data).transpose()?;
    let test = data.as_ref().map(|d| normalized_split(d, Split::Test));
    prepare_dir(out)?;
    let window = cfg.train.mean_window;
    let mean_label = format!("mean_{window}");
    let mut w = TableWriter::create(
        &out.join("forecast_table.csv"),
        "forecast-table/1",
        &["run", "metric", "value", "epoch", "partial", "checkpoint_mse"],
    )?;
    let mut rows = Vec::new();
    for run in runs {
        let (ck, meta) = load_model(&run.join(BEST_CHECKPOINT))?;
        let log: TrainLog = serde_json::from_str(&fs::read_to_string(run.join(TRAIN_LOG))?)?;
        let sel = log.selection(window)?;
        let checkpoint_mse = match (&data, &test) {
            (Some(d), Some(t)) if d.preset == ck.preset => Some(evaluate_forecast(&ck.params, t, cfg.exec())?),
            (Some(d), _) => {
                log::warn!("{}: checkpoint is {} but the dataset is {}; skipping re-score", run.display(), ck.preset, d.preset);
                None
            }
            _ => None,
        };
        let prov = Provenance {
            preset: ck.preset.name().into(),
            model: ck.params.config.kind.name().into(),
            seed: meta.as_ref().map(|m| m.train_seed).unwrap_or(cfg.seed),
        };
        let run_name = run.display().to_string();
        let epoch_range = format!("{}-{}", log.records.len().saturating_sub(window), log.records.len().saturating_sub(1));
        for (metric, value, epoch) in [
            ("best", sel.best, sel.best_epoch.to_string()),
            (mean_label.as_str(), sel.mean_final, epoch_range),
        ] {
            w.row(
                &prov,
                &[run_name.clone(), metric.into(), num(value), epoch, sel.partial.to_string(), opt(checkpoint_mse)],
            )?;
        }
        rows.push(ForecastRow {
            run: run.clone(),
            preset: prov.preset,
            model: prov.model,
            seed: prov.seed,
            best: sel.best,
            mean_final: sel.mean_final,
            best_epoch: sel.best_epoch,
            partial: sel.partial,
            checkpoint_mse,
        });
    }
    w.finish()?;
    write_json(
        &out.join("forecast_summary.json"),
        &serde_json::json!({ "schema": "forecast-summary/1", "git": git_describe(), "mean_window": window, "runs": rows }),
    )?;
    cfg.echo(&out.join("effective_config.json"))?;
    Ok(())
}
