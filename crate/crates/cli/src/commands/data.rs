use std::fs::File;
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use serde::Serialize;

use bkmpc_core::datagen::{generate_dataset, write_dataset, write_windows_csv, NormStats, Split, WindowTargets};

use super::{parse_preset, prepare_dir};
use crate::config::HarnessConfig;
use crate::error::CliError;
use crate::output::{git_describe, write_json};

#[derive(Serialize)]
struct DataSummary<'a> {
    schema: &'static str,
    preset: &'a str,
    seed: u64,
    split_seed: u64,
    git: &'a str,
    episodes: usize,
    train_windows: usize,
    val_windows: usize,
    test_windows: usize,
    stats: &'a NormStats,
}

fn sibling(path: &Path, suffix: &str) -> PathBuf {
    let stem = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| "dataset".into());
    path.with_file_name(format!("{stem}.{suffix}"))
}

pub fn gen_data(cfg: &HarnessConfig, preset: &str, out: &Path, csv: Option<&Path>) -> Result<(), CliError> {
    let preset = parse_preset(preset)?;
    if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        prepare_dir(dir)?;
    }
    let targets = WindowTargets {
        train_pool: cfg.data.train_windows,
        test: cfg.data.test_windows,
    };
    log::info!("generating {preset} with seed {}", cfg.seed);
    let data = generate_dataset(preset, targets, cfg.seed, cfg.exec())?;
    write_dataset(&data, out)?;
    if let Some(csv) = csv {
        write_windows_csv(&data, BufWriter::new(File::create(csv)?))?;
    }
    let summary = DataSummary {
        schema: "dataset-summary/1",
        preset: preset.name(),
        seed: data.seed,
        split_seed: data.split_seed,
        git: git_describe(),
        episodes: data.episodes.len(),
        train_windows: data.count(Split::Train),
        val_windows: data.count(Split::Val),
        test_windows: data.count(Split::Test),
        stats: &data.stats,
    };
    write_json(&sibling(out, "summary.json"), &summary)?;
    cfg.echo(&sibling(out, "config.json"))?;
    log::info!(
        "wrote {} ({} / {} / {} windows)",
        out.display(),
        summary.train_windows,
        summary.val_windows,
        summary.test_windows
    );
    Ok(())
}
