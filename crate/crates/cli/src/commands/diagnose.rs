use std::path::{Path, PathBuf};

use serde::Serialize;

use bkmpc_core::datagen::Split;
use bkmpc_core::model::{discretize, encode_rows, generate_operators, Checkpoint, Coupling, ModelKind, NormalizedWindow};
use bkmpc_core::mpc::stability_diagnostics;
use bkmpc_core::training::normalized_split;

use super::{load_data, load_model, prepare_dir};
use crate::config::HarnessConfig;
use crate::error::CliError;
use crate::output::{git_describe, num, write_json, Provenance, TableWriter};

#[derive(Debug, Clone, Copy, Serialize)]
struct Spectra {
    samples: usize,
    straddle_fraction: f64,
    mean_spectral_radius: f64,
    max_spectral_radius: f64,
}

/// Gershgorin and spectral statistics of the discrete state operator along
/// the forecast horizon of each window.
fn spectra(ck: &Checkpoint, windows: &[NormalizedWindow]) -> Result<Spectra, CliError> {
    let c = ck.params.config;
    let coupling = match c.kind {
        ModelKind::Linear => Coupling::none(),
        ModelKind::Bilinear => Coupling::from_params(&ck.params),
    };
    let (mut n, mut straddles, mut sum, mut max) = (0usize, 0usize, 0.0, 0.0f64);
    for w in windows {
        let xs = w.states.block(0, 0, c.lookback, c.state_dim);
        let us = w.controls.block(0, 0, c.lookback, c.control_dim);
        let bundle = generate_operators(&ck.params, &encode_rows(&ck.params, &xs), &us)?;
        for k in c.lookback..w.controls.rows() {
            let u = bundle.normalize_control(w.controls.row(k));
            let d = stability_diagnostics(&discretize(&bundle, &coupling, &u)?.a)?;
            n += 1;
            straddles += usize::from(d.straddles);
            sum += d.spectral_radius;
            max = max.max(d.spectral_radius);
        }
    }
    Ok(Spectra {
        samples: n,
        straddle_fraction: if n == 0 { f64::NAN } else { straddles as f64 / n as f64 },
        mean_spectral_radius: if n == 0 { f64::NAN } else { sum / n as f64 },
        max_spectral_radius: if n == 0 { f64::NAN } else { max },
    })
}

#[derive(Serialize)]
struct Diagnosis {
    checkpoint: PathBuf,
    preset: String,
    model: String,
    g_norm: f64,
    spectra: Option<Spectra>,
}

pub fn diagnose(cfg: &HarnessConfig, ckpts: &[PathBuf], data_path: Option<&Path>, out: &Path) -> Result<(), CliError> {
    if ckpts.is_empty() {
        return Err(CliError::Usage("diagnose needs at least one --ckpt".into()));
    }
    let models = ckpts.iter().map(|p| load_model(p)).collect::<Result<Vec<_>, _>>()?;
    let data = data_path.map(load_data).transpose()?;
    let test: Option<Vec<NormalizedWindow>> =
        data.as_ref().map(|d| normalized_split(d, Split::Test).into_iter().take(cfg.diagnose.windows).collect());
    prepare_dir(out)?;
    let mut w = TableWriter::create(&out.join("diagnostics.csv"), "diagnostics/1", &["checkpoint", "metric", "value", "samples"])?;
    let mut all = Vec::new();
    for (path, (ck, meta)) in ckpts.iter().zip(&models) {
        let prov = Provenance {
            preset: ck.preset.name().into(),
            model: ck.params.config.kind.name().into(),
            seed: meta.as_ref().map(|m| m.train_seed).unwrap_or(cfg.seed),
        };
        let name = path.display().to_string();
        let g_norm = ck.params.g_norm();
        w.row(&prov, &[name.clone(), "g_norm".into(), num(g_norm), String::new()])?;
        let spectra = match (&data, &test) {
            (Some(d), Some(t)) if d.preset == ck.preset => Some(spectra(ck, t)?),
            (Some(d), _) => {
                log::warn!("{name}: checkpoint is {} but the dataset is {}; spectra skipped", ck.preset, d.preset);
                None
            }
            _ => None,
        };
        if let Some(s) = spectra {
            for (metric, v) in [
                ("straddle_fraction", s.straddle_fraction),
                ("mean_spectral_radius", s.mean_spectral_radius),
                ("max_spectral_radius", s.max_spectral_radius),
            ] {
                w.row(&prov, &[name.clone(), metric.into(), num(v), s.samples.to_string()])?;
            }
        }
        all.push(Diagnosis {
            checkpoint: path.clone(),
            preset: prov.preset,
            model: prov.model,
            g_norm,
            spectra,
        });
    }
    w.finish()?;
    write_json(
        &out.join("diagnostics.json"),
        &serde_json::json!({ "schema": "diagnostics-summary/1", "git": git_describe(), "checkpoints": all }),
    )?;
    cfg.echo(&out.join("effective_config.json"))?;
    Ok(())
}
