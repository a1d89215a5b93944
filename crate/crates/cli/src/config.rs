//! Harness configuration.
//!
//! A JSON file whose every field is optional:
//!
//! ```json
//! {
//!   "seed": 1,
//!   "sequential": false,
//!   "data": { "train_windows": 39900, "test_windows": 4000 },
//!   "train": { "epochs": 401, "learning_rate": 0.001, "weight_decay": 0.001,
//!              "batch_size": 256, "lr_step": 50, "lr_gamma": 0.9, "clip_norm": 1.0,
//!              "test_every": 10, "mean_window": 50 },
//!   "mpc": { "episodes": 10, "steps": 1000, "trust_radius": 1.0,
//!            "controllers": ["linear", "scp1", "scp5"], "leads": [0, 1, 3, 5],
//!            "qp": { "rho": 0.1, "eps_abs": 1e-6, "eps_rel": 1e-6, "max_iter": 4000 } },
//!   "diagnose": { "windows": 200 }
//! }
//! ```
//!
//! Command-line flags override file values. Each command writes the
//! resulting configuration next to its outputs.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use bkmpc_core::datagen::WindowTargets;
use bkmpc_core::mpc::ControllerKind;
use bkmpc_core::qpsolver::QpSettings;
use bkmpc_core::training::TrainConfig;
use bkmpc_core::Exec;

use crate::error::CliError;

pub const DEFAULT_SEED: u64 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSection {
    pub train_windows: usize,
    pub test_windows: usize,
}

impl Default for DataSection {
    fn default() -> Self {
        let t = WindowTargets::default();
        Self {
            train_windows: t.train_pool,
            test_windows: t.test,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MpcSection {
    pub episodes: usize,
    pub steps: usize,
    pub trust_radius: f64,
    pub controllers: Vec<String>,
    pub leads: Vec<usize>,
    pub qp: QpSettings,
}

impl Default for MpcSection {
    fn default() -> Self {
        Self {
            episodes: 10,
            steps: 1000,
            trust_radius: 1.0,
            controllers: vec!["linear".into(), "scp1".into(), "scp5".into()],
            leads: vec![0, 1, 3, 5],
            qp: QpSettings::default(),
        }
    }
}

impl MpcSection {
    pub fn controller_kinds(&self) -> Result<Vec<ControllerKind>, CliError> {
        self.controllers
            .iter()
            .map(|c| c.parse().map_err(|e| CliError::Usage(format!("controller `{c}`: {e}"))))
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DiagnoseSection {
    pub windows: usize,
}

impl Default for DiagnoseSection {
    fn default() -> Self {
        Self { windows: 200 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HarnessConfig {
    pub seed: u64,
    pub sequential: bool,
    pub data: DataSection,
    pub train: TrainConfig,
    pub mpc: MpcSection,
    pub diagnose: DiagnoseSection,
}

impl Default for HarnessConfig {
    fn default() -> Self {
        Self {
            seed: DEFAULT_SEED,
            sequential: false,
            data: DataSection::default(),
            train: TrainConfig::default(),
            mpc: MpcSection::default(),
            diagnose: DiagnoseSection::default(),
        }
    }
}

impl HarnessConfig {
    pub fn load(path: Option<&Path>) -> Result<Self, CliError> {
        let Some(path) = path else {
            return Ok(Self::default());
        };
        let text = fs::read_to_string(path)
            .map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", path.display())))?;
        serde_json::from_str(&text).map_err(|e| CliError::Usage(format!("invalid config {}: {e}", path.display())))
    }

    pub fn exec(&self) -> Exec {
        if self.sequential {
            Exec::Sequential
        } else {
            Exec::default()
        }
    }

    pub fn echo(&self, path: &Path) -> Result<(), CliError> {
        fs::write(path, serde_json::to_string_pretty(self)? + "\n")?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn partial_file_keeps_defaults() {
        let cfg: HarnessConfig = serde_json::from_str(r#"{"seed": 7, "train": {"epochs": 3}}"#).unwrap();
        assert_eq!(cfg.seed, 7);
        assert_eq!(cfg.train.epochs, 3);
        assert_eq!(cfg.train.batch_size, 256);
        assert_eq!(cfg.mpc.leads, vec![0, 1, 3, 5]);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(serde_json::from_str::<HarnessConfig>(r#"{"sed": 7}"#).is_err());
    }

    #[test]
    fn echo_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.json");
        let cfg = HarnessConfig::default();
        cfg.echo(&p).unwrap();
        assert_eq!(HarnessConfig::load(Some(&p)).unwrap(), cfg);
    }
}
