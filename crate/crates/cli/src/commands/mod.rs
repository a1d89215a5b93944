mod control;
mod data;
mod diagnose;
mod train;

pub use control::{lead_sweep, run_mpc};
pub use data::gen_data;
pub use diagnose::diagnose;
pub use train::{eval_forecast, train};

use std::fs;
use std::path::Path;

use bkmpc_core::datagen::{read_dataset, Dataset};
use bkmpc_core::model::{load_checkpoint, Checkpoint, CheckpointMeta};
use bkmpc_core::simulators::Preset;

use crate::error::CliError;

pub(crate) fn parse_preset(name: &str) -> Result<Preset, CliError> {
    name.parse().map_err(|e: bkmpc_core::simulators::SimError| CliError::Usage(e.to_string()))
}

pub(crate) fn require_file(path: &Path, what: &str) -> Result<(), CliError> {
    if path.is_file() {
        Ok(())
    } else {
        Err(CliError::Usage(format!("{what} not found: {}", path.display())))
    }
}

pub(crate) fn load_data(path: &Path) -> Result<Dataset, CliError> {
    require_file(path, "dataset")?;
    read_dataset(path).map_err(|e| CliError::Runtime(format!("{}: {e}", path.display())))
}

/// Loads a checkpoint and its JSON sidecar when one exists.
pub(crate) fn load_model(path: &Path) -> Result<(Checkpoint, Option<CheckpointMeta>), CliError> {
    require_file(path, "checkpoint")?;
    let ck = load_checkpoint(path).map_err(|e| CliError::Runtime(format!("{}: {e}", path.display())))?;
    let sidecar = Checkpoint::sidecar_path(path);
    let meta = match fs::read_to_string(&sidecar) {
        Ok(text) => Some(
            serde_json::from_str(&text).map_err(|e| CliError::Runtime(format!("{}: {e}", sidecar.display())))?,
        ),
        Err(_) => None,
    };
    Ok((ck, meta))
}

pub(crate) fn prepare_dir(dir: &Path) -> Result<(), CliError> {
    fs::create_dir_all(dir).map_err(|e| CliError::Runtime(format!("cannot create {}: {e}", dir.display())))
}
