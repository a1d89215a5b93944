use thiserror::Error;

use bkmpc_core::datagen::DatagenError;
use bkmpc_core::model::ModelError;
use bkmpc_core::mpc::MpcError;
use bkmpc_core::simulators::SimError;
use bkmpc_core::training::TrainError;

/// Exit code 1 for usage errors, 2 for runtime failures.
#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Runtime(String),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Runtime(_) => 2,
        }
    }
}

macro_rules! runtime_from {
    ($($t:ty),*) => {
        $(impl From<$t> for CliError {
            fn from(e: $t) -> Self {
                CliError::Runtime(e.to_string())
            }
        })*
    };
}

runtime_from!(
    std::io::Error,
    csv::Error,
    serde_json::Error,
    DatagenError,
    ModelError,
    MpcError,
    TrainError,
    SimError
);
