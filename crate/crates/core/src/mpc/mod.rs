//! Receding-horizon control on the learned model: exact linearization of
//! the split step, condensation to a box QP over control increments,
//! trust-region sequential convex programming, and an executor that can
//! commit to several controls from one plan.

mod episode;
mod scp;

pub use episode::{control_initial_state, run_episode, run_episodes, EpisodeLog, EpisodeSpec, StepRecord};
pub use scp::{
    condense, linear_solve, linearize, scp_solve, ControlMap, ControllerKind, Linearization, MpcController, Plan,
    ScpProblem,
};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::ModelError;
use crate::numerics::{eig_moduli, Matrix};
use crate::qpsolver::{QpError, QpSettings};
use crate::simulators::{Preset, SimError};

#[derive(Debug, Error)]
pub enum MpcError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Qp(#[from] QpError),
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error("contract violation: {0}")]
    Contract(String),
}

impl From<crate::NumericsError> for MpcError {
    fn from(e: crate::NumericsError) -> Self {
        MpcError::Model(ModelError::Numerics(e))
    }
}

/// Diagonal tracking weights in physical units.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CostWeights {
    pub stage: Vec<f64>,
    /// Weight on the change of each control channel between steps.
    pub control: Vec<f64>,
    pub terminal: Vec<f64>,
}

impl CostWeights {
    pub fn for_preset(preset: Preset) -> Self {
        if preset.is_cartpole() {
            Self {
                stage: vec![1.0, 0.01, 100.0, 0.01],
                control: vec![0.5],
                terminal: vec![5000.0, 0.0, 0.0, 0.0],
            }
        } else {
            let q = vec![1e4, 1e4, 1.0, 1e4, 1e4, 1.0, 1e4, 1e4, 1.0];
            Self {
                stage: q.clone(),
                control: vec![5e-12; 3],
                terminal: q,
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MpcConfig {
    pub horizon: usize,
    pub weights: CostWeights,
    /// Setpoint in physical units.
    pub reference: Vec<f64>,
    pub control_lower: Vec<f64>,
    pub control_upper: Vec<f64>,
    /// Initial trust-region radius in model control units.
    pub trust_radius: f64,
    /// Solves stop once rejections shrink the radius below this.
    pub min_radius: f64,
    pub qp: QpSettings,
}

impl MpcConfig {
    pub fn for_preset(preset: Preset) -> Self {
        let sys = preset.config();
        let (control_lower, control_upper) = sys.control_bounds();
        Self {
            horizon: 30,
            weights: CostWeights::for_preset(preset),
            reference: sys.reference_state(),
            control_lower,
            control_upper,
            trust_radius: 1.0,
            min_radius: 1e-9,
            qp: QpSettings::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StabilityDiagnostics {
    pub spectral_radius: f64,
    /// The Gershgorin disks do not certify stability: some disk reaches the
    /// unit circle while another lies inside it or the matrix is in fact
    /// stable.
    pub straddles: bool,
}

pub fn stability_diagnostics(a: &Matrix) -> Result<StabilityDiagnostics, MpcError> {
    let spectral_radius = eig_moduli(a)?.first().copied().unwrap_or(0.0);
    let reach: Vec<f64> = (0..a.rows()).map(|i| a.row(i).iter().map(|v| v.abs()).sum()).collect();
    let outside = reach.iter().any(|&r| r >= 1.0);
    let inside = reach.iter().any(|&r| r < 1.0);
    Ok(StabilityDiagnostics {
        spectral_radius,
        straddles: outside && (inside || spectral_radius < 1.0),
    })
}
