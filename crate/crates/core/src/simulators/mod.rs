//! Ground-truth plants, stepped by forward Euler at their sampling period.

mod cartpole;
mod rscp;

pub use cartpole::{cartpole_deriv, CartPoleParams};
pub use rscp::{rscp_deriv, RscpParams, RSCP_STATE_DIM};

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SimError {
    #[error("invalid state: {what}")]
    Domain { what: &'static str },
    #[error("expected {expected} entries, found {found}")]
    Dimension { expected: usize, found: usize },
    #[error("unknown preset `{0}` (expected cartpole-ti, cartpole-tv, rscp-ti or rscp-tv)")]
    UnknownPreset(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Preset {
    CartpoleTi,
    CartpoleTv,
    RscpTi,
    RscpTv,
}

impl Preset {
    pub const ALL: [Preset; 4] = [Preset::CartpoleTi, Preset::CartpoleTv, Preset::RscpTi, Preset::RscpTv];

    pub fn name(self) -> &'static str {
        match self {
            Preset::CartpoleTi => "cartpole-ti",
            Preset::CartpoleTv => "cartpole-tv",
            Preset::RscpTi => "rscp-ti",
            Preset::RscpTv => "rscp-tv",
        }
    }

    pub fn config(self) -> SystemConfig {
        match self {
            Preset::CartpoleTi => SystemConfig::CartPole(CartPoleParams::time_invariant()),
            Preset::CartpoleTv => SystemConfig::CartPole(CartPoleParams::time_varying()),
            Preset::RscpTi => SystemConfig::Rscp(RscpParams::time_invariant()),
            Preset::RscpTv => SystemConfig::Rscp(RscpParams::time_varying()),
        }
    }

    pub fn is_cartpole(self) -> bool {
        matches!(self, Preset::CartpoleTi | Preset::CartpoleTv)
    }
}

impl fmt::Display for Preset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Preset {
    type Err = SimError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Preset::ALL
            .into_iter()
            .find(|p| p.name() == s)
            .ok_or_else(|| SimError::UnknownPreset(s.to_string()))
    }
}

/// Which episode horizon applies.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum EpisodeMode {
    /// 20,040-step data-generation episodes.
    Training,
    /// 1,000-step test and control episodes.
    Test,
}

impl EpisodeMode {
    pub fn horizon(self) -> usize {
        match self {
            EpisodeMode::Training => 20_040,
            EpisodeMode::Test => 1_000,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum TerminationReason {
    Angle,
    Position,
    MassFraction,
    Temperature,
    NonFinite,
    Horizon,
}

impl fmt::Display for TerminationReason {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            TerminationReason::Angle => "angle",
            TerminationReason::Position => "position",
            TerminationReason::MassFraction => "mass-fraction",
            TerminationReason::Temperature => "temperature",
            TerminationReason::NonFinite => "non-finite",
            TerminationReason::Horizon => "horizon",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Termination {
    Continue,
    Terminate(TerminationReason),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum SystemConfig {
    CartPole(CartPoleParams),
    Rscp(RscpParams),
}

impl SystemConfig {
    pub fn state_dim(&self) -> usize {
        match self {
            SystemConfig::CartPole(_) => 4,
            SystemConfig::Rscp(_) => RSCP_STATE_DIM,
        }
    }

    pub fn control_dim(&self) -> usize {
        match self {
            SystemConfig::CartPole(_) => 1,
            SystemConfig::Rscp(_) => 3,
        }
    }

    /// Sampling period in the plant's time unit (s for the cart-pole,
    /// h for the reactor).
    pub fn dt(&self) -> f64 {
        match self {
            SystemConfig::CartPole(p) => p.dt,
            SystemConfig::Rscp(p) => p.dt,
        }
    }

    /// Lower and upper control bounds.
    pub fn control_bounds(&self) -> (Vec<f64>, Vec<f64>) {
        match self {
            SystemConfig::CartPole(p) => (vec![-p.force_limit], vec![p.force_limit]),
            SystemConfig::Rscp(p) => {
                let q = p.nominal_duties();
                (
                    q.iter().map(|v| v - p.duty_span).collect(),
                    q.iter().map(|v| v + p.duty_span).collect(),
                )
            }
        }
    }

    pub fn clip_control(&self, u: &[f64]) -> Vec<f64> {
        let (lb, ub) = self.control_bounds();
        u.iter().zip(lb.iter().zip(&ub)).map(|(v, (l, h))| v.clamp(*l, *h)).collect()
    }

    /// Tracking reference for control tasks.
    pub fn reference_state(&self) -> Vec<f64> {
        match self {
            SystemConfig::CartPole(_) => vec![0.0; 4],
            SystemConfig::Rscp(p) => p.nominal_state.to_vec(),
        }
    }

    /// The control that holds the reference: zero force, or the nominal
    /// duties.
    pub fn nominal_control(&self) -> Vec<f64> {
        match self {
            SystemConfig::CartPole(_) => vec![0.0],
            SystemConfig::Rscp(p) => p.nominal_duties().to_vec(),
        }
    }

    fn check_dims(&self, s: &[f64], u: &[f64]) -> Result<(), SimError> {
        if s.len() != self.state_dim() {
            return Err(SimError::Dimension {
                expected: self.state_dim(),
                found: s.len(),
            });
        }
        if u.len() != self.control_dim() {
            return Err(SimError::Dimension {
                expected: self.control_dim(),
                found: u.len(),
            });
        }
        Ok(())
    }

    /// State derivative; `u` is clipped to the control box first.
    pub fn deriv(&self, s: &[f64], u: &[f64], t: f64) -> Result<Vec<f64>, SimError> {
        self.check_dims(s, u)?;
        let u = self.clip_control(u);
        match self {
            SystemConfig::CartPole(p) => {
                let s: [f64; 4] = s.try_into().expect("checked length");
                Ok(cartpole_deriv(p, &s, u[0], t).to_vec())
            }
            SystemConfig::Rscp(p) => {
                let s: [f64; RSCP_STATE_DIM] = s.try_into().expect("checked length");
                let q: [f64; 3] = u.as_slice().try_into().expect("checked length");
                Ok(rscp_deriv(p, &s, &q, t)?.to_vec())
            }
        }
    }

    /// One forward-Euler step: `(s + Δt·f(s, u, t), t + Δt)`.
    pub fn step_euler(&self, s: &[f64], u: &[f64], t: f64) -> Result<(Vec<f64>, f64), SimError> {
        let d = self.deriv(s, u, t)?;
        let dt = self.dt();
        let next = s.iter().zip(&d).map(|(x, dx)| x + dt * dx).collect();
        Ok((next, t + dt))
    }

    /// Whether an episode continues after reaching `s` at `step_index`.
    pub fn check_termination(&self, s: &[f64], step_index: usize, mode: EpisodeMode) -> Termination {
        if s.iter().any(|v| !v.is_finite()) {
            return Termination::Terminate(TerminationReason::NonFinite);
        }
        match self {
            SystemConfig::CartPole(p) => {
                if s[2].abs() > p.max_angle {
                    return Termination::Terminate(TerminationReason::Angle);
                }
                if s[0].abs() > p.max_position {
                    return Termination::Terminate(TerminationReason::Position);
                }
            }
            SystemConfig::Rscp(p) => {
                for vessel in 0..3 {
                    let (xa, xb, temp) = (s[3 * vessel], s[3 * vessel + 1], s[3 * vessel + 2]);
                    if !(0.0..=1.0).contains(&xa) || !(0.0..=1.0).contains(&xb) {
                        return Termination::Terminate(TerminationReason::MassFraction);
                    }
                    if !(p.min_temperature..=p.max_temperature).contains(&temp) {
                        return Termination::Terminate(TerminationReason::Temperature);
                    }
                }
            }
        }
        if step_index >= mode.horizon() {
            return Termination::Terminate(TerminationReason::Horizon);
        }
        Termination::Continue
    }
}
