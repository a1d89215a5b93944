use std::collections::VecDeque;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{stability_diagnostics, ControlMap, ControllerKind, MpcConfig, MpcController, MpcError};
use crate::datagen::sample_initial_state;
use crate::model::{discretize, encode, encode_rows, generate_operators, Checkpoint, Coupling, ModelKind};
use crate::numerics::Matrix;
use crate::simulators::{EpisodeMode, SystemConfig, Termination, TerminationReason};
use crate::Exec;

/// Stream namespace for control-episode initial states, distinct from the
/// data-generation namespaces.
const CONTROL_NAMESPACE: u64 = 2;

/// Reset state of control episode `episode` under `seed`.
pub fn control_initial_state(sys: &SystemConfig, seed: u64, episode: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream((CONTROL_NAMESPACE << 48) | episode);
    sample_initial_state(sys, &mut rng)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeSpec {
    pub controller: ControllerKind,
    /// Extra controls committed from each plan; 0 replans every step.
    pub lead: usize,
    pub steps: usize,
    pub initial_state: Vec<f64>,
    pub episode: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub time: f64,
    /// Control applied at this step, physical units, inside the box.
    pub control: Vec<f64>,
    /// State after applying the control.
    pub state: Vec<f64>,
    pub stage_cost: f64,
    /// Mean stage cost up to and including this step.
    pub running_cost: f64,
    /// A new plan was computed at this step.
    pub replanned: bool,
    pub scp_iterations: usize,
    pub qp_iterations: usize,
    pub qp_max_iter: usize,
    pub wall_seconds: f64,
    pub spectral_radius: f64,
    pub straddles: bool,
    pub bundle_checksum: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeLog {
    pub controller: ControllerKind,
    pub lead: usize,
    pub episode: usize,
    pub records: Vec<StepRecord>,
    pub termination: TerminationReason,
    pub solve_calls: usize,
    /// Accepted-iterate objectives of every solve, in order.
    pub solve_costs: Vec<Vec<f64>>,
}

impl EpisodeLog {
    /// `log₁₀` of the running-average cost at the last recorded step.
    pub fn final_log_cost(&self) -> Option<f64> {
        self.records.last().map(|r| r.running_cost.log10())
    }

    pub fn straddle_fraction(&self) -> f64 {
        if self.records.is_empty() {
            return 0.0;
        }
        self.records.iter().filter(|r| r.straddles).count() as f64 / self.records.len() as f64
    }

    pub fn mean_wall_seconds(&self) -> f64 {
        if self.records.is_empty() {
            return 0.0;
        }
        self.records.iter().map(|r| r.wall_seconds).sum::<f64>() / self.records.len() as f64
    }
}

fn stage_cost(cfg: &MpcConfig, x: &[f64], du: &[f64]) -> f64 {
    let track: f64 = x
        .iter()
        .zip(&cfg.reference)
        .zip(&cfg.weights.stage)
        .map(|((a, r), q)| q * (a - r).powi(2))
        .sum();
    track + du.iter().zip(&cfg.weights.control).map(|(d, r)| r * d * d).sum::<f64>()
}

/// Runs one closed-loop episode. The lookback buffer starts as the reset
/// state repeated with the dataset-mean control. Whenever the commit queue
/// is empty the bundle is regenerated from the buffer, a plan is solved and
/// its first `lead + 1` controls are queued; queued controls are applied
/// without re-evaluating the backbone.
pub fn run_episode(
    model: &Checkpoint,
    sys: &SystemConfig,
    cfg: &MpcConfig,
    spec: &EpisodeSpec,
) -> Result<EpisodeLog, MpcError> {
    let params = &model.params;
    let stats = &model.stats;
    let mc = params.config;
    if spec.lead + 1 > cfg.horizon {
        return Err(MpcError::Contract(format!("lead {} exceeds the horizon {}", spec.lead, cfg.horizon)));
    }
    if sys.state_dim() != mc.state_dim || sys.control_dim() != mc.control_dim {
        return Err(MpcError::Contract("checkpoint does not match the simulator dimensions".into()));
    }
    let coupling = match mc.kind {
        ModelKind::Linear => Coupling::none(),
        ModelKind::Bilinear => Coupling::from_params(params),
    };
    let mut controller = MpcController::new(spec.controller, cfg.clone());
    let lookback = mc.lookback;
    let mut state = spec.initial_state.clone();
    let mut history: VecDeque<(Vec<f64>, Vec<f64>)> =
        std::iter::repeat_n((stats.normalize_state(&state), vec![0.0; mc.control_dim]), lookback).collect();
    let mut previous = stats.control_mean.clone();
    let mut queue: VecDeque<Vec<f64>> = VecDeque::new();
    let mut active: Option<(crate::model::OperatorBundle, ControlMap)> = None;
    let mut log = EpisodeLog {
        controller: spec.controller,
        lead: spec.lead,
        episode: spec.episode,
        records: Vec::with_capacity(spec.steps),
        termination: TerminationReason::Horizon,
        solve_calls: 0,
        solve_costs: Vec::new(),
    };
    let mut t = 0.0;
    let mut total_cost = 0.0;
    for step in 0..spec.steps {
        let start = Instant::now();
        let mut record_plan = (false, 0, 0, 0);
        if queue.is_empty() {
            let xs = Matrix::from_vec(
                lookback,
                mc.state_dim,
                history.iter().flat_map(|(x, _)| x.iter().copied()).collect(),
            )
            .expect("sized");
            let us = Matrix::from_vec(
                lookback,
                mc.control_dim,
                history.iter().flat_map(|(_, u)| u.iter().copied()).collect(),
            )
            .expect("sized");
            let bundle = generate_operators(params, &encode_rows(params, &xs), &us)?;
            let z0 = encode(params, &stats.normalize_state(&state));
            let (plan, raw) = controller.solve(&bundle, &coupling, z0, stats, &previous)?;
            queue.extend(raw.into_iter().take(spec.lead + 1));
            log.solve_calls += 1;
            log.solve_costs.push(plan.accepted_costs.clone());
            record_plan = (true, plan.iterations, plan.qp_iterations, plan.qp_max_iter);
            let map = ControlMap::new(stats, &bundle);
            active = Some((bundle, map));
        }
        let (bundle, map) = active.as_ref().expect("planned");
        let u = sys.clip_control(&queue.pop_front().expect("non-empty queue"));
        let diag = discretize(bundle, &coupling, &map.to_model(&u))
            .map_err(MpcError::from)
            .and_then(|d| stability_diagnostics(&d.a))
            .unwrap_or(super::StabilityDiagnostics {
                spectral_radius: f64::NAN,
                straddles: false,
            });
        let (next, t_next) = sys.step_euler(&state, &u, t)?;
        history.pop_front();
        history.push_back((stats.normalize_state(&state), stats.normalize_control(&u)));
        let du: Vec<f64> = u.iter().zip(&previous).map(|(a, b)| a - b).collect();
        let cost = stage_cost(cfg, &next, &du);
        total_cost += cost;
        log.records.push(StepRecord {
            step,
            time: t,
            control: u.clone(),
            state: next.clone(),
            stage_cost: cost,
            running_cost: total_cost / (step + 1) as f64,
            replanned: record_plan.0,
            scp_iterations: record_plan.1,
            qp_iterations: record_plan.2,
            qp_max_iter: record_plan.3,
            wall_seconds: start.elapsed().as_secs_f64(),
            spectral_radius: diag.spectral_radius,
            straddles: diag.straddles,
            bundle_checksum: bundle.checksum(),
        });
        previous = u;
        state = next;
        t = t_next;
        if let Termination::Terminate(reason) = sys.check_termination(&state, step + 1, EpisodeMode::Test) {
            if reason != TerminationReason::Horizon {
                log.termination = reason;
                break;
            }
        }
    }
    Ok(log)
}

/// Runs independent episodes through `exec`, in spec order.
pub fn run_episodes(
    model: &Checkpoint,
    sys: &SystemConfig,
    cfg: &MpcConfig,
    specs: &[EpisodeSpec],
    exec: Exec,
) -> Vec<Result<EpisodeLog, MpcError>> {
    exec.map(specs, |s| run_episode(model, sys, cfg, s))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen::NormStats;
    use crate::model::{ModelConfig, ModelParams};
    use crate::simulators::Preset;

    fn random_model(preset: Preset, kind: ModelKind) -> Checkpoint {
        let sys = preset.config();
        let (n, m) = (sys.state_dim(), sys.control_dim());
        let stats = if preset.is_cartpole() {
            NormStats {
                state_mean: vec![0.0; n],
                state_std: vec![2.0, 1.0, 0.1, 0.5],
                control_mean: vec![0.0],
                control_std: vec![11.5],
            }
        } else {
            NormStats {
                state_mean: sys.reference_state(),
                state_std: vec![0.05, 0.05, 10.0, 0.05, 0.05, 10.0, 0.02, 0.05, 10.0],
                control_mean: sys.nominal_control(),
                control_std: vec![5e5; m],
            }
        };
        Checkpoint {
            preset,
            params: ModelParams::init(ModelConfig::for_preset(preset, kind), 1).unwrap(),
            stats,
        }
    }

    fn spec(controller: ControllerKind, lead: usize, steps: usize, sys: &SystemConfig) -> EpisodeSpec {
        EpisodeSpec {
            controller,
            lead,
            steps,
            initial_state: control_initial_state(sys, 1, 0),
            episode: 0,
        }
    }

    #[test]
    fn lead_time_controls_solver_calls() {
        let preset = Preset::CartpoleTi;
        let model = random_model(preset, ModelKind::Linear);
        let sys = preset.config();
        let cfg = MpcConfig::for_preset(preset);
        for d in [0, 1, 3] {
            let log = run_episode(&model, &sys, &cfg, &spec(ControllerKind::Linear, d, 40, &sys)).unwrap();
            let n = log.records.len();
            assert_eq!(log.solve_calls, n.div_ceil(d + 1), "lead {d}");
            for window in log.records.chunks(d + 1) {
                assert!(window.iter().all(|r| r.bundle_checksum == window[0].bundle_checksum));
                assert!(window[0].replanned && window[1..].iter().all(|r| !r.replanned));
            }
        }
    }

    #[test]
    fn applied_controls_stay_in_the_box() {
        let preset = Preset::RscpTv;
        let model = random_model(preset, ModelKind::Bilinear);
        let sys = preset.config();
        let cfg = MpcConfig::for_preset(preset);
        let log = run_episode(&model, &sys, &cfg, &spec(ControllerKind::Scp(2), 0, 5, &sys)).unwrap();
        let (lb, ub) = sys.control_bounds();
        for r in &log.records {
            for j in 0..3 {
                assert!(r.control[j] >= lb[j] && r.control[j] <= ub[j]);
            }
            assert!(r.running_cost.is_finite());
        }
        assert!(log.solve_costs.iter().all(|c| c.windows(2).all(|w| w[1] <= w[0])));
    }

    #[test]
    fn episodes_are_reproducible_across_modes() {
        let preset = Preset::CartpoleTv;
        let model = random_model(preset, ModelKind::Bilinear);
        let sys = preset.config();
        let cfg = MpcConfig::for_preset(preset);
        let specs: Vec<EpisodeSpec> = (0..3)
            .map(|e| EpisodeSpec {
                episode: e,
                initial_state: control_initial_state(&sys, 5, e as u64),
                ..spec(ControllerKind::Scp(1), 1, 10, &sys)
            })
            .collect();
        let strip = |logs: Vec<Result<EpisodeLog, MpcError>>| {
            logs.into_iter()
                .map(|l| l.unwrap().records.into_iter().map(|r| (r.control, r.state)).collect::<Vec<_>>())
                .collect::<Vec<_>>()
        };
        let a = strip(run_episodes(&model, &sys, &cfg, &specs, Exec::Sequential));
        let b = strip(run_episodes(&model, &sys, &cfg, &specs, Exec::default()));
        assert_eq!(a, b);
    }

    #[test]
    fn oversized_lead_is_rejected() {
        let preset = Preset::CartpoleTi;
        let model = random_model(preset, ModelKind::Linear);
        let sys = preset.config();
        let cfg = MpcConfig::for_preset(preset);
        assert!(run_episode(&model, &sys, &cfg, &spec(ControllerKind::Linear, 30, 5, &sys)).is_err());
    }
}
