use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::{MpcConfig, MpcError};
use crate::datagen::NormStats;
use crate::model::{rollout, Coupling, LieTrotterStep, OperatorBundle};
use crate::numerics::{ExpmFrechet, Matrix};
use crate::qpsolver::{solve_box_qp, QpProblem, QpSettings, QpSolution, QpStatus};

/// Affine map between physical controls and model units, composed of the
/// dataset z-score and the bundle's instance normalization.
#[derive(Debug, Clone, PartialEq)]
pub struct ControlMap {
    pub scale: Vec<f64>,
    pub offset: Vec<f64>,
}

impl ControlMap {
    pub fn new(stats: &NormStats, bundle: &OperatorBundle) -> Self {
        let m = bundle.control_dim();
        let scale = (0..m).map(|j| bundle.control_std[j] * stats.control_std[j]).collect();
        let offset = (0..m)
            .map(|j| bundle.control_mean[j] * stats.control_std[j] + stats.control_mean[j])
            .collect();
        Self { scale, offset }
    }

    pub fn to_model(&self, raw: &[f64]) -> Vec<f64> {
        raw.iter().zip(self.scale.iter().zip(&self.offset)).map(|(r, (s, o))| (r - o) / s).collect()
    }

    pub fn to_raw(&self, u: &[f64]) -> Vec<f64> {
        u.iter().zip(self.scale.iter().zip(&self.offset)).map(|(v, (s, o))| v * s + o).collect()
    }
}

/// One horizon-length tracking problem in model units. The weights are
/// the physical weights pulled back through the normalizations, so the
/// objective equals the physical-unit cost.
#[derive(Debug, Clone)]
pub struct ScpProblem<'a> {
    pub bundle: &'a OperatorBundle,
    pub coupling: &'a Coupling,
    pub initial: Vec<f64>,
    pub horizon: usize,
    pub stage: Vec<f64>,
    pub control: Vec<f64>,
    pub terminal: Vec<f64>,
    /// Setpoint in decoded (normalized) state units.
    pub reference: Vec<f64>,
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
    /// Control applied before the horizon starts, held fixed.
    pub previous: Vec<f64>,
}

impl<'a> ScpProblem<'a> {
    pub fn new(
        bundle: &'a OperatorBundle,
        coupling: &'a Coupling,
        initial: Vec<f64>,
        cfg: &MpcConfig,
        stats: &NormStats,
        previous_raw: &[f64],
    ) -> Self {
        let map = ControlMap::new(stats, bundle);
        let pull = |w: &[f64]| w.iter().zip(&stats.state_std).map(|(q, s)| q * s * s).collect::<Vec<_>>();
        let mut lower = map.to_model(&cfg.control_lower);
        let mut upper = map.to_model(&cfg.control_upper);
        for j in 0..lower.len() {
            if lower[j] > upper[j] {
                std::mem::swap(&mut lower[j], &mut upper[j]);
            }
        }
        Self {
            bundle,
            coupling,
            initial,
            horizon: cfg.horizon,
            stage: pull(&cfg.weights.stage),
            control: cfg.weights.control.iter().zip(&map.scale).map(|(r, s)| r * s * s).collect(),
            terminal: pull(&cfg.weights.terminal),
            reference: stats.normalize_state(&cfg.reference),
            lower,
            upper,
            previous: map.to_model(previous_raw),
        }
    }

    pub fn control_dim(&self) -> usize {
        self.lower.len()
    }

    fn clamp(&self, u: &[f64]) -> Vec<f64> {
        u.iter()
            .zip(self.lower.iter().zip(&self.upper))
            .map(|(v, (l, h))| v.clamp(*l, *h))
            .collect()
    }

    fn tracking(&self, z: &[f64], w: &[f64]) -> f64 {
        let x = self.bundle.decode(z);
        x.iter().zip(&self.reference).zip(w).map(|((a, r), q)| q * (a - r).powi(2)).sum()
    }

    /// Objective of a control sequence and its latent rollout.
    pub fn objective(&self, controls: &[Vec<f64>]) -> Result<(f64, Vec<Vec<f64>>), MpcError> {
        let (zs, _) = rollout(self.bundle, self.coupling, &self.initial, controls)?;
        Ok((self.objective_of(&zs, controls), zs))
    }

    fn objective_of(&self, zs: &[Vec<f64>], controls: &[Vec<f64>]) -> f64 {
        let h = self.horizon;
        let mut j = 0.0;
        for z in zs.iter().take(h).skip(1) {
            j += self.tracking(z, &self.stage);
        }
        j += self.tracking(&zs[h], &self.terminal);
        let mut prev = &self.previous;
        for u in controls {
            j += u.iter().zip(prev).zip(&self.control).map(|((a, b), r)| r * (a - b).powi(2)).sum::<f64>();
            prev = u;
        }
        j
    }
}

/// Jacobians of the split step along a nominal trajectory.
#[derive(Debug, Clone, PartialEq)]
pub struct Linearization {
    pub a: Vec<Matrix>,
    pub b: Vec<Matrix>,
}

/// `Ã_k = E_P E_D` and `B̃_k[:, j] = T·L(P T, G_j)(E_D z̄_k + B_diag ū_k) +
/// E_P B_diag[:, j]` at each nominal pair.
pub fn linearize(
    bundle: &OperatorBundle,
    coupling: &Coupling,
    latents: &[Vec<f64>],
    controls: &[Vec<f64>],
) -> Result<Linearization, MpcError> {
    let dz = bundle.latent_dim();
    let mut a = Vec::with_capacity(controls.len());
    let mut b = Vec::with_capacity(controls.len());
    for (z, u) in latents.iter().zip(controls) {
        let step = LieTrotterStep::new(bundle, coupling, u)?;
        let ops = step.operators();
        let mut bk = ops.b;
        if !coupling.generators.is_empty() {
            let y = Matrix::col_vector(&step.diagonal_half(z, u));
            let ctx = ExpmFrechet::new(&coupling.generator(u, dz))?;
            for (j, g) in coupling.generators.iter().enumerate() {
                let dir = ctx.derivative(&g.scale(coupling.period))?.matmul(&y);
                for i in 0..dz {
                    bk[(i, j)] += dir[(i, 0)];
                }
            }
        }
        a.push(ops.a);
        b.push(bk);
    }
    Ok(Linearization { a, b })
}

/// Quadratic model of the objective change over increments `δu` (stacked
/// by stage) under the linearized dynamics, with the box intersecting the
/// control bounds and `‖δu‖∞ ≤ radius`.
pub fn condense(
    problem: &ScpProblem<'_>,
    lin: &Linearization,
    latents: &[Vec<f64>],
    controls: &[Vec<f64>],
    radius: f64,
) -> Result<QpProblem, MpcError> {
    let (h, m) = (problem.horizon, problem.control_dim());
    let dz = problem.bundle.latent_dim();
    let nv = h * m;
    if lin.a.len() != h || latents.len() != h + 1 || controls.len() != h {
        return Err(MpcError::Contract("nominal trajectory does not match the horizon".into()));
    }
    if !(radius >= 0.0) {
        return Err(MpcError::Contract(format!("trust radius {radius} is negative")));
    }
    let c = &problem.bundle.decoder;
    let mut hess = Matrix::zeros(nv, nv);
    let mut grad = vec![0.0; nv];
    let mut sens = Matrix::zeros(dz, nv);
    for k in 0..h {
        sens = lin.a[k].matmul(&sens);
        sens.set_block(0, k * m, &(&sens.block(0, k * m, dz, m) + &lin.b[k]));
        let w = if k + 1 == h { &problem.terminal } else { &problem.stage };
        if w.iter().all(|&v| v == 0.0) {
            continue;
        }
        let mk = c.matmul(&sens);
        let resid: Vec<f64> = c
            .matvec(&latents[k + 1])
            .iter()
            .zip(&problem.reference)
            .map(|(x, r)| x - r)
            .collect();
        let mut wm = mk.clone();
        for (i, wi) in w.iter().enumerate() {
            wm.row_mut(i).iter_mut().for_each(|v| *v *= 2.0 * wi);
        }
        hess.axpy(1.0, &mk.transpose().matmul(&wm));
        let wr: Vec<f64> = resid.iter().zip(w).map(|(r, wi)| 2.0 * wi * r).collect();
        for (g, v) in grad.iter_mut().zip(mk.tr_matvec(&wr)) {
            *g += v;
        }
    }
    for k in 0..h {
        for j in 0..m {
            let r = problem.control[j];
            let prev = if k == 0 { problem.previous[j] } else { controls[k - 1][j] };
            let d0 = controls[k][j] - prev;
            let i = k * m + j;
            hess[(i, i)] += 2.0 * r;
            grad[i] += 2.0 * r * d0;
            if k > 0 {
                let p = i - m;
                hess[(p, p)] += 2.0 * r;
                hess[(i, p)] -= 2.0 * r;
                hess[(p, i)] -= 2.0 * r;
                grad[p] -= 2.0 * r * d0;
            }
        }
    }
    let mut lower = vec![0.0; nv];
    let mut upper = vec![0.0; nv];
    for k in 0..h {
        for j in 0..m {
            let i = k * m + j;
            lower[i] = (problem.lower[j] - controls[k][j]).max(-radius);
            upper[i] = (problem.upper[j] - controls[k][j]).min(radius);
            if lower[i] > upper[i] {
                return Err(MpcError::Contract(format!(
                    "empty increment box at stage {k}, channel {j}: nominal outside the control bounds"
                )));
            }
        }
    }
    Ok(QpProblem::new(hess, grad, lower, upper)?)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Plan {
    /// Controls in model units.
    pub controls: Vec<Vec<f64>>,
    /// Exact rollout of `controls` under the frozen bundle.
    pub latents: Vec<Vec<f64>>,
    pub objective: f64,
    /// Objective of the nominal followed by every accepted iterate.
    pub accepted_costs: Vec<f64>,
    pub iterations: usize,
    pub accepted: usize,
    pub rejected: usize,
    pub qp_iterations: usize,
    pub qp_max_iter: usize,
    pub final_radius: f64,
    pub bundle_checksum: u64,
}

fn apply_increment(controls: &[Vec<f64>], dx: &[f64]) -> Vec<Vec<f64>> {
    let m = controls.first().map_or(0, Vec::len);
    controls
        .iter()
        .enumerate()
        .map(|(k, u)| u.iter().enumerate().map(|(j, v)| v + dx[k * m + j]).collect())
        .collect()
}

fn solve_increment(
    problem: &ScpProblem<'_>,
    latents: &[Vec<f64>],
    controls: &[Vec<f64>],
    radius: f64,
    settings: &QpSettings,
    warm: &mut Option<QpSolution>,
) -> Result<QpSolution, MpcError> {
    let lin = linearize(problem.bundle, problem.coupling, latents, controls)?;
    let qp = condense(problem, &lin, latents, controls, radius)?;
    let sol = solve_box_qp(&qp, warm.as_ref(), settings)?;
    if sol.status == QpStatus::InfeasibleBox {
        return Err(MpcError::Contract("increment box is empty".into()));
    }
    *warm = Some(sol.clone());
    Ok(sol)
}

fn base_plan(problem: &ScpProblem<'_>, nominal: &[Vec<f64>]) -> Result<Plan, MpcError> {
    if nominal.len() != problem.horizon || problem.initial.len() != problem.bundle.latent_dim() {
        return Err(MpcError::Contract("nominal controls or initial latent have the wrong size".into()));
    }
    let controls: Vec<Vec<f64>> = nominal.iter().map(|u| problem.clamp(u)).collect();
    let (objective, latents) = problem.objective(&controls)?;
    Ok(Plan {
        controls,
        latents,
        objective,
        accepted_costs: vec![objective],
        iterations: 0,
        accepted: 0,
        rejected: 0,
        qp_iterations: 0,
        qp_max_iter: 0,
        final_radius: 0.0,
        bundle_checksum: problem.bundle.checksum(),
    })
}

/// Trust-region SCP: up to `iterations` rounds of linearize, condense and
/// solve; an increment is kept only if the true objective does not rise,
/// otherwise the radius halves.
pub fn scp_solve(
    problem: &ScpProblem<'_>,
    nominal: &[Vec<f64>],
    iterations: usize,
    radius: f64,
    min_radius: f64,
    settings: &QpSettings,
    warm: &mut Option<QpSolution>,
) -> Result<Plan, MpcError> {
    let mut plan = base_plan(problem, nominal)?;
    let mut eps = radius;
    for _ in 0..iterations {
        plan.iterations += 1;
        let sol = solve_increment(problem, &plan.latents, &plan.controls, eps, settings, warm)?;
        plan.qp_iterations += sol.iterations;
        plan.qp_max_iter += usize::from(sol.status == QpStatus::MaxIter);
        let predicted = -sol.objective;
        let candidate = apply_increment(&plan.controls, &sol.x);
        let (cost, latents) = problem.objective(&candidate)?;
        if cost <= plan.objective {
            plan.controls = candidate;
            plan.latents = latents;
            plan.objective = cost;
            plan.accepted_costs.push(cost);
            plan.accepted += 1;
        } else {
            plan.rejected += 1;
            eps *= 0.5;
            if eps < min_radius {
                break;
            }
        }
        if predicted <= 1e-12 * plan.objective.abs().max(1.0) {
            break;
        }
    }
    debug_assert!(plan.accepted_costs.windows(2).all(|w| w[1] <= w[0]));
    plan.final_radius = eps;
    Ok(plan)
}

/// One condensed QP at the nominal, applied without an acceptance test.
pub fn linear_solve(
    problem: &ScpProblem<'_>,
    nominal: &[Vec<f64>],
    radius: f64,
    settings: &QpSettings,
    warm: &mut Option<QpSolution>,
) -> Result<Plan, MpcError> {
    let mut plan = base_plan(problem, nominal)?;
    let sol = solve_increment(problem, &plan.latents, &plan.controls, radius, settings, warm)?;
    let controls = apply_increment(&plan.controls, &sol.x);
    let (objective, latents) = problem.objective(&controls)?;
    plan.controls = controls;
    plan.latents = latents;
    plan.objective = objective;
    plan.accepted_costs.push(objective);
    plan.iterations = 1;
    plan.accepted = 1;
    plan.qp_iterations = sol.iterations;
    plan.qp_max_iter = usize::from(sol.status == QpStatus::MaxIter);
    plan.final_radius = radius;
    Ok(plan)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ControllerKind {
    /// Single QP at the nominal.
    Linear,
    /// Trust-region SCP with this many iterations.
    Scp(usize),
}

impl ControllerKind {
    pub fn name(self) -> String {
        match self {
            ControllerKind::Linear => "linear".into(),
            ControllerKind::Scp(n) => format!("scp{n}"),
        }
    }
}

impl fmt::Display for ControllerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.name())
    }
}

impl FromStr for ControllerKind {
    type Err = MpcError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        if s == "linear" {
            return Ok(ControllerKind::Linear);
        }
        s.strip_prefix("scp")
            .and_then(|n| n.parse().ok())
            .filter(|&n: &usize| n > 0)
            .map(ControllerKind::Scp)
            .ok_or_else(|| MpcError::Contract(format!("unknown controller `{s}` (linear or scpN)")))
    }
}

/// Receding-horizon controller state: the QP warm start and the previous
/// plan in physical units for shift-and-hold initialization.
#[derive(Debug, Clone)]
pub struct MpcController {
    pub kind: ControllerKind,
    pub config: MpcConfig,
    warm: Option<QpSolution>,
    previous_plan: Option<Vec<Vec<f64>>>,
}

impl MpcController {
    pub fn new(kind: ControllerKind, config: MpcConfig) -> Self {
        Self {
            kind,
            config,
            warm: None,
            previous_plan: None,
        }
    }

    pub fn reset(&mut self) {
        self.warm = None;
        self.previous_plan = None;
    }

    /// Plans from latent `initial`. Returns the plan and its controls in
    /// physical units.
    pub fn solve(
        &mut self,
        bundle: &OperatorBundle,
        coupling: &Coupling,
        initial: Vec<f64>,
        stats: &NormStats,
        previous_raw: &[f64],
    ) -> Result<(Plan, Vec<Vec<f64>>), MpcError> {
        let problem = ScpProblem::new(bundle, coupling, initial, &self.config, stats, previous_raw);
        let map = ControlMap::new(stats, bundle);
        let h = self.config.horizon;
        let nominal: Vec<Vec<f64>> = match &self.previous_plan {
            Some(prev) => (0..h).map(|k| map.to_model(&prev[(k + 1).min(prev.len() - 1)])).collect(),
            None => vec![map.to_model(&stats.control_mean); h],
        };
        let cfg = &self.config;
        let plan = match self.kind {
            ControllerKind::Linear => linear_solve(&problem, &nominal, cfg.trust_radius, &cfg.qp, &mut self.warm)?,
            ControllerKind::Scp(n) => {
                scp_solve(&problem, &nominal, n, cfg.trust_radius, cfg.min_radius, &cfg.qp, &mut self.warm)?
            }
        };
        let raw: Vec<Vec<f64>> = plan.controls.iter().map(|u| map.to_raw(u)).collect();
        self.previous_plan = Some(raw.clone());
        Ok((plan, raw))
    }
}
