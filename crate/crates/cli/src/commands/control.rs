use std::path::Path;

use serde::Serialize;

use bkmpc_core::model::Checkpoint;
use bkmpc_core::mpc::{control_initial_state, run_episodes, ControllerKind, EpisodeLog, EpisodeSpec, MpcConfig};
use bkmpc_core::simulators::{EpisodeMode, Preset};

use super::{load_model, parse_preset, prepare_dir};
use crate::config::HarnessConfig;
use crate::error::CliError;
use crate::output::{git_describe, mean_std, num, write_json, Provenance, TableWriter};
use crate::svg::{emit_svg, ChartStyle, Series};

/// Half-width of the plotted band in episode standard deviations.
pub const BAND_SIGMAS: f64 = 0.3;

struct Block {
    controller: ControllerKind,
    lead: usize,
    logs: Vec<Result<EpisodeLog, String>>,
}

impl Block {
    fn final_costs(&self) -> Vec<f64> {
        self.logs.iter().filter_map(|l| l.as_ref().ok()?.final_log_cost()).collect()
    }

    fn failures(&self) -> usize {
        self.logs.iter().filter(|l| l.is_err()).count()
    }
}

struct Setup {
    model: Checkpoint,
    preset: Preset,
    prov: Provenance,
}

fn setup(cfg: &HarnessConfig, ckpt: &Path, preset: &str) -> Result<Setup, CliError> {
    let preset = parse_preset(preset)?;
    let (model, _) = load_model(ckpt)?;
    if model.preset != preset {
        log::warn!("checkpoint was trained on {} and is evaluated on {preset}", model.preset);
    }
    let steps = cfg.mpc.steps;
    if steps == 0 || steps > EpisodeMode::Test.horizon() {
        return Err(CliError::Usage(format!("steps must be in 1..={}", EpisodeMode::Test.horizon())));
    }
    if cfg.mpc.episodes == 0 {
        return Err(CliError::Usage("episodes must be positive".into()));
    }
    let prov = Provenance {
        preset: preset.name().into(),
        model: model.params.config.kind.name().into(),
        seed: cfg.seed,
    };
    Ok(Setup { model, preset, prov })
}

fn run_block(cfg: &HarnessConfig, s: &Setup, controller: ControllerKind, lead: usize) -> Block {
    let sys = s.preset.config();
    let mut mcfg = MpcConfig::for_preset(s.preset);
    mcfg.trust_radius = cfg.mpc.trust_radius;
    mcfg.qp = cfg.mpc.qp;
    let specs: Vec<EpisodeSpec> = (0..cfg.mpc.episodes)
        .map(|e| EpisodeSpec {
            controller,
            lead,
            steps: cfg.mpc.steps,
            initial_state: control_initial_state(&sys, cfg.seed, e as u64),
            episode: e,
        })
        .collect();
    log::info!("{controller} lead {lead}: {} episodes of {} steps", specs.len(), cfg.mpc.steps);
    let logs = run_episodes(&s.model, &sys, &mcfg, &specs, cfg.exec())
        .into_iter()
        .map(|r| r.map_err(|e| e.to_string()))
        .collect();
    Block { controller, lead, logs }
}

struct EpisodeTables {
    steps: TableWriter,
    episodes: TableWriter,
}

impl EpisodeTables {
    fn create(out: &Path, state_dim: usize, control_dim: usize) -> Result<Self, CliError> {
        let mut cols: Vec<String> = [
            "controller",
            "lead",
            "episode",
            "step",
            "time",
            "stage_cost",
            "running_cost",
            "replanned",
            "scp_iterations",
            "qp_iterations",
            "qp_max_iter",
            "wall_seconds",
            "spectral_radius",
            "straddles",
            "bundle_checksum",
        ]
        .iter()
        .map(|s| s.to_string())
        .collect();
        cols.extend((0..control_dim).map(|i| format!("u{i}")));
        cols.extend((0..state_dim).map(|i| format!("x{i}")));
        let cols: Vec<&str> = cols.iter().map(String::as_str).collect();
        Ok(Self {
            steps: TableWriter::create(&out.join("episode_steps.csv"), "episode-steps/1", &cols)?,
            episodes: TableWriter::create(
                &out.join("episodes.csv"),
                "episodes/1",
                &[
                    "controller",
                    "lead",
                    "episode",
                    "status",
                    "termination",
                    "steps",
                    "final_log_cost",
                    "solve_calls",
                    "mean_wall_seconds",
                    "straddle_fraction",
                ],
            )?,
        })
    }

    fn write(&mut self, prov: &Provenance, b: &Block) -> Result<(), CliError> {
        let (c, d) = (b.controller.name(), b.lead.to_string());
        for (e, log) in b.logs.iter().enumerate() {
            match log {
                Ok(log) => {
                    for r in &log.records {
                        let mut row = vec![
                            c.clone(),
                            d.clone(),
                            e.to_string(),
                            r.step.to_string(),
                            num(r.time),
                            num(r.stage_cost),
                            num(r.running_cost),
                            r.replanned.to_string(),
                            r.scp_iterations.to_string(),
                            r.qp_iterations.to_string(),
                            r.qp_max_iter.to_string(),
                            num(r.wall_seconds),
                            num(r.spectral_radius),
                            r.straddles.to_string(),
                            format!("{:016x}", r.bundle_checksum),
                        ];
                        row.extend(r.control.iter().map(|&v| num(v)));
                        row.extend(r.state.iter().map(|&v| num(v)));
                        self.steps.row(prov, &row)?;
                    }
                    self.episodes.row(
                        prov,
                        &[
                            c.clone(),
                            d.clone(),
                            e.to_string(),
                            "ok".into(),
                            log.termination.to_string(),
                            log.records.len().to_string(),
                            log.final_log_cost().map(num).unwrap_or_default(),
                            log.solve_calls.to_string(),
                            num(log.mean_wall_seconds()),
                            num(log.straddle_fraction()),
                        ],
                    )?;
                }
                Err(msg) => {
                    log::warn!("{c} lead {d} episode {e} failed: {msg}");
                    self.episodes.row(
                        prov,
                        &[c.clone(), d.clone(), e.to_string(), format!("failed: {msg}"), String::new(), "0".into(), String::new(), String::new(), String::new(), String::new()],
                    )?;
                }
            }
        }
        Ok(())
    }

    fn finish(self) -> Result<(), CliError> {
        self.steps.finish()?;
        self.episodes.finish()
    }
}

#[derive(Serialize)]
struct BlockSummary {
    controller: String,
    lead: usize,
    episodes: usize,
    failed: usize,
    mean_log_cost: f64,
    std_log_cost: f64,
    final_log_costs: Vec<Option<f64>>,
    mean_wall_seconds: f64,
}

fn summarize(b: &Block) -> BlockSummary {
    let costs = b.final_costs();
    let (mean, std) = mean_std(&costs);
    let walls: Vec<f64> = b.logs.iter().filter_map(|l| l.as_ref().ok()).flat_map(|l| l.records.iter().map(|r| r.wall_seconds)).collect();
    BlockSummary {
        controller: b.controller.name(),
        lead: b.lead,
        episodes: b.logs.len(),
        failed: b.failures(),
        mean_log_cost: mean,
        std_log_cost: std,
        final_log_costs: b.logs.iter().map(|l| l.as_ref().ok().and_then(|l| l.final_log_cost())).collect(),
        mean_wall_seconds: mean_std(&walls).0,
    }
}

pub fn run_mpc(cfg: &HarnessConfig, ckpt: &Path, preset: &str, controller: &str, lead: usize, out: &Path) -> Result<(), CliError> {
    let s = setup(cfg, ckpt, preset)?;
    let controller: ControllerKind = controller.parse().map_err(|e: bkmpc_core::mpc::MpcError| CliError::Usage(e.to_string()))?;
    prepare_dir(out)?;
    let block = run_block(cfg, &s, controller, lead);
    let sys = s.preset.config();
    let mut tables = EpisodeTables::create(out, sys.state_dim(), sys.control_dim())?;
    tables.write(&s.prov, &block)?;
    tables.finish()?;
    let summary = summarize(&block);
    write_json(
        &out.join("summary.json"),
        &serde_json::json!({
            "schema": "mpc-summary/1",
            "preset": s.prov.preset,
            "model": s.prov.model,
            "seed": cfg.seed,
            "git": git_describe(),
            "steps": cfg.mpc.steps,
            "result": summary,
        }),
    )?;
    cfg.echo(&out.join("effective_config.json"))?;
    if block.failures() == block.logs.len() {
        return Err(CliError::Runtime(format!("all {} episodes failed", block.logs.len())));
    }
    log::info!("{controller} lead {lead}: mean log cost {:.4}", summary.mean_log_cost);
    Ok(())
}

/// Per-step running-average statistics over the episodes still alive at
/// that step: (step, alive, mean, std).
fn running_stats(b: &Block, steps: usize) -> Vec<(usize, usize, f64, f64)> {
    let logs: Vec<&EpisodeLog> = b.logs.iter().filter_map(|l| l.as_ref().ok()).collect();
    (0..steps)
        .filter_map(|k| {
            let vals: Vec<f64> = logs.iter().filter_map(|l| l.records.get(k).map(|r| r.running_cost)).collect();
            if vals.is_empty() {
                return None;
            }
            let (m, s) = mean_std(&vals);
            Some((k, vals.len(), m, s))
        })
        .collect()
}

pub fn lead_sweep(cfg: &HarnessConfig, ckpt: &Path, preset: &str, out: &Path) -> Result<(), CliError> {
    let s = setup(cfg, ckpt, preset)?;
    let controllers = cfg.mpc.controller_kinds()?;
    if controllers.is_empty() || cfg.mpc.leads.is_empty() {
        return Err(CliError::Usage("lead-sweep needs at least one controller and one lead".into()));
    }
    prepare_dir(out)?;
    let sys = s.preset.config();
    let mut tables = EpisodeTables::create(out, sys.state_dim(), sys.control_dim())?;
    let mut lead_table = TableWriter::create(
        &out.join("lead_table.csv"),
        "lead-table/1",
        &["controller", "lead", "episodes", "failed", "mean_log_cost", "std_log_cost"],
    )?;
    let mut wall = TableWriter::create(
        &out.join("wall_clock.csv"),
        "wall-clock/1",
        &["controller", "lead", "mean_wall_seconds_per_step", "steps"],
    )?;
    let mut running = TableWriter::create(
        &out.join("running_average.csv"),
        "running-average/1",
        &["controller", "lead", "step", "episodes", "mean", "std", "band_half_width", "band_lower", "band_upper"],
    )?;
    let mut summaries = Vec::new();
    for &controller in &controllers {
        let mut series = Vec::new();
        for &lead in &cfg.mpc.leads {
            let block = run_block(cfg, &s, controller, lead);
            tables.write(&s.prov, &block)?;
            let summary = summarize(&block);
            let (c, d) = (controller.name(), lead.to_string());
            lead_table.row(
                &s.prov,
                &[c.clone(), d.clone(), summary.episodes.to_string(), summary.failed.to_string(), num(summary.mean_log_cost), num(summary.std_log_cost)],
            )?;
            let steps: usize = block.logs.iter().filter_map(|l| l.as_ref().ok()).map(|l| l.records.len()).sum();
            wall.row(&s.prov, &[c.clone(), d.clone(), num(summary.mean_wall_seconds), steps.to_string()])?;
            let stats = running_stats(&block, cfg.mpc.steps);
            for &(k, alive, m, sd) in &stats {
                let hw = BAND_SIGMAS * sd;
                running.row(
                    &s.prov,
                    &[c.clone(), d.clone(), k.to_string(), alive.to_string(), num(m), num(sd), num(hw), num(m - hw), num(m + hw)],
                )?;
            }
            series.push(Series {
                label: format!("d = {lead}"),
                points: stats.iter().map(|&(k, _, m, _)| (k as f64, m)).collect(),
                band: Some(stats.iter().map(|&(_, _, m, sd)| (m - BAND_SIGMAS * sd, m + BAND_SIGMAS * sd)).collect()),
            });
            summaries.push(summary);
        }
        let style = ChartStyle {
            title: format!("{} {} ({})", s.prov.preset, controller.name(), s.prov.model),
            x_label: "step".into(),
            y_label: "running-average cost".into(),
            log_y: true,
        };
        emit_svg(&out.join(format!("running_average_{}.svg", controller.name())), &series, &style)?;
    }
    tables.finish()?;
    lead_table.finish()?;
    wall.finish()?;
    running.finish()?;
    write_json(
        &out.join("summary.json"),
        &serde_json::json!({
            "schema": "lead-sweep-summary/1",
            "preset": s.prov.preset,
            "model": s.prov.model,
            "seed": cfg.seed,
            "git": git_describe(),
            "steps": cfg.mpc.steps,
            "blocks": summaries,
        }),
    )?;
    cfg.echo(&out.join("effective_config.json"))?;
    Ok(())
}
