//! Command-line harness: dataset generation, training, forecast evaluation,
//! closed-loop control runs, lead-time sweeps and model diagnostics.

pub mod commands;
pub mod config;
pub mod error;
pub mod output;
pub mod svg;

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

pub use config::HarnessConfig;
pub use error::CliError;

#[derive(Debug, Parser)]
#[command(name = "bkmpc", version, about = "Bilinear latent-model MPC experiments")]
pub struct Cli {
    /// JSON configuration file; flags override its values.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Run every data-parallel loop on the calling thread.
    #[arg(long, global = true)]
    pub sequential: bool,
    /// Seed for every randomized step (default 1).
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Simulate a preset and write a windowed dataset.
    GenData(GenDataArgs),
    /// Train a linear or bilinear model on a dataset.
    Train(TrainArgs),
    /// Tabulate best and final-window forecast MSE of training runs.
    EvalForecast(EvalForecastArgs),
    /// Run closed-loop control episodes with one controller.
    RunMpc(RunMpcArgs),
    /// Sweep commitment windows for one or more controllers.
    LeadSweep(LeadSweepArgs),
    /// Report coupling norms and operator stability statistics.
    Diagnose(DiagnoseArgs),
}

#[derive(Debug, Args)]
pub struct GenDataArgs {
    #[arg(long)]
    pub preset: String,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub train_windows: Option<usize>,
    #[arg(long)]
    pub test_windows: Option<usize>,
    /// Also export every window as CSV.
    #[arg(long)]
    pub csv: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub data: PathBuf,
    /// `linear` or `bilinear`.
    #[arg(long)]
    pub model: String,
    #[arg(long)]
    pub preset: String,
    /// Output directory for checkpoints and logs.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub epochs: Option<usize>,
}

#[derive(Debug, Args)]
pub struct EvalForecastArgs {
    /// Training output directory; repeat for several runs.
    #[arg(long = "run", required = true)]
    pub runs: Vec<PathBuf>,
    /// Dataset whose test split re-scores each best checkpoint.
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct EpisodeArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long)]
    pub preset: String,
    #[arg(long)]
    pub episodes: Option<usize>,
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct RunMpcArgs {
    #[command(flatten)]
    pub episode: EpisodeArgs,
    /// `linear`, `scp1`, `scp5` or any `scpN`.
    #[arg(long)]
    pub controller: String,
    #[arg(long, default_value_t = 0)]
    pub lead: usize,
}

#[derive(Debug, Args)]
pub struct LeadSweepArgs {
    #[command(flatten)]
    pub episode: EpisodeArgs,
    /// Comma-separated commitment windows, e.g. `0,1,3,5`.
    #[arg(long, value_delimiter = ',')]
    pub lead: Option<Vec<usize>>,
    /// Comma-separated controllers, e.g. `linear,scp1,scp5`.
    #[arg(long, value_delimiter = ',')]
    pub controllers: Option<Vec<String>>,
}

#[derive(Debug, Args)]
pub struct DiagnoseArgs {
    /// Checkpoint file; repeat for several.
    #[arg(long = "ckpt", required = true)]
    pub ckpts: Vec<PathBuf>,
    /// Dataset whose test windows feed the stability statistics.
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub windows: Option<usize>,
    #[arg(long)]
    pub out: PathBuf,
}

fn apply_episode_overrides(cfg: &mut HarnessConfig, a: &EpisodeArgs) {
    if let Some(e) = a.episodes {
        cfg.mpc.episodes = e;
    }
    if let Some(s) = a.steps {
        cfg.mpc.steps = s;
    }
}

pub fn run(cli: Cli) -> Result<(), CliError> {
    let mut cfg = HarnessConfig::load(cli.config.as_deref())?;
    cfg.sequential |= cli.sequential;
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    match cli.command {
        Command::GenData(a) => {
            if let Some(n) = a.train_windows {
                cfg.data.train_windows = n;
            }
            if let Some(n) = a.test_windows {
                cfg.data.test_windows = n;
            }
            commands::gen_data(&cfg, &a.preset, &a.out, a.csv.as_deref())
        }
        Command::Train(a) => {
            if let Some(e) = a.epochs {
                cfg.train.epochs = e;
            }
            commands::train(&cfg, &a.data, &a.model, &a.preset, &a.out)
        }
        Command::EvalForecast(a) => commands::eval_forecast(&cfg, &a.runs, a.data.as_deref(), &a.out),
        Command::RunMpc(a) => {
            apply_episode_overrides(&mut cfg, &a.episode);
            cfg.mpc.controllers = vec![a.controller.clone()];
            cfg.mpc.leads = vec![a.lead];
            commands::run_mpc(&cfg, &a.episode.ckpt, &a.episode.preset, &a.controller, a.lead, &a.episode.out)
        }
        Command::LeadSweep(a) => {
            apply_episode_overrides(&mut cfg, &a.episode);
            if let Some(l) = a.lead {
                cfg.mpc.leads = l;
            }
            if let Some(c) = a.controllers {
                cfg.mpc.controllers = c;
            }
            commands::lead_sweep(&cfg, &a.episode.ckpt, &a.episode.preset, &a.episode.out)
        }
        Command::Diagnose(a) => {
            if let Some(w) = a.windows {
                cfg.diagnose.windows = w;
            }
            commands::diagnose(&cfg, &a.ckpts, a.data.as_deref(), &a.out)
        }
    }
}
