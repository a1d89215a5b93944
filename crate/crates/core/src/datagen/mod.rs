//! Random-excitation trajectories, overlapping windows, the train/val/test
//! split, and normalization statistics.
//!
//! Every episode draws from its own ChaCha8 stream: the base seed fixes the
//! key and the stream id is `(namespace << 48) | episode_index`, with
//! separate namespaces for the training pool and the test set. Episodes can
//! therefore be generated in any order or in parallel and still produce the
//! same dataset.

mod container;

pub use container::{read_dataset, write_dataset, write_windows_csv};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::simulators::{EpisodeMode, Preset, SimError, SystemConfig, Termination};
use crate::Exec;

pub const WINDOW_LEN: usize = 60;
pub const LOOKBACK: usize = 30;
pub const TRAIN_POOL_WINDOWS: usize = 39_900;
pub const TEST_WINDOWS: usize = 4_000;
pub const SPLIT_SEED: u64 = 1;

const TRAIN_NAMESPACE: u64 = 0;
const TEST_NAMESPACE: u64 = 1;

/// Half-widths of the reactor initial-state box around the fixed point.
pub const RSCP_INIT_SPREAD: [f64; 9] = [0.05, 0.05, 10.0, 0.05, 0.05, 10.0, 0.02, 0.05, 10.0];

#[derive(Debug, Error)]
pub enum DatagenError {
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error("only {windows} of {target} windows after {episodes} episodes (episode budget exhausted)")]
    Progress {
        episodes: usize,
        windows: usize,
        target: usize,
    },
    #[error("not a dataset file: {0}")]
    Format(String),
    #[error("corrupt dataset file: {0}")]
    Integrity(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

/// Where an episode's random stream came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum EpisodeSource {
    TrainPool,
    Test,
}

/// Paired states and controls: `controls[k]` was applied at `states[k]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Episode {
    pub source: EpisodeSource,
    pub index: u64,
    pub states: Vec<f64>,
    pub controls: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct WindowRef {
    pub episode: u32,
    pub start: u32,
    pub split: Split,
}

/// Per-channel affine normalization.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub state_mean: Vec<f64>,
    pub state_std: Vec<f64>,
    pub control_mean: Vec<f64>,
    pub control_std: Vec<f64>,
}

impl NormStats {
    pub fn identity(n: usize, m: usize) -> Self {
        Self {
            state_mean: vec![0.0; n],
            state_std: vec![1.0; n],
            control_mean: vec![0.0; m],
            control_std: vec![1.0; m],
        }
    }

    pub fn normalize_state(&self, x: &[f64]) -> Vec<f64> {
        x.iter()
            .zip(self.state_mean.iter().zip(&self.state_std))
            .map(|(v, (mu, sd))| (v - mu) / sd)
            .collect()
    }

    pub fn denormalize_state(&self, x: &[f64]) -> Vec<f64> {
        x.iter()
            .zip(self.state_mean.iter().zip(&self.state_std))
            .map(|(v, (mu, sd))| v * sd + mu)
            .collect()
    }

    pub fn normalize_control(&self, u: &[f64]) -> Vec<f64> {
        u.iter()
            .zip(self.control_mean.iter().zip(&self.control_std))
            .map(|(v, (mu, sd))| (v - mu) / sd)
            .collect()
    }

    pub fn denormalize_control(&self, u: &[f64]) -> Vec<f64> {
        u.iter()
            .zip(self.control_mean.iter().zip(&self.control_std))
            .map(|(v, (mu, sd))| v * sd + mu)
            .collect()
    }
}

/// Borrowed view of one 60-step window.
#[derive(Debug, Clone, Copy)]
pub struct WindowView<'a> {
    pub states: &'a [f64],
    pub controls: &'a [f64],
    pub start_time: f64,
    pub state_dim: usize,
    pub control_dim: usize,
}

impl<'a> WindowView<'a> {
    pub fn len(&self) -> usize {
        self.states.len() / self.state_dim
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }

    pub fn state(&self, k: usize) -> &'a [f64] {
        &self.states[k * self.state_dim..(k + 1) * self.state_dim]
    }

    pub fn control(&self, k: usize) -> &'a [f64] {
        &self.controls[k * self.control_dim..(k + 1) * self.control_dim]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub preset: Preset,
    pub state_dim: usize,
    pub control_dim: usize,
    pub window_len: usize,
    pub seed: u64,
    pub split_seed: u64,
    pub episodes: Vec<Episode>,
    pub windows: Vec<WindowRef>,
    pub stats: NormStats,
}

impl Dataset {
    pub fn window(&self, i: usize) -> WindowView<'_> {
        let w = self.windows[i];
        let ep = &self.episodes[w.episode as usize];
        let (n, m, s, len) = (self.state_dim, self.control_dim, w.start as usize, self.window_len);
        WindowView {
            states: &ep.states[s * n..(s + len) * n],
            controls: &ep.controls[s * m..(s + len) * m],
            start_time: s as f64 * self.preset.config().dt(),
            state_dim: n,
            control_dim: m,
        }
    }

    pub fn split_indices(&self, split: Split) -> Vec<usize> {
        (0..self.windows.len()).filter(|&i| self.windows[i].split == split).collect()
    }

    pub fn count(&self, split: Split) -> usize {
        self.windows.iter().filter(|w| w.split == split).count()
    }
}

/// Requested window counts.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct WindowTargets {
    /// Train + validation pool, split 80/20.
    pub train_pool: usize,
    pub test: usize,
}

impl Default for WindowTargets {
    fn default() -> Self {
        Self {
            train_pool: TRAIN_POOL_WINDOWS,
            test: TEST_WINDOWS,
        }
    }
}

/// Random stream for one episode.
pub fn episode_rng(seed: u64, source: EpisodeSource, index: u64) -> ChaCha8Rng {
    let namespace = match source {
        EpisodeSource::TrainPool => TRAIN_NAMESPACE,
        EpisodeSource::Test => TEST_NAMESPACE,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream((namespace << 48) | index);
    rng
}

/// One excitation control, uniform over the plant's control box.
pub fn sample_excitation<R: Rng>(cfg: &SystemConfig, rng: &mut R) -> Vec<f64> {
    let (lb, ub) = cfg.control_bounds();
    lb.iter().zip(&ub).map(|(l, h)| rng.gen_range(*l..=*h)).collect()
}

/// Initial state: cart at rest near upright, or the reactor near its
/// fixed point.
pub fn sample_initial_state<R: Rng>(cfg: &SystemConfig, rng: &mut R) -> Vec<f64> {
    match cfg {
        SystemConfig::CartPole(_) => {
            let x = rng.gen_range(-4.0..=4.0);
            let theta = rng.gen_range(-0.1..=0.1);
            vec![x, 0.0, theta, 0.0]
        }
        SystemConfig::Rscp(p) => {
            let center = p.fixed_point();
            center
                .iter()
                .zip(&RSCP_INIT_SPREAD)
                .map(|(c, r)| rng.gen_range(c - r..=c + r))
                .collect()
        }
    }
}

/// Rolls one excitation episode until termination.
pub fn roll_episode(
    cfg: &SystemConfig,
    seed: u64,
    source: EpisodeSource,
    index: u64,
    mode: EpisodeMode,
) -> Result<Episode, SimError> {
    let mut rng = episode_rng(seed, source, index);
    let mut state = sample_initial_state(cfg, &mut rng);
    let mut t = 0.0;
    let mut states = Vec::new();
    let mut controls = Vec::new();
    for step in 0.. {
        let u = sample_excitation(cfg, &mut rng);
        let next = match cfg.step_euler(&state, &u, t) {
            Ok(v) => v,
            Err(SimError::Domain { .. }) => break,
            Err(e) => return Err(e),
        };
        states.extend_from_slice(&state);
        controls.extend_from_slice(&u);
        (state, t) = next;
        if cfg.check_termination(&state, step + 1, mode) != Termination::Continue {
            break;
        }
    }
    Ok(Episode {
        source,
        index,
        states,
        controls,
    })
}

/// Rolls episodes from `source` in index order, keeping those that yield
/// windows, until `target` windows are collected. Returns the episodes
/// (truncated to what the windows use) and the per-episode window starts.
fn collect_windows(
    cfg: &SystemConfig,
    seed: u64,
    source: EpisodeSource,
    mode: EpisodeMode,
    target: usize,
    exec: Exec,
) -> Result<Vec<(Episode, usize)>, DatagenError> {
    let budget = 100 * target + 10_000;
    let (n, m) = (cfg.state_dim(), cfg.control_dim());
    let mut out = Vec::new();
    let mut have = 0usize;
    let mut next_index = 0usize;
    let mut batch = 16usize;
    while have < target {
        if next_index >= budget {
            return Err(DatagenError::Progress {
                episodes: next_index,
                windows: have,
                target,
            });
        }
        let count = batch.min(budget - next_index);
        let rolled = exec.map_range(count, |k| roll_episode(cfg, seed, source, (next_index + k) as u64, mode));
        next_index += count;
        batch = (batch * 2).min(4096);
        for ep in rolled {
            let mut ep = ep?;
            let pairs = ep.controls.len() / m;
            if pairs < WINDOW_LEN {
                continue;
            }
            let take = (pairs + 1 - WINDOW_LEN).min(target - have);
            let keep = take - 1 + WINDOW_LEN;
            ep.states.truncate(keep * n);
            ep.controls.truncate(keep * m);
            out.push((ep, take));
            have += take;
            if have == target {
                break;
            }
        }
    }
    Ok(out)
}

/// Per-channel mean and population standard deviation over the training
/// windows, each row weighted by how many training windows contain it.
pub fn compute_stats(episodes: &[Episode], windows: &[WindowRef], n: usize, m: usize) -> NormStats {
    let mut weights: Vec<Vec<f64>> = episodes.iter().map(|e| vec![0.0; e.controls.len() / m + 1]).collect();
    for w in windows.iter().filter(|w| w.split == Split::Train) {
        let wt = &mut weights[w.episode as usize];
        wt[w.start as usize] += 1.0;
        wt[w.start as usize + WINDOW_LEN] -= 1.0;
    }
    for wt in &mut weights {
        let mut run = 0.0;
        for v in wt.iter_mut() {
            run += *v;
            *v = run;
        }
    }
    let moments = |dim: usize, data: &dyn Fn(&Episode) -> &[f64]| {
        let mut total = 0.0;
        let mut mean = vec![0.0; dim];
        for (ep, wt) in episodes.iter().zip(&weights) {
            for (row, &w) in data(ep).chunks(dim).zip(wt) {
                if w == 0.0 {
                    continue;
                }
                total += w;
                for (acc, v) in mean.iter_mut().zip(row) {
                    *acc += w * v;
                }
            }
        }
        for v in &mut mean {
            *v /= total;
        }
        let mut var = vec![0.0; dim];
        for (ep, wt) in episodes.iter().zip(&weights) {
            for (row, &w) in data(ep).chunks(dim).zip(wt) {
                if w == 0.0 {
                    continue;
                }
                for ((acc, v), mu) in var.iter_mut().zip(row).zip(&mean) {
                    *acc += w * (v - mu) * (v - mu);
                }
            }
        }
        let std = var
            .iter()
            .map(|v| {
                let s = (v / total).sqrt();
                if s > 1e-12 {
                    s
                } else {
                    1.0
                }
            })
            .collect();
        (mean, std)
    };
    let (state_mean, state_std) = moments(n, &|e| &e.states);
    let (control_mean, control_std) = moments(m, &|e| &e.controls);
    NormStats {
        state_mean,
        state_std,
        control_mean,
        control_std,
    }
}

/// Generates the training pool and the test set for `preset`.
pub fn generate_dataset(preset: Preset, targets: WindowTargets, seed: u64, exec: Exec) -> Result<Dataset, DatagenError> {
    let cfg = preset.config();
    let (n, m) = (cfg.state_dim(), cfg.control_dim());
    let pool = collect_windows(&cfg, seed, EpisodeSource::TrainPool, EpisodeMode::Training, targets.train_pool, exec)?;
    let test = collect_windows(&cfg, seed, EpisodeSource::Test, EpisodeMode::Test, targets.test, exec)?;

    let mut episodes = Vec::with_capacity(pool.len() + test.len());
    let mut windows = Vec::with_capacity(targets.train_pool + targets.test);
    for (ep, take) in pool.into_iter().chain(test) {
        let split = match ep.source {
            EpisodeSource::TrainPool => Split::Train,
            EpisodeSource::Test => Split::Test,
        };
        let e = episodes.len() as u32;
        windows.extend((0..take as u32).map(|start| WindowRef { episode: e, start, split }));
        episodes.push(ep);
    }

    let mut order: Vec<usize> = (0..targets.train_pool).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(SPLIT_SEED));
    let n_train = targets.train_pool * 4 / 5;
    for &i in &order[n_train..] {
        windows[i].split = Split::Val;
    }

    let stats = compute_stats(&episodes, &windows, n, m);
    Ok(Dataset {
        preset,
        state_dim: n,
        control_dim: m,
        window_len: WINDOW_LEN,
        seed,
        split_seed: SPLIT_SEED,
        episodes,
        windows,
        stats,
    })
}
