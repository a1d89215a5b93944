//! Mini-batch training with AdamW, step learning-rate decay and global-norm
//! clipping, plus open-loop forecast evaluation.

mod optim;

pub use optim::{clip_global_norm, step_lr, AdamW};

use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::datagen::{Dataset, Split};
use crate::model::{batch_loss_and_grad, window_loss, window_predictions, ModelError, ModelParams, NormalizedWindow};
use crate::Exec;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("non-finite loss at epoch {epoch}, batch {batch}; parameter norms {param_norms:?}")]
    NonFinite {
        epoch: usize,
        batch: usize,
        param_norms: Vec<f64>,
    },
    #[error("contract violation: {0}")]
    Contract(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub lr_step: usize,
    pub lr_gamma: f64,
    pub clip_norm: f64,
    pub seed: u64,
    /// Evaluate the test split every this many epochs (0 disables), in
    /// addition to the final `mean_window` epochs and every new best epoch.
    pub test_every: usize,
    pub mean_window: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 401,
            learning_rate: 1e-3,
            weight_decay: 1e-3,
            batch_size: 256,
            lr_step: 50,
            lr_gamma: 0.9,
            clip_norm: 1.0,
            seed: 1,
            test_every: 10,
            mean_window: 50,
        }
    }
}

impl TrainConfig {
    pub fn lr_at(&self, epoch: usize) -> f64 {
        step_lr(self.learning_rate, self.lr_gamma, self.lr_step, epoch)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub learning_rate: f64,
    pub train_loss: f64,
    pub val_loss: f64,
    pub g_norm: f64,
    pub max_grad_norm: f64,
    pub penalty_skips: usize,
    pub test_mse: Option<f64>,
    pub wall_seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct TrainLog {
    pub records: Vec<EpochRecord>,
    pub best_epoch: Option<usize>,
    /// Training loss of the initial parameters over the training split.
    pub initial_train_loss: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub final_params: ModelParams,
    pub best_params: ModelParams,
    pub log: TrainLog,
}

/// All windows of one split, normalized with the dataset statistics.
pub fn normalized_split(data: &Dataset, split: Split) -> Vec<NormalizedWindow> {
    data.split_indices(split)
        .into_iter()
        .map(|i| NormalizedWindow::from_view(&data.window(i), &data.stats))
        .collect()
}

/// Mean over windows of the loss without the spectral penalty.
pub fn evaluate_loss(params: &ModelParams, windows: &[NormalizedWindow], exec: Exec) -> Result<f64, ModelError> {
    mean_of(exec.map(windows, |w| window_loss(params, w, false)))
}

/// Open-loop forecast MSE, averaged over every horizon step and state
/// channel of every window, in normalized units.
pub fn evaluate_forecast(params: &ModelParams, windows: &[NormalizedWindow], exec: Exec) -> Result<f64, ModelError> {
    let c = params.config;
    mean_of(exec.map(windows, |w| {
        let pred = window_predictions(params, w)?;
        let target = w.states.block(c.lookback, 0, c.horizon, c.state_dim);
        Ok((&pred - &target).as_slice().iter().map(|v| v * v).sum::<f64>() / pred.len() as f64)
    }))
}

fn mean_of(vals: Vec<Result<f64, ModelError>>) -> Result<f64, ModelError> {
    if vals.is_empty() {
        return Err(ModelError::Contract("no windows to evaluate".into()));
    }
    let n = vals.len() as f64;
    let mut sum = 0.0;
    for v in vals {
        sum += v?;
    }
    Ok(sum / n)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SelectionMetrics {
    /// Test MSE at the minimum-validation-loss epoch.
    pub best: f64,
    /// Mean test MSE over the final epochs.
    pub mean_final: f64,
    pub best_epoch: usize,
    /// Fewer epochs than requested were available for the mean.
    pub partial: bool,
}

/// Best-checkpoint and final-window mean test MSE from aligned per-epoch
/// series. `test_mse[i]` may be absent for epochs that were not evaluated;
/// the best-validation epoch must have a value.
pub fn selection_metrics(val_loss: &[f64], test_mse: &[Option<f64>], window: usize) -> Result<SelectionMetrics, TrainError> {
    if val_loss.is_empty() || val_loss.len() != test_mse.len() {
        return Err(TrainError::Contract("selection needs aligned, non-empty series".into()));
    }
    let best_epoch = val_loss
        .iter()
        .enumerate()
        .min_by(|a, b| a.1.total_cmp(b.1))
        .map(|(i, _)| i)
        .expect("non-empty");
    let best = test_mse[best_epoch]
        .ok_or_else(|| TrainError::Contract(format!("no test MSE recorded at best epoch {best_epoch}")))?;
    let start = test_mse.len().saturating_sub(window);
    let tail: Vec<f64> = test_mse[start..].iter().flatten().copied().collect();
    if tail.is_empty() {
        return Err(TrainError::Contract("no test MSE recorded in the final epochs".into()));
    }
    let partial = tail.len() < window;
    if partial {
        log::warn!("mean over {} epochs instead of {window}", tail.len());
    }
    Ok(SelectionMetrics {
        best,
        mean_final: tail.iter().sum::<f64>() / tail.len() as f64,
        best_epoch,
        partial,
    })
}

impl TrainLog {
    pub fn selection(&self, window: usize) -> Result<SelectionMetrics, TrainError> {
        let val: Vec<f64> = self.records.iter().map(|r| r.val_loss).collect();
        let test: Vec<Option<f64>> = self.records.iter().map(|r| r.test_mse).collect();
        selection_metrics(&val, &test, window)
    }
}

/// Runs the epoch loop. `on_epoch` sees every record as it is produced.
pub fn train(
    data: &Dataset,
    init: ModelParams,
    cfg: &TrainConfig,
    exec: Exec,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<TrainOutcome, TrainError> {
    let train_set = normalized_split(data, Split::Train);
    let val_set = normalized_split(data, Split::Val);
    let test_set = normalized_split(data, Split::Test);
    train_windows(&train_set, &val_set, &test_set, init, cfg, exec, &mut on_epoch)
}

/// The epoch loop over pre-normalized splits. An empty test set disables
/// test evaluation.
pub fn train_windows(
    train_set: &[NormalizedWindow],
    val_set: &[NormalizedWindow],
    test_set: &[NormalizedWindow],
    init: ModelParams,
    cfg: &TrainConfig,
    exec: Exec,
    on_epoch: &mut dyn FnMut(&EpochRecord),
) -> Result<TrainOutcome, TrainError> {
    if train_set.is_empty() || val_set.is_empty() {
        return Err(TrainError::Contract("training needs non-empty train and validation splits".into()));
    }
    if cfg.batch_size == 0 {
        return Err(TrainError::Contract("batch size must be positive".into()));
    }
    let mut params = init;
    let shapes: Vec<(usize, usize)> = params.tensors.iter().map(|t| t.shape()).collect();
    let mut opt = AdamW::new(&shapes, cfg.weight_decay);
    let mut log = TrainLog {
        initial_train_loss: evaluate_loss(&params, train_set, exec)?,
        ..TrainLog::default()
    };
    let mut best: Option<(f64, ModelParams)> = None;
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    for epoch in 0..cfg.epochs {
        let start = Instant::now();
        let lr = cfg.lr_at(epoch);
        order.shuffle(&mut rng);
        let (mut loss_sum, mut max_grad, mut skips) = (0.0, 0.0f64, 0);
        for (bi, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let batch: Vec<&NormalizedWindow> = chunk.iter().map(|&i| &train_set[i]).collect();
            let mut out = batch_loss_and_grad(&params, &batch, exec)?;
            if !out.loss.is_finite() || out.grads.iter().any(|g| !g.is_finite()) {
                return Err(TrainError::NonFinite {
                    epoch,
                    batch: bi,
                    param_norms: params.tensors.iter().map(|t| t.norm_fro()).collect(),
                });
            }
            max_grad = max_grad.max(clip_global_norm(&mut out.grads, cfg.clip_norm));
            opt.step(&mut params.tensors, &out.grads, lr);
            loss_sum += out.loss * chunk.len() as f64;
            skips += out.penalty_skips;
        }
        let val_loss = evaluate_loss(&params, val_set, exec)?;
        let improved = best.as_ref().is_none_or(|(v, _)| val_loss < *v);
        if improved {
            best = Some((val_loss, params.clone()));
            log.best_epoch = Some(epoch);
        }
        let scheduled = (cfg.test_every > 0 && epoch % cfg.test_every == 0)
            || epoch + cfg.mean_window >= cfg.epochs
            || improved;
        let test_mse = if scheduled && !test_set.is_empty() {
            Some(evaluate_forecast(&params, test_set, exec)?)
        } else {
            None
        };
        let record = EpochRecord {
            epoch,
            learning_rate: lr,
            train_loss: loss_sum / train_set.len() as f64,
            val_loss,
            g_norm: params.g_norm(),
            max_grad_norm: max_grad,
            penalty_skips: skips,
            test_mse,
            wall_seconds: start.elapsed().as_secs_f64(),
        };
        on_epoch(&record);
        log.records.push(record);
    }
    let best_params = best.map(|(_, p)| p).unwrap_or_else(|| params.clone());
    Ok(TrainOutcome {
        final_params: params,
        best_params,
        log,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{ModelConfig, ModelKind, TensorId};
    use crate::numerics::Matrix;
    use rand::Rng;

    fn toy_config() -> ModelConfig {
        ModelConfig {
            kind: ModelKind::Bilinear,
            state_dim: 2,
            control_dim: 1,
            latent_dim: 2,
            rank: 2,
            lookback: 6,
            horizon: 5,
            kernel: 3,
            hidden: 8,
            penalty_weight: 0.01,
            penalty_margin: 0.05,
            coupling_period: 1.0,
            control_std_floor: 0.5,
        }
    }

    fn toy_windows(count: usize, seed: u64) -> Vec<NormalizedWindow> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..count)
            .map(|_| {
                // damped oscillator driven by the control
                let mut x = [rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)];
                let mut states = Matrix::zeros(11, 2);
                let mut controls = Matrix::zeros(11, 1);
                for k in 0..11 {
                    let u: f64 = rng.gen_range(-1.0..1.0);
                    states.row_mut(k).copy_from_slice(&x);
                    controls[(k, 0)] = u;
                    x = [0.9 * x[0] + 0.2 * x[1], -0.2 * x[0] + 0.9 * x[1] + 0.3 * u];
                }
                NormalizedWindow { states, controls }
            })
            .collect()
    }

    fn quiet() -> TrainConfig {
        TrainConfig {
            epochs: 1,
            batch_size: 4,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn one_epoch_changes_parameters() {
        let ws = toy_windows(10, 1);
        let init = ModelParams::init(toy_config(), 1).unwrap();
        let out = train_windows(&ws, &ws[..3], &[], init.clone(), &quiet(), Exec::Sequential, &mut |_| {}).unwrap();
        assert_eq!(out.log.records.len(), 1);
        assert_ne!(out.final_params, init);
        assert_eq!(out.log.best_epoch, Some(0));
    }

    #[test]
    fn training_is_deterministic_across_modes() {
        let ws = toy_windows(12, 2);
        let init = ModelParams::init(toy_config(), 2).unwrap();
        let cfg = TrainConfig { epochs: 3, ..quiet() };
        let run = |exec| train_windows(&ws, &ws[..4], &ws[..2], init.clone(), &cfg, exec, &mut |_| {}).unwrap();
        let (a, b) = (run(Exec::Sequential), run(Exec::default()));
        assert_eq!(a.final_params, b.final_params);
        let strip = |l: &TrainLog| l.records.iter().map(|r| (r.train_loss, r.val_loss, r.test_mse)).collect::<Vec<_>>();
        assert_eq!(strip(&a.log), strip(&b.log));
    }

    #[test]
    fn loss_decreases_on_toy_system() {
        let ws = toy_windows(64, 3);
        let init = ModelParams::init(toy_config(), 3).unwrap();
        let cfg = TrainConfig {
            epochs: 60,
            batch_size: 16,
            learning_rate: 1e-2,
            ..TrainConfig::default()
        };
        let out = train_windows(&ws, &ws[..8], &[], init, &cfg, Exec::default(), &mut |_| {}).unwrap();
        let last = out.log.records.last().unwrap().train_loss;
        assert!(last < 0.3 * out.log.initial_train_loss, "{last} vs {}", out.log.initial_train_loss);
        assert!(out.log.records.iter().all(|r| r.learning_rate <= 1e-2));
    }

    #[test]
    fn exact_model_has_zero_forecast_error() {
        let cfg = ModelConfig {
            kind: ModelKind::Linear,
            ..toy_config()
        };
        let mut p = ModelParams::init(cfg, 4).unwrap();
        *p.tensor_mut(TensorId::CMAT_W2) = Matrix::zeros(8, 4);
        *p.tensor_mut(TensorId::CMAT_B2) = Matrix::zeros(1, 4);
        let mut ws = toy_windows(5, 4);
        for w in &mut ws {
            for k in 6..11 {
                w.states.row_mut(k).fill(0.0);
            }
        }
        assert_eq!(evaluate_forecast(&p, &ws, Exec::Sequential).unwrap(), 0.0);
    }

    #[test]
    fn zero_decoder_scores_second_moment() {
        let cfg = ModelConfig {
            kind: ModelKind::Linear,
            ..toy_config()
        };
        let mut p = ModelParams::init(cfg, 5).unwrap();
        *p.tensor_mut(TensorId::CMAT_W2) = Matrix::zeros(8, 4);
        *p.tensor_mut(TensorId::CMAT_B2) = Matrix::zeros(1, 4);
        let ws = toy_windows(7, 5);
        let direct: f64 = ws
            .iter()
            .flat_map(|w| (6..11).flat_map(move |k| w.states.row(k).to_vec()))
            .map(|v| v * v)
            .sum::<f64>()
            / (7.0 * 5.0 * 2.0);
        let mse = evaluate_forecast(&p, &ws, Exec::Sequential).unwrap();
        assert!((mse - direct).abs() < 1e-12);
        let mut rev = ws.clone();
        rev.reverse();
        assert!((evaluate_forecast(&p, &rev, Exec::Sequential).unwrap() - mse).abs() < 1e-14);
    }

    #[test]
    fn selection_examples() {
        let m = selection_metrics(&[3.0, 2.0, 1.0], &[Some(0.5); 3], 50).unwrap();
        assert_eq!((m.best, m.mean_final, m.partial), (0.5, 0.5, true));
        let val: Vec<f64> = (0..10).map(|e| if e == 7 { 0.1 } else { 1.0 + e as f64 }).collect();
        let test: Vec<Option<f64>> = (0..10).map(|e| Some(e as f64)).collect();
        let m = selection_metrics(&val, &test, 50).unwrap();
        assert_eq!((m.best, m.best_epoch), (7.0, 7));
        // an oscillating series: the best-validation epoch lands on a dip
        let val: Vec<f64> = (0..60).map(|e| if e % 2 == 0 { 1.0 } else { 2.0 } - e as f64 * 1e-4).collect();
        let test: Vec<Option<f64>> = (0..60).map(|e| Some(if e % 2 == 0 { 0.2 } else { 0.8 })).collect();
        let m = selection_metrics(&val, &test, 50).unwrap();
        assert!(m.mean_final > m.best && !m.partial);
        assert!(selection_metrics(&[1.0], &[None], 50).is_err());
    }
}
