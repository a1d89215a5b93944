//! Multi-step prediction loss on the tape, and its forward-only twin.

use super::forward::{control_stats, encode_rows, generate_operators, LieTrotterStep, Coupling, DELTA_FLOOR};
use super::params::{ModelKind, ModelParams, TensorId};
use super::ModelError;
use crate::datagen::{NormStats, WindowView};
use crate::numerics::tape::{Gradients, Tape, Var};
use crate::numerics::{Matrix, NumericsError};
use crate::Exec;

/// One window in dataset-normalized units: `L×n` states and `L×m` controls.
#[derive(Debug, Clone, PartialEq)]
pub struct NormalizedWindow {
    pub states: Matrix,
    pub controls: Matrix,
}

impl NormalizedWindow {
    pub fn from_view(view: &WindowView<'_>, stats: &NormStats) -> Self {
        let len = view.len();
        let (n, m) = (view.state_dim, view.control_dim);
        let mut states = Matrix::zeros(len, n);
        let mut controls = Matrix::zeros(len, m);
        for k in 0..len {
            states.row_mut(k).copy_from_slice(&stats.normalize_state(view.state(k)));
            controls.row_mut(k).copy_from_slice(&stats.normalize_control(view.control(k)));
        }
        Self { states, controls }
    }

    pub fn len(&self) -> usize {
        self.states.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.states.rows() == 0
    }
}

fn check_window(params: &ModelParams, w: &NormalizedWindow) -> Result<(), ModelError> {
    let c = &params.config;
    let len = c.lookback + c.horizon;
    if w.states.shape() != (len, c.state_dim) || w.controls.shape() != (len, c.control_dim) {
        return Err(ModelError::Contract(format!(
            "window must hold {len} steps of {}/{} channels, found {:?}/{:?}",
            c.state_dim,
            c.control_dim,
            w.states.shape(),
            w.controls.shape()
        )));
    }
    Ok(())
}

/// Open-loop predictions for the horizon part of a window: row `k` is the
/// decoded prediction of state `lookback + k`.
pub fn window_predictions(params: &ModelParams, w: &NormalizedWindow) -> Result<Matrix, ModelError> {
    Ok(window_forward(params, w, false)?.predictions)
}

pub(crate) struct WindowForward {
    pub predictions: Matrix,
    pub penalty: f64,
}

pub(crate) fn window_forward(
    params: &ModelParams,
    w: &NormalizedWindow,
    with_penalty: bool,
) -> Result<WindowForward, ModelError> {
    check_window(params, w)?;
    let c = &params.config;
    let (h, horizon, n) = (c.lookback, c.horizon, c.state_dim);
    let latents = encode_rows(params, &w.states.block(0, 0, h + 1, n));
    let bundle = generate_operators(
        params,
        &latents.block(0, 0, h, c.latent_dim),
        &w.controls.block(0, 0, h, c.control_dim),
    )?;
    let coupling = Coupling::from_params(params);
    let mut z = latents.row(h).to_vec();
    let mut predictions = Matrix::zeros(horizon, n);
    predictions.row_mut(0).copy_from_slice(&bundle.decode(&z));
    let penalize = with_penalty && c.penalty_weight != 0.0 && c.kind == ModelKind::Bilinear;
    let mut penalty = 0.0;
    for k in 1..horizon {
        let u = bundle.normalize_control(w.controls.row(h + k - 1));
        let step = LieTrotterStep::new(&bundle, &coupling, &u)?;
        z = step.apply(&z, &u);
        predictions.row_mut(k).copy_from_slice(&bundle.decode(&z));
        if penalize {
            match super::spectral_penalty(&step.operators().a, c.penalty_margin) {
                Ok(p) => penalty += p,
                Err(ModelError::Numerics(e)) if penalty_skippable(&e) => {
                    log::warn!("eigensolver failed at horizon step {k}; penalty skipped")
                }
                Err(e) => return Err(e),
            }
        }
    }
    if horizon > 1 {
        penalty /= (horizon - 1) as f64;
    }
    Ok(WindowForward { predictions, penalty })
}

fn penalty_skippable(e: &NumericsError) -> bool {
    matches!(e, NumericsError::ConvergenceFailure { .. })
}

/// Training objective of one window: mean over the horizon of the squared
/// prediction error norm, plus the weighted mean spectral penalty over the
/// horizon transitions when `with_penalty` is set.
pub fn window_loss(params: &ModelParams, w: &NormalizedWindow, with_penalty: bool) -> Result<f64, ModelError> {
    let f = window_forward(params, w, with_penalty)?;
    let c = &params.config;
    let target = w.states.block(c.lookback, 0, c.horizon, c.state_dim);
    let sq = (&f.predictions - &target).as_slice().iter().map(|v| v * v).sum::<f64>();
    Ok(sq / c.horizon as f64 + if with_penalty { c.penalty_weight * f.penalty } else { 0.0 })
}

/// Loss value, per-tensor gradients and the number of transitions whose
/// penalty was skipped because the eigensolver did not converge.
pub fn window_loss_and_grad(
    params: &ModelParams,
    w: &NormalizedWindow,
) -> Result<(f64, Vec<Matrix>, usize), ModelError> {
    check_window(params, w)?;
    let c = &params.config;
    let (h, horizon, n, m, dz) = (c.lookback, c.horizon, c.state_dim, c.control_dim, c.latent_dim);
    let mut tape = Tape::new();
    let vars: Vec<Var> = params.tensors.iter().map(|t| tape.leaf(t.clone())).collect();
    let dense = |tape: &mut Tape, x: Var, wi: usize, bi: usize| {
        let y = tape.matmul(x, vars[wi]);
        tape.add_row_broadcast(y, vars[bi])
    };

    let xs = tape.constant(w.states.block(0, 0, h + 1, n));
    let hid = dense(&mut tape, xs, TensorId::ENC_W1, TensorId::ENC_B1);
    let hid = tape.tanh(hid);
    let latents = dense(&mut tape, hid, TensorId::ENC_W2, TensorId::ENC_B2);

    let (mean, std) = control_stats(&w.controls.block(0, 0, h, m), c.control_std_floor);
    let mut unorm = w.controls.clone();
    for k in 0..unorm.rows() {
        for j in 0..m {
            unorm[(k, j)] = (unorm[(k, j)] - mean[j]) / std[j];
        }
    }
    let zhist = tape.slice_rows(latents, 0, h);
    let uhist = tape.constant(unorm.block(0, 0, h, m));
    let seq = tape.concat_cols(zhist, uhist);
    let conv = tape.conv1d_depthwise(seq, vars[TensorId::CONV_W], vars[TensorId::CONV_B]);
    let conv = tape.tanh(conv);
    let feat = tape.reshape(conv, 1, c.feature_dim());
    let head = |tape: &mut Tape, first: usize| {
        let y = dense(tape, feat, first, first + 1);
        let y = tape.tanh(y);
        dense(tape, y, first + 2, first + 3)
    };
    let delta_raw = head(&mut tape, TensorId::DELTA_W1);
    let input_flat = head(&mut tape, TensorId::BMAT_W1);
    let decoder_flat = head(&mut tape, TensorId::CMAT_W1);
    let delta = tape.softplus(delta_raw);
    let floor = tape.constant(Matrix::filled(1, dz, DELTA_FLOOR));
    let delta = tape.add(delta, floor);
    let input = tape.reshape(input_flat, dz, m);
    let decoder = tape.reshape(decoder_flat, n, dz);

    let rates = tape.neg_celu(vars[TensorId::A_RAW]);
    let ad = tape.hadamard(rates, delta);
    let decay = tape.exp(ad);
    let phi = tape.phi1(rates, delta);
    let input_zoh = tape.scale_rows(input, phi);
    let generators: Vec<Var> = match c.kind {
        ModelKind::Linear => Vec::new(),
        ModelKind::Bilinear => (0..m)
            .map(|j| {
                let rt = tape.transpose(vars[TensorId::coupling_right(j)]);
                tape.matmul(vars[TensorId::coupling_left(j)], rt)
            })
            .collect(),
    };

    let zcur = tape.slice_rows(latents, h, 1);
    let mut z = tape.transpose(zcur);
    let mut err_terms = Vec::with_capacity(horizon);
    let mut pen_terms = Vec::new();
    let mut skips = 0;
    let penalize = c.penalty_weight != 0.0 && !generators.is_empty();
    for k in 0..horizon {
        if k > 0 {
            let u = unorm.row(h + k - 1).to_vec();
            let ucol = tape.constant(Matrix::col_vector(&u));
            let zd = tape.scale_rows(z, decay);
            let bu = tape.matmul(input_zoh, ucol);
            let y = tape.add(zd, bu);
            if generators.is_empty() {
                z = y;
            } else {
                let mut p = tape.scale(generators[0], u[0] * c.coupling_period);
                for (g, uj) in generators.iter().zip(&u).skip(1) {
                    let term = tape.scale(*g, uj * c.coupling_period);
                    p = tape.add(p, term);
                }
                let ep = tape.expm(p)?;
                z = tape.matmul(ep, y);
                if penalize {
                    let a = tape.scale_cols(ep, decay);
                    match tape.spectral_penalty(a, c.penalty_margin) {
                        Ok(v) => pen_terms.push(v),
                        Err(e) if penalty_skippable(&e) => {
                            log::warn!("eigensolver failed at horizon step {k}; penalty skipped");
                            skips += 1;
                        }
                        Err(e) => return Err(e.into()),
                    }
                }
            }
        }
        let xhat = tape.matmul(decoder, z);
        let target = tape.constant(Matrix::col_vector(w.states.row(h + k)));
        let diff = tape.sub(xhat, target);
        err_terms.push(tape.sum_squares(diff));
    }
    let mut total = sum_vars(&mut tape, &err_terms).expect("horizon > 0");
    total = tape.scale(total, 1.0 / horizon as f64);
    if let Some(pen) = sum_vars(&mut tape, &pen_terms) {
        let pen = tape.scale(pen, c.penalty_weight / (horizon - 1) as f64);
        total = tape.add(total, pen);
    }
    let grads: Gradients = tape.backward(total, 1.0)?;
    Ok((tape.scalar(total), vars.iter().map(|&v| grads.wrt(v)).collect(), skips))
}

fn sum_vars(tape: &mut Tape, terms: &[Var]) -> Option<Var> {
    let (&first, rest) = terms.split_first()?;
    Some(rest.iter().fold(first, |acc, &t| tape.add(acc, t)))
}

#[derive(Debug, Clone, PartialEq)]
pub struct BatchLoss {
    pub loss: f64,
    pub grads: Vec<Matrix>,
    pub penalty_skips: usize,
}

/// Mean loss and gradient over a batch. Windows are evaluated through
/// `exec` and reduced in batch order, so the result does not depend on the
/// execution mode.
pub fn batch_loss_and_grad(
    params: &ModelParams,
    windows: &[&NormalizedWindow],
    exec: Exec,
) -> Result<BatchLoss, ModelError> {
    if windows.is_empty() {
        return Err(ModelError::Contract("empty batch".into()));
    }
    let results = exec.map(windows, |w| window_loss_and_grad(params, w));
    let scale = 1.0 / windows.len() as f64;
    let mut grads: Vec<Matrix> = params.tensors.iter().map(|t| Matrix::zeros(t.rows(), t.cols())).collect();
    let (mut loss, mut penalty_skips) = (0.0, 0);
    for r in results {
        let (l, g, s) = r?;
        loss += l;
        penalty_skips += s;
        for (acc, gi) in grads.iter_mut().zip(&g) {
            acc.axpy(1.0, gi);
        }
    }
    for g in &mut grads {
        *g = g.scale(scale);
    }
    Ok(BatchLoss {
        loss: loss * scale,
        grads,
        penalty_skips,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;
    use crate::simulators::Preset;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn toy_config(kind: ModelKind) -> ModelConfig {
        ModelConfig {
            kind,
            state_dim: 2,
            control_dim: 2,
            latent_dim: 2,
            rank: 2,
            lookback: 6,
            horizon: 5,
            kernel: 3,
            hidden: 4,
            penalty_weight: 0.5,
            penalty_margin: 0.05,
            coupling_period: 1.0,
            control_std_floor: 0.5,
        }
    }

    fn random_window(rng: &mut ChaCha8Rng, c: &ModelConfig) -> NormalizedWindow {
        let len = c.lookback + c.horizon;
        let mut r = |rows, cols| {
            Matrix::from_vec(rows, cols, (0..rows * cols).map(|_| rng.gen_range(-1.5..1.5)).collect()).unwrap()
        };
        NormalizedWindow {
            states: r(len, c.state_dim),
            controls: r(len, c.control_dim),
        }
    }

    fn perturbed(c: ModelConfig, seed: u64) -> ModelParams {
        let mut p = ModelParams::init(c, seed).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xabc);
        for t in &mut p.tensors {
            for v in t.as_mut_slice() {
                *v += rng.gen_range(-0.4..0.4);
            }
        }
        p
    }

    #[test]
    fn tape_and_forward_agree() {
        let c = toy_config(ModelKind::Bilinear);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for seed in 0..10 {
            let p = perturbed(c, seed);
            let w = random_window(&mut rng, &c);
            let (l, _, _) = window_loss_and_grad(&p, &w).unwrap();
            let f = window_loss(&p, &w, true).unwrap();
            assert!((l - f).abs() <= 1e-12 * f.abs().max(1.0), "{l} vs {f}");
        }
    }

    #[test]
    fn gradient_matches_central_differences() {
        let c = toy_config(ModelKind::Bilinear);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let p = perturbed(c, 7);
        let w = random_window(&mut rng, &c);
        let (_, g, _) = window_loss_and_grad(&p, &w).unwrap();
        let h = 1e-6;
        for (ti, t) in p.tensors.iter().enumerate() {
            let mut max_err: f64 = 0.0;
            let mut max_ref: f64 = 0.0;
            for e in 0..t.len() {
                let mut plus = p.clone();
                plus.tensors[ti].as_mut_slice()[e] += h;
                let mut minus = p.clone();
                minus.tensors[ti].as_mut_slice()[e] -= h;
                let fd = (window_loss(&plus, &w, true).unwrap() - window_loss(&minus, &w, true).unwrap()) / (2.0 * h);
                max_err = max_err.max((fd - g[ti].as_slice()[e]).abs());
                max_ref = max_ref.max(fd.abs());
            }
            assert!(max_err <= 1e-4 * max_ref.max(1e-6), "tensor {ti}: err {max_err} ref {max_ref}");
        }
    }

    #[test]
    fn perfect_prediction_gives_zero_loss() {
        // zero decoder output weights and biases decode everything to zero
        let c = toy_config(ModelKind::Linear);
        let mut p = ModelParams::init(c, 3).unwrap();
        *p.tensor_mut(TensorId::CMAT_W2) = Matrix::zeros(c.hidden, 4);
        *p.tensor_mut(TensorId::CMAT_B2) = Matrix::zeros(1, 4);
        let mut w = random_window(&mut ChaCha8Rng::seed_from_u64(4), &c);
        for k in c.lookback..w.len() {
            w.states.row_mut(k).fill(0.0);
        }
        assert_eq!(window_loss(&p, &w, true).unwrap(), 0.0);
    }

    #[test]
    fn zero_penalty_weight_is_pure_mse() {
        let mut c = toy_config(ModelKind::Bilinear);
        let p = perturbed(c, 5);
        let w = random_window(&mut ChaCha8Rng::seed_from_u64(5), &c);
        let mse = window_loss(&p, &w, false).unwrap();
        c.penalty_weight = 0.0;
        let q = ModelParams::from_tensors(c, p.tensors.clone()).unwrap();
        assert_eq!(window_loss(&q, &w, true).unwrap(), mse);
        assert!((window_loss_and_grad(&q, &w).unwrap().0 - mse).abs() < 1e-12 * mse);
    }

    #[test]
    fn batch_reduction_is_mode_independent() {
        let c = toy_config(ModelKind::Bilinear);
        let p = perturbed(c, 6);
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let ws: Vec<NormalizedWindow> = (0..9).map(|_| random_window(&mut rng, &c)).collect();
        let refs: Vec<&NormalizedWindow> = ws.iter().collect();
        let a = batch_loss_and_grad(&p, &refs, Exec::Sequential).unwrap();
        let b = batch_loss_and_grad(&p, &refs, Exec::default()).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn preset_window_shapes_are_checked() {
        let p = ModelParams::init(ModelConfig::for_preset(Preset::CartpoleTi, ModelKind::Linear), 1).unwrap();
        let w = NormalizedWindow {
            states: Matrix::zeros(59, 4),
            controls: Matrix::zeros(59, 1),
        };
        assert!(window_loss(&p, &w, true).is_err());
        let w = NormalizedWindow {
            states: Matrix::zeros(60, 4),
            controls: Matrix::zeros(60, 1),
        };
        assert!(window_loss(&p, &w, true).unwrap().is_finite());
    }
}
