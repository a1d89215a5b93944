//! Forward-only evaluation: encoder, operator generation, the split step,
//! and open-loop rollouts. The training loss re-expresses the same graph on
//! the tape; tests pin the two routes together.

use super::params::{ModelParams, TensorId};
use super::ModelError;
use crate::numerics::tape::{conv1d_depthwise, neg_celu, softplus_scalar};
use crate::numerics::{eig_moduli, matrix_exp, phi1, Matrix};

/// Offset added after the softplus so timescales stay strictly positive.
pub const DELTA_FLOOR: f64 = 1e-4;

fn dense(x: &Matrix, w: &Matrix, b: &Matrix) -> Matrix {
    let mut y = x.matmul(w);
    for i in 0..y.rows() {
        for (v, bj) in y.row_mut(i).iter_mut().zip(b.as_slice()) {
            *v += bj;
        }
    }
    y
}

fn mlp(x: &Matrix, w1: &Matrix, b1: &Matrix, w2: &Matrix, b2: &Matrix) -> Matrix {
    dense(&dense(x, w1, b1).map(f64::tanh), w2, b2)
}

/// Latent state of one normalized observation.
pub fn encode(params: &ModelParams, x: &[f64]) -> Vec<f64> {
    encode_rows(params, &Matrix::row_vector(x)).into_vec()
}

/// Row-wise encoding of a `k×n` block of normalized observations.
pub fn encode_rows(params: &ModelParams, xs: &Matrix) -> Matrix {
    let t = |id| params.tensor(id);
    mlp(xs, t(TensorId::ENC_W1), t(TensorId::ENC_B1), t(TensorId::ENC_W2), t(TensorId::ENC_B2))
}

/// Operators emitted for one lookback window, fixed over the horizon.
#[derive(Debug, Clone, PartialEq)]
pub struct OperatorBundle {
    /// Activated diagonal drift, each entry at most 1.
    pub rates: Vec<f64>,
    /// Per-mode timescales, strictly positive.
    pub delta: Vec<f64>,
    /// Continuous input matrix, `d_z×m`.
    pub input: Matrix,
    /// Decoder, `n×d_z`.
    pub decoder: Matrix,
    /// Instance statistics of the history controls (dataset units).
    pub control_mean: Vec<f64>,
    pub control_std: Vec<f64>,
}

impl OperatorBundle {
    pub fn latent_dim(&self) -> usize {
        self.rates.len()
    }

    pub fn control_dim(&self) -> usize {
        self.control_mean.len()
    }

    /// Dataset-normalized control to model units.
    pub fn normalize_control(&self, u: &[f64]) -> Vec<f64> {
        u.iter()
            .zip(self.control_mean.iter().zip(&self.control_std))
            .map(|(v, (m, s))| (v - m) / s)
            .collect()
    }

    /// Model units back to dataset-normalized units.
    pub fn denormalize_control(&self, u: &[f64]) -> Vec<f64> {
        u.iter()
            .zip(self.control_mean.iter().zip(&self.control_std))
            .map(|(v, (m, s))| v * s + m)
            .collect()
    }

    pub fn decode(&self, z: &[f64]) -> Vec<f64> {
        self.decoder.matvec(z)
    }

    /// Order-sensitive FNV-1a hash of every entry, for identity checks.
    pub fn checksum(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        let parts: [&[f64]; 6] = [
            &self.rates,
            &self.delta,
            self.input.as_slice(),
            self.decoder.as_slice(),
            &self.control_mean,
            &self.control_std,
        ];
        for v in parts.iter().flat_map(|p| p.iter()) {
            for b in v.to_bits().to_le_bytes() {
                h ^= b as u64;
                h = h.wrapping_mul(0x0100_0000_01b3);
            }
        }
        h
    }

    fn is_finite(&self) -> bool {
        self.rates.iter().chain(&self.delta).all(|v| v.is_finite())
            && self.input.is_finite()
            && self.decoder.is_finite()
    }
}

/// Per-channel mean and population std of the rows of `u`, std floored.
pub(crate) fn control_stats(u: &Matrix, floor: f64) -> (Vec<f64>, Vec<f64>) {
    let (t, m) = u.shape();
    let mut mean = vec![0.0; m];
    let mut std = vec![0.0; m];
    for j in 0..m {
        let col = u.column(j);
        let mu = col.iter().sum::<f64>() / t as f64;
        let var = col.iter().map(|v| (v - mu).powi(2)).sum::<f64>() / t as f64;
        mean[j] = mu;
        std[j] = var.sqrt().max(floor);
    }
    (mean, std)
}

/// Operators from a lookback window of latent states (`H×d_z`) and
/// dataset-normalized controls (`H×m`).
pub fn generate_operators(
    params: &ModelParams,
    latent_history: &Matrix,
    control_history: &Matrix,
) -> Result<OperatorBundle, ModelError> {
    let cfg = &params.config;
    let (n, m, dz, h) = (cfg.state_dim, cfg.control_dim, cfg.latent_dim, cfg.lookback);
    if latent_history.shape() != (h, dz) || control_history.shape() != (h, m) {
        return Err(ModelError::Contract(format!(
            "history must be {h}x{dz} latents and {h}x{m} controls, found {:?} and {:?}",
            latent_history.shape(),
            control_history.shape()
        )));
    }
    let (control_mean, control_std) = control_stats(control_history, cfg.control_std_floor);
    let mut seq = Matrix::zeros(h, dz + m);
    seq.set_block(0, 0, latent_history);
    for k in 0..h {
        for j in 0..m {
            seq[(k, dz + j)] = (control_history[(k, j)] - control_mean[j]) / control_std[j];
        }
    }
    let t = |id| params.tensor(id);
    let conv = conv1d_depthwise(&seq, t(TensorId::CONV_W), t(TensorId::CONV_B)).map(f64::tanh);
    let feat = conv.reshape(1, conv.len());
    let head = |w1, b1, w2, b2| mlp(&feat, t(w1), t(b1), t(w2), t(b2));
    let delta = head(TensorId::DELTA_W1, TensorId::DELTA_B1, TensorId::DELTA_W2, TensorId::DELTA_B2)
        .map(|v| softplus_scalar(v) + DELTA_FLOOR)
        .into_vec();
    let input = head(TensorId::BMAT_W1, TensorId::BMAT_B1, TensorId::BMAT_W2, TensorId::BMAT_B2).reshape(dz, m);
    let decoder = head(TensorId::CMAT_W1, TensorId::CMAT_B1, TensorId::CMAT_W2, TensorId::CMAT_B2).reshape(n, dz);
    let rates = t(TensorId::A_RAW).as_slice().iter().map(|&v| neg_celu(v)).collect();
    let bundle = OperatorBundle {
        rates,
        delta,
        input,
        decoder,
        control_mean,
        control_std,
    };
    if !bundle.is_finite() {
        return Err(ModelError::Numerics(crate::NumericsError::NonFinite { op: "generate_operators" }));
    }
    Ok(bundle)
}

/// The control-dependent part of the drift: `P(u) = Σ_j u_j G_j`.
#[derive(Debug, Clone, PartialEq)]
pub struct Coupling {
    pub generators: Vec<Matrix>,
    pub period: f64,
}

impl Coupling {
    pub fn from_params(params: &ModelParams) -> Self {
        Self {
            generators: params.coupling_matrices(),
            period: params.config.coupling_period,
        }
    }

    pub fn none() -> Self {
        Self {
            generators: Vec::new(),
            period: 1.0,
        }
    }

    pub fn is_zero(&self) -> bool {
        self.generators.iter().all(|g| g.max_abs() == 0.0)
    }

    /// `Σ_j u_j G_j · T`; zero without generators.
    pub fn generator(&self, u: &[f64], dim: usize) -> Matrix {
        let mut p = Matrix::zeros(dim, dim);
        for (g, &uj) in self.generators.iter().zip(u) {
            p.axpy(uj * self.period, g);
        }
        p
    }
}

/// Intermediate factors of one split step at a fixed control.
#[derive(Debug, Clone, PartialEq)]
pub struct LieTrotterStep {
    /// `exp(a ⊙ δ)`.
    pub decay: Vec<f64>,
    /// `diag(φ₁(a, δ))·B`.
    pub input_zoh: Matrix,
    /// `exp(P(u)T)`.
    pub coupling_exp: Matrix,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DiscreteOperators {
    pub a: Matrix,
    pub b: Matrix,
}

impl LieTrotterStep {
    pub fn new(bundle: &OperatorBundle, coupling: &Coupling, u: &[f64]) -> Result<Self, ModelError> {
        let dz = bundle.latent_dim();
        let decay: Vec<f64> = bundle.rates.iter().zip(&bundle.delta).map(|(a, d)| (a * d).exp()).collect();
        let phi = phi1(&bundle.rates, &bundle.delta);
        let mut input_zoh = bundle.input.clone();
        for (i, p) in phi.iter().enumerate() {
            for v in input_zoh.row_mut(i) {
                *v *= p;
            }
        }
        let coupling_exp = matrix_exp(&coupling.generator(u, dz))?;
        Ok(Self {
            decay,
            input_zoh,
            coupling_exp,
        })
    }

    /// `E_D z + B_diag u`, the state after the diagonal half-step.
    pub fn diagonal_half(&self, z: &[f64], u: &[f64]) -> Vec<f64> {
        let mut y = self.input_zoh.matvec(u);
        for ((yi, d), zi) in y.iter_mut().zip(&self.decay).zip(z) {
            *yi += d * zi;
        }
        y
    }

    /// `E_P (E_D z + B_diag u)`.
    pub fn apply(&self, z: &[f64], u: &[f64]) -> Vec<f64> {
        self.coupling_exp.matvec(&self.diagonal_half(z, u))
    }

    pub fn operators(&self) -> DiscreteOperators {
        let mut a = self.coupling_exp.clone();
        let dz = a.rows();
        for i in 0..dz {
            for (j, d) in self.decay.iter().enumerate() {
                a[(i, j)] *= d;
            }
        }
        DiscreteOperators {
            a,
            b: self.coupling_exp.matmul(&self.input_zoh),
        }
    }
}

/// `A_disc = E_P E_D` and `B_disc = E_P B_diag` at control `u` (model units).
pub fn discretize(bundle: &OperatorBundle, coupling: &Coupling, u: &[f64]) -> Result<DiscreteOperators, ModelError> {
    Ok(LieTrotterStep::new(bundle, coupling, u)?.operators())
}

/// Latent states `z_0..z_N` and decodings `C z_0..C z_N` for controls
/// `u_0..u_{N−1}` in model units.
pub fn rollout(
    bundle: &OperatorBundle,
    coupling: &Coupling,
    z0: &[f64],
    controls: &[Vec<f64>],
) -> Result<(Vec<Vec<f64>>, Vec<Vec<f64>>), ModelError> {
    let mut zs = Vec::with_capacity(controls.len() + 1);
    zs.push(z0.to_vec());
    for u in controls {
        let step = LieTrotterStep::new(bundle, coupling, u)?;
        let next = step.apply(zs.last().expect("non-empty"), u);
        zs.push(next);
    }
    let xs = zs.iter().map(|z| bundle.decode(z)).collect();
    Ok((zs, xs))
}

/// `Σ_j max(0, |λ_j| − 1 + margin)`.
pub fn spectral_penalty(a_disc: &Matrix, margin: f64) -> Result<f64, ModelError> {
    let threshold = 1.0 - margin;
    Ok(eig_moduli(a_disc)?.iter().map(|r| (r - threshold).max(0.0)).sum())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{ModelConfig, ModelKind};
    use crate::numerics::phi1_scalar;
    use crate::simulators::Preset;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(rng: &mut ChaCha8Rng, r: usize, c: usize, s: f64) -> Matrix {
        Matrix::from_vec(r, c, (0..r * c).map(|_| rng.gen_range(-s..s)).collect()).unwrap()
    }

    fn scalar_bundle(rate: f64, delta: f64, b: f64) -> OperatorBundle {
        OperatorBundle {
            rates: vec![rate],
            delta: vec![delta],
            input: Matrix::scalar(b),
            decoder: Matrix::scalar(1.0),
            control_mean: vec![0.0],
            control_std: vec![1.0],
        }
    }

    fn random_bundle(rng: &mut ChaCha8Rng, dz: usize, m: usize, n: usize) -> OperatorBundle {
        OperatorBundle {
            rates: (0..dz).map(|_| rng.gen_range(-1.0..0.0)).collect(),
            delta: (0..dz).map(|_| rng.gen_range(0.05..1.5)).collect(),
            input: random(rng, dz, m, 1.0),
            decoder: random(rng, n, dz, 1.0),
            control_mean: vec![0.0; m],
            control_std: vec![1.0; m],
        }
    }

    #[test]
    fn scalar_closed_form_step() {
        let b = 0.7;
        let bundle = scalar_bundle(-1.0, 0.1, b);
        let coupling = Coupling {
            generators: vec![Matrix::scalar(1.0)],
            period: 1.0,
        };
        let d = discretize(&bundle, &coupling, &[1.0]).unwrap();
        assert!((d.a[(0, 0)] - 1f64.exp() * (-0.1f64).exp()).abs() < 1e-13);
        assert!((d.a[(0, 0)] - 2.45960).abs() < 5e-6);
        let expected_b = 1f64.exp() * 0.0951626 * b;
        assert!((d.b[(0, 0)] - expected_b).abs() < 1e-6);
    }

    #[test]
    fn zero_coupling_is_diagonal_zoh() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let bundle = random_bundle(&mut rng, 5, 2, 3);
        let coupling = Coupling {
            generators: vec![Matrix::zeros(5, 5); 2],
            period: 1.0,
        };
        let d = discretize(&bundle, &coupling, &[0.3, -2.0]).unwrap();
        for i in 0..5 {
            for j in 0..5 {
                let expected = if i == j { (bundle.rates[i] * bundle.delta[i]).exp() } else { 0.0 };
                assert_eq!(d.a[(i, j)], expected);
            }
            for j in 0..2 {
                assert_eq!(d.b[(i, j)], phi1_scalar(bundle.rates[i], bundle.delta[i]) * bundle.input[(i, j)]);
            }
        }
    }

    #[test]
    fn scalar_rollout_is_geometric() {
        let bundle = scalar_bundle(-0.3, 0.5, 0.2);
        let (a, b) = ((-0.15f64).exp(), phi1_scalar(-0.3, 0.5) * 0.2);
        let us: Vec<Vec<f64>> = (0..10).map(|k| vec![(k as f64).sin()]).collect();
        let (zs, xs) = rollout(&bundle, &Coupling::none(), &[1.0], &us).unwrap();
        let mut z = 1.0;
        for k in 0..10 {
            z = a * z + b * us[k][0];
            assert!((zs[k + 1][0] - z).abs() < 1e-14);
            assert_eq!(xs[k + 1][0], zs[k + 1][0]);
        }
    }

    #[test]
    fn zero_controls_ignore_coupling() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let bundle = random_bundle(&mut rng, 4, 2, 2);
        let coupling = Coupling {
            generators: vec![random(&mut rng, 4, 4, 1.0), random(&mut rng, 4, 4, 1.0)],
            period: 1.0,
        };
        let us = vec![vec![0.0, 0.0]; 12];
        let z0 = [0.3, -0.2, 1.0, 0.5];
        let with = rollout(&bundle, &coupling, &z0, &us).unwrap();
        let without = rollout(&bundle, &Coupling::none(), &z0, &us).unwrap();
        assert_eq!(with, without);
    }

    #[test]
    fn splitting_error_is_second_order() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let dz = 4;
        let d: Vec<f64> = (0..dz).map(|_| rng.gen_range(-1.0..0.0)).collect();
        let p = random(&mut rng, dz, dz, 0.5);
        let err = |t: f64| {
            let mut sum = p.scale(t);
            for i in 0..dz {
                sum[(i, i)] += d[i] * t;
            }
            let dense = matrix_exp(&sum).unwrap();
            let diag: Vec<f64> = d.iter().map(|v| (v * t).exp()).collect();
            let split = &matrix_exp(&p.scale(t)).unwrap() * &Matrix::diag(&diag);
            (&dense - &split).norm_fro()
        };
        let ratio = err(0.1) / err(0.05);
        assert!((ratio - 4.0).abs() < 0.5, "ratio {ratio}");
    }

    #[test]
    fn step_is_affine_in_state_with_exact_jacobian() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let bundle = random_bundle(&mut rng, 3, 1, 2);
        let coupling = Coupling {
            generators: vec![random(&mut rng, 3, 3, 0.5)],
            period: 1.0,
        };
        let u = [0.8];
        let step = LieTrotterStep::new(&bundle, &coupling, &u).unwrap();
        let ops = step.operators();
        let (z1, z2) = ([0.1, 0.2, -0.4], [1.0, -0.5, 0.3]);
        let combo: Vec<f64> = z1.iter().zip(&z2).map(|(a, b)| 2.0 * a - 0.5 * b).collect();
        let base = step.apply(&[0.0; 3], &u);
        let (f1, f2, fc) = (step.apply(&z1, &u), step.apply(&z2, &u), step.apply(&combo, &u));
        for i in 0..3 {
            let lin = 2.0 * (f1[i] - base[i]) - 0.5 * (f2[i] - base[i]) + base[i];
            assert!((fc[i] - lin).abs() < 1e-13);
            let az: f64 = (0..3).map(|j| ops.a[(i, j)] * z1[j]).sum::<f64>() + ops.b[(i, 0)] * u[0];
            assert!((f1[i] - az).abs() < 1e-13);
        }
    }

    #[test]
    fn coupling_creates_state_control_interaction() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let bundle = random_bundle(&mut rng, 3, 1, 2);
        let g = random(&mut rng, 3, 3, 1.0);
        let t = 1e-3;
        let coupling = Coupling {
            generators: vec![g.clone()],
            period: t,
        };
        let linear = Coupling::none();
        let h = 1e-3;
        // d/du of the z-Jacobian column e_0
        let cross = |c: &Coupling| {
            let jac = |u: f64| discretize(&bundle, c, &[u]).unwrap().a;
            (&jac(h) - &jac(-h)).scale(0.5 / h)
        };
        let mixed = cross(&coupling);
        let expected = &g.scale(t) * &Matrix::diag(&step_decay(&bundle));
        assert!(mixed.max_abs() > 0.0);
        assert!((&mixed - &expected).max_abs() < 1e-5 * expected.max_abs());
        assert!(cross(&linear).max_abs() <= 1e-9);
    }

    fn step_decay(b: &OperatorBundle) -> Vec<f64> {
        b.rates.iter().zip(&b.delta).map(|(a, d)| (a * d).exp()).collect()
    }

    #[test]
    fn penalty_examples() {
        assert_eq!(spectral_penalty(&Matrix::diag(&[0.9, 0.5]), 0.05).unwrap(), 0.0);
        assert!((spectral_penalty(&Matrix::diag(&[1.1]), 0.05).unwrap() - 0.15).abs() < 1e-14);
    }

    fn model(preset: Preset, kind: ModelKind, seed: u64) -> ModelParams {
        ModelParams::init(ModelConfig::for_preset(preset, kind), seed).unwrap()
    }

    fn random_history(rng: &mut ChaCha8Rng, p: &ModelParams) -> (Matrix, Matrix) {
        let c = &p.config;
        let xs = random(rng, c.lookback, c.state_dim, 2.0);
        (encode_rows(p, &xs), random(rng, c.lookback, c.control_dim, 2.0))
    }

    #[test]
    fn zero_encoder_weights_return_bias() {
        let mut p = model(Preset::CartpoleTi, ModelKind::Linear, 1);
        *p.tensor_mut(TensorId::ENC_W2) = Matrix::zeros(64, 8);
        let z = encode(&p, &[0.3, 1.0, -2.0, 0.1]);
        assert_eq!(z, p.tensor(TensorId::ENC_B2).as_slice());
    }

    #[test]
    fn constant_history_is_shift_invariant() {
        let p = model(Preset::RscpTi, ModelKind::Bilinear, 2);
        let x = Matrix::from_vec(30, 9, (0..30).flat_map(|_| (0..9).map(|i| i as f64 * 0.1)).collect()).unwrap();
        let z = encode_rows(&p, &x);
        let u = Matrix::filled(30, 3, 0.4);
        let a = generate_operators(&p, &z, &u).unwrap();
        let b = generate_operators(&p, &z.clone(), &u.clone()).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.control_std, vec![0.5; 3]);
        assert!(a.control_mean.iter().all(|m| (m - 0.4).abs() < 1e-14));
    }

    #[test]
    fn warmup_history_gives_finite_bundle() {
        let p = model(Preset::CartpoleTv, ModelKind::Bilinear, 3);
        let x = Matrix::zeros(30, 4);
        let b = generate_operators(&p, &encode_rows(&p, &x), &Matrix::zeros(30, 1)).unwrap();
        assert!(b.is_finite() && b.delta.iter().all(|&d| d > 0.0));
    }

    #[test]
    fn short_history_is_rejected() {
        let p = model(Preset::CartpoleTi, ModelKind::Linear, 1);
        let z = Matrix::zeros(29, 8);
        assert!(generate_operators(&p, &z, &Matrix::zeros(29, 1)).is_err());
    }

    #[test]
    fn initial_penalty_is_inactive() {
        let p = model(Preset::RscpTv, ModelKind::Bilinear, 4);
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let coupling = Coupling::from_params(&p);
        for _ in 0..20 {
            let (z, u) = random_history(&mut rng, &p);
            let b = generate_operators(&p, &z, &u).unwrap();
            let d = discretize(&b, &coupling, &[1.0, -1.0, 0.5]).unwrap();
            assert_eq!(spectral_penalty(&d.a, 0.05).unwrap(), 0.0);
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn timescales_stay_positive(seed in 0u64..10_000, scale in 0.1f64..20.0) {
            let mut p = model(Preset::CartpoleTi, ModelKind::Linear, seed);
            let b2 = p.tensor(TensorId::DELTA_B2).map(|v| v * scale - scale);
            *p.tensor_mut(TensorId::DELTA_B2) = b2;
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let (z, u) = random_history(&mut rng, &p);
            let b = generate_operators(&p, &z, &u).unwrap();
            prop_assert!(b.delta.iter().all(|&d| d > 0.0));
        }

        #[test]
        fn penalty_is_monotone_in_moduli(a in 0.0f64..2.0, b in 0.0f64..2.0, bump in 0.0f64..0.5) {
            let p0 = spectral_penalty(&Matrix::diag(&[a, b]), 0.05).unwrap();
            let p1 = spectral_penalty(&Matrix::diag(&[a + bump, b]), 0.05).unwrap();
            prop_assert!(p1 >= p0);
        }

        #[test]
        fn zero_factors_match_linear(seed in 0u64..1000) {
            let lin = model(Preset::RscpTi, ModelKind::Linear, seed);
            let bil = lin.with_kind(ModelKind::Bilinear);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let (z, u) = random_history(&mut rng, &lin);
            let b = generate_operators(&lin, &z, &u).unwrap();
            prop_assert_eq!(&b, &generate_operators(&bil, &z, &u).unwrap());
            let us: Vec<Vec<f64>> = (0..30).map(|_| (0..3).map(|_| rng.gen_range(-3.0..3.0)).collect()).collect();
            let z0 = z.row(29).to_vec();
            let a = rollout(&b, &Coupling::from_params(&lin), &z0, &us).unwrap();
            let c = rollout(&b, &Coupling::from_params(&bil), &z0, &us).unwrap();
            prop_assert_eq!(a, c);
        }
    }
}
