use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::ModelError;
use crate::numerics::Matrix;
use crate::simulators::Preset;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelKind {
    /// Diagonal drift only; the discrete step is the per-mode ZOH map.
    Linear,
    /// Diagonal drift plus low-rank control coupling.
    Bilinear,
}

impl ModelKind {
    pub fn name(self) -> &'static str {
        match self {
            ModelKind::Linear => "linear",
            ModelKind::Bilinear => "bilinear",
        }
    }
}

impl fmt::Display for ModelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ModelKind {
    type Err = ModelError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "linear" => Ok(ModelKind::Linear),
            "bilinear" => Ok(ModelKind::Bilinear),
            other => Err(ModelError::Contract(format!("unknown model kind `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub kind: ModelKind,
    pub state_dim: usize,
    pub control_dim: usize,
    pub latent_dim: usize,
    pub rank: usize,
    pub lookback: usize,
    pub horizon: usize,
    pub kernel: usize,
    pub hidden: usize,
    pub penalty_weight: f64,
    pub penalty_margin: f64,
    /// Coupling period `T` in `exp(P(u)T)`.
    pub coupling_period: f64,
    /// Lower bound on the per-channel history control std used for
    /// instance normalization, in dataset-normalized units.
    pub control_std_floor: f64,
}

impl ModelConfig {
    pub fn for_preset(preset: Preset, kind: ModelKind) -> Self {
        let cfg = preset.config();
        let (latent_dim, kernel) = if preset.is_cartpole() { (8, 15) } else { (15, 5) };
        Self {
            kind,
            state_dim: cfg.state_dim(),
            control_dim: cfg.control_dim(),
            latent_dim,
            rank: latent_dim,
            lookback: 30,
            horizon: 30,
            kernel,
            hidden: 64,
            penalty_weight: match kind {
                ModelKind::Linear => 0.0,
                ModelKind::Bilinear => 0.01,
            },
            penalty_margin: 0.05,
            coupling_period: 1.0,
            control_std_floor: 0.5,
        }
    }

    pub fn channels(&self) -> usize {
        self.latent_dim + self.control_dim
    }

    pub fn feature_dim(&self) -> usize {
        (self.lookback - self.kernel + 1) * self.channels()
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let ok = self.state_dim > 0
            && self.control_dim > 0
            && self.latent_dim > 0
            && self.hidden > 0
            && self.kernel > 0
            && self.kernel <= self.lookback
            && self.horizon > 0
            && self.coupling_period.is_finite()
            && self.control_std_floor > 0.0
            && (self.kind == ModelKind::Linear || self.rank > 0);
        if ok {
            Ok(())
        } else {
            Err(ModelError::Contract(format!("invalid model configuration {self:?}")))
        }
    }
}

/// Index of a parameter tensor in declaration order. Coupling factors
/// follow the backbone: `L_j` at `COUPLING + 2j`, `R_j` at `COUPLING + 2j + 1`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TensorId;

impl TensorId {
    pub const ENC_W1: usize = 0;
    pub const ENC_B1: usize = 1;
    pub const ENC_W2: usize = 2;
    pub const ENC_B2: usize = 3;
    pub const A_RAW: usize = 4;
    pub const CONV_W: usize = 5;
    pub const CONV_B: usize = 6;
    pub const DELTA_W1: usize = 7;
    pub const DELTA_B1: usize = 8;
    pub const DELTA_W2: usize = 9;
    pub const DELTA_B2: usize = 10;
    pub const BMAT_W1: usize = 11;
    pub const BMAT_B1: usize = 12;
    pub const BMAT_W2: usize = 13;
    pub const BMAT_B2: usize = 14;
    pub const CMAT_W1: usize = 15;
    pub const CMAT_B1: usize = 16;
    pub const CMAT_W2: usize = 17;
    pub const CMAT_B2: usize = 18;
    pub const COUPLING: usize = 19;

    pub fn coupling_left(j: usize) -> usize {
        Self::COUPLING + 2 * j
    }

    pub fn coupling_right(j: usize) -> usize {
        Self::COUPLING + 2 * j + 1
    }
}

const BACKBONE_NAMES: [&str; 19] = [
    "enc_w1", "enc_b1", "enc_w2", "enc_b2", "a_raw", "conv_w", "conv_b", "delta_w1", "delta_b1", "delta_w2",
    "delta_b2", "bmat_w1", "bmat_b1", "bmat_w2", "bmat_b2", "cmat_w1", "cmat_b1", "cmat_w2", "cmat_b2",
];

/// Timescale head bias at initialization; `softplus` of it is 1.
///
/// With the head's output layer bounded by `0.1/√hidden` per weight, every
/// initial timescale is at least `softplus(DELTA_BIAS_INIT − 0.81) ≈ 0.57`,
/// and with activated rates at most −0.1 every initial diagonal mode has
/// modulus below `e^{−0.057} < 0.95`, so the spectral penalty starts inactive.
pub const DELTA_BIAS_INIT: f64 = 0.541_324_854_612_918;

/// Scale of the random right coupling factors at initialization. The left
/// factors start at zero so every `G_j` is exactly zero.
pub const COUPLING_INIT_SCALE: f64 = 1e-4;

#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub config: ModelConfig,
    pub tensors: Vec<Matrix>,
}

fn uniform(rng: &mut ChaCha8Rng, rows: usize, cols: usize, bound: f64) -> Matrix {
    let data = (0..rows * cols).map(|_| rng.gen_range(-bound..=bound)).collect();
    Matrix::from_vec(rows, cols, data).expect("sized")
}

impl ModelParams {
    /// Expected shape of every tensor, in declaration order.
    pub fn shapes(config: &ModelConfig) -> Vec<(usize, usize)> {
        let (n, m, dz, h, f, c) = (
            config.state_dim,
            config.control_dim,
            config.latent_dim,
            config.hidden,
            config.feature_dim(),
            config.channels(),
        );
        let mut s = vec![
            (n, h),
            (1, h),
            (h, dz),
            (1, dz),
            (1, dz),
            (config.kernel, c),
            (1, c),
            (f, h),
            (1, h),
            (h, dz),
            (1, dz),
            (f, h),
            (1, h),
            (h, dz * m),
            (1, dz * m),
            (f, h),
            (1, h),
            (h, n * dz),
            (1, n * dz),
        ];
        if config.kind == ModelKind::Bilinear {
            for _ in 0..m {
                s.push((dz, config.rank));
                s.push((dz, config.rank));
            }
        }
        s
    }

    pub fn names(config: &ModelConfig) -> Vec<String> {
        let mut names: Vec<String> = BACKBONE_NAMES.iter().map(|s| s.to_string()).collect();
        if config.kind == ModelKind::Bilinear {
            for j in 0..config.control_dim {
                names.push(format!("coupling_l_{j}"));
                names.push(format!("coupling_r_{j}"));
            }
        }
        names
    }

    /// Seeded initialization. The backbone draws come first, so linear and
    /// bilinear models built from the same seed share their backbone.
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self, ModelError> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let shapes = Self::shapes(&config);
        let mut tensors = Vec::with_capacity(shapes.len());
        for (id, &(r, c)) in shapes.iter().enumerate().take(TensorId::COUPLING) {
            let t = match id {
                TensorId::A_RAW => {
                    let data = (0..c).map(|_| rng.gen_range(-1.0..=-0.1)).collect();
                    Matrix::from_vec(r, c, data).expect("sized")
                }
                TensorId::DELTA_B2 => {
                    let mut b = uniform(&mut rng, r, c, 0.1 / (config.hidden as f64).sqrt());
                    b.as_mut_slice().iter_mut().for_each(|v| *v += DELTA_BIAS_INIT);
                    b
                }
                TensorId::CONV_W | TensorId::CONV_B => uniform(&mut rng, r, c, 1.0 / (config.kernel as f64).sqrt()),
                TensorId::DELTA_W2 | TensorId::BMAT_W2 | TensorId::CMAT_W2 => {
                    uniform(&mut rng, r, c, 0.1 / (config.hidden as f64).sqrt())
                }
                TensorId::BMAT_B2 | TensorId::CMAT_B2 => {
                    uniform(&mut rng, r, c, 0.1 / (config.hidden as f64).sqrt())
                }
                _ => {
                    let fan_in = if r == 1 { shapes[id - 1].0 } else { r };
                    uniform(&mut rng, r, c, 1.0 / (fan_in as f64).sqrt())
                }
            };
            tensors.push(t);
        }
        if config.kind == ModelKind::Bilinear {
            for _ in 0..config.control_dim {
                tensors.push(Matrix::zeros(config.latent_dim, config.rank));
                tensors.push(uniform(&mut rng, config.latent_dim, config.rank, COUPLING_INIT_SCALE));
            }
        }
        Ok(Self { config, tensors })
    }

    pub fn from_tensors(config: ModelConfig, tensors: Vec<Matrix>) -> Result<Self, ModelError> {
        config.validate()?;
        let shapes = Self::shapes(&config);
        if shapes.len() != tensors.len() {
            return Err(ModelError::Contract(format!(
                "expected {} tensors, found {}",
                shapes.len(),
                tensors.len()
            )));
        }
        for (i, (t, s)) in tensors.iter().zip(&shapes).enumerate() {
            if t.shape() != *s {
                return Err(ModelError::Contract(format!("tensor {i} has shape {:?}, expected {s:?}", t.shape())));
            }
        }
        Ok(Self { config, tensors })
    }

    pub fn tensor(&self, id: usize) -> &Matrix {
        &self.tensors[id]
    }

    pub fn tensor_mut(&mut self, id: usize) -> &mut Matrix {
        &mut self.tensors[id]
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(Matrix::len).sum()
    }

    /// `G_j = L_j R_jᵀ`; empty for the linear model.
    pub fn coupling_matrices(&self) -> Vec<Matrix> {
        match self.config.kind {
            ModelKind::Linear => Vec::new(),
            ModelKind::Bilinear => (0..self.config.control_dim)
                .map(|j| {
                    self.tensors[TensorId::coupling_left(j)]
                        .matmul(&self.tensors[TensorId::coupling_right(j)].transpose())
                })
                .collect(),
        }
    }

    /// `(Σ_j ‖G_j‖_F²)^{1/2}`.
    pub fn g_norm(&self) -> f64 {
        self.coupling_matrices()
            .iter()
            .map(|g| g.norm_fro().powi(2))
            .sum::<f64>()
            .sqrt()
    }

    /// The same backbone as a model of another kind. Converting to the
    /// bilinear kind adds zero coupling factors.
    pub fn with_kind(&self, kind: ModelKind) -> Self {
        let mut config = self.config;
        config.kind = kind;
        if kind == ModelKind::Linear {
            config.penalty_weight = 0.0;
        }
        let mut tensors: Vec<Matrix> = self.tensors[..TensorId::COUPLING].to_vec();
        if kind == ModelKind::Bilinear {
            for _ in 0..config.control_dim {
                tensors.push(Matrix::zeros(config.latent_dim, config.rank));
                tensors.push(Matrix::zeros(config.latent_dim, config.rank));
            }
        }
        Self { config, tensors }
    }
}
