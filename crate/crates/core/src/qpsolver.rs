//! Dense box-constrained convex QP by ADMM.
//!
//! Solves `min ½xᵀHx + gᵀx` subject to `lb ≤ x ≤ ub` with the splitting
//! `x = z`, `z ∈ [lb, ub]`, over-relaxation and periodic residual-balancing
//! of the penalty. The problem is Jacobi-equilibrated and cost-scaled
//! before iterating. On convergence the active set read off the duals is
//! used to solve the reduced equality system exactly (polishing).

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::numerics::{Cholesky, Lu, Matrix};

#[derive(Debug, Error)]
pub enum QpError {
    #[error("dimension mismatch: Hessian {hessian:?}, gradient {gradient}, bounds {lower}/{upper}")]
    Dimension {
        hessian: (usize, usize),
        gradient: usize,
        lower: usize,
        upper: usize,
    },
    #[error("problem data contains NaN or infinite objective terms")]
    NonFinite,
    #[error("Hessian is not positive semidefinite")]
    NotConvex,
}

#[derive(Debug, Clone, PartialEq)]
pub struct QpProblem {
    pub hessian: Matrix,
    pub gradient: Vec<f64>,
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
}

impl QpProblem {
    /// Symmetrizes the Hessian on intake.
    pub fn new(hessian: Matrix, gradient: Vec<f64>, lower: Vec<f64>, upper: Vec<f64>) -> Result<Self, QpError> {
        let n = gradient.len();
        if hessian.shape() != (n, n) || lower.len() != n || upper.len() != n {
            return Err(QpError::Dimension {
                hessian: hessian.shape(),
                gradient: n,
                lower: lower.len(),
                upper: upper.len(),
            });
        }
        if !hessian.is_finite() || gradient.iter().any(|v| !v.is_finite()) || lower.iter().chain(&upper).any(|v| v.is_nan())
        {
            return Err(QpError::NonFinite);
        }
        Ok(Self {
            hessian: hessian.symmetrized(),
            gradient,
            lower,
            upper,
        })
    }

    pub fn dim(&self) -> usize {
        self.gradient.len()
    }

    pub fn objective(&self, x: &[f64]) -> f64 {
        let hx = self.hessian.matvec(x);
        x.iter().zip(&hx).zip(&self.gradient).map(|((xi, hi), gi)| 0.5 * xi * hi + gi * xi).sum()
    }

    pub fn project(&self, x: &[f64]) -> Vec<f64> {
        x.iter()
            .zip(self.lower.iter().zip(&self.upper))
            .map(|(v, (l, u))| v.clamp(*l, *u))
            .collect()
    }

    fn box_is_empty(&self) -> bool {
        self.lower.iter().zip(&self.upper).any(|(l, u)| l > u)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct QpSettings {
    pub rho: f64,
    pub sigma: f64,
    pub alpha: f64,
    pub eps_abs: f64,
    pub eps_rel: f64,
    pub max_iter: usize,
    pub adapt_interval: usize,
    pub polish: bool,
}

impl Default for QpSettings {
    fn default() -> Self {
        Self {
            rho: 0.1,
            sigma: 1e-6,
            alpha: 1.6,
            eps_abs: 1e-6,
            eps_rel: 1e-6,
            max_iter: 4000,
            adapt_interval: 25,
            polish: true,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum QpStatus {
    Solved,
    MaxIter,
    InfeasibleBox,
}

#[derive(Debug, Clone, PartialEq)]
pub struct QpSolution {
    pub x: Vec<f64>,
    /// Box multipliers: negative where the lower bound binds, positive at
    /// the upper bound.
    pub y: Vec<f64>,
    pub objective: f64,
    pub primal_residual: f64,
    pub dual_residual: f64,
    pub iterations: usize,
    pub status: QpStatus,
    pub polished: bool,
}

/// `(‖x − Π(x)‖∞, ‖Hx + g + y‖∞)`.
pub fn kkt_residual(p: &QpProblem, x: &[f64], y: &[f64]) -> (f64, f64) {
    let proj = p.project(x);
    let primal = x.iter().zip(&proj).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    let hx = p.hessian.matvec(x);
    let dual = hx
        .iter()
        .zip(&p.gradient)
        .zip(y)
        .map(|((h, g), yi)| (h + g + yi).abs())
        .fold(0.0, f64::max);
    (primal, dual)
}

fn inf_norm(v: &[f64]) -> f64 {
    v.iter().fold(0.0, |a, b| a.max(b.abs()))
}

fn factor_shifted(h: &Matrix, shift: f64) -> Result<Cholesky, QpError> {
    let mut k = h.clone();
    k.add_identity(shift);
    match Cholesky::factor(&k) {
        Ok(c) => Ok(c),
        Err(_) => {
            k.add_identity(1e-9);
            Cholesky::factor(&k).map_err(|_| QpError::NotConvex)
        }
    }
}

/// The equilibrated problem: `x = D x̄` and the objective times `c`.
struct Scaled {
    d: Vec<f64>,
    c: f64,
    p: QpProblem,
}

fn equilibrate(p: &QpProblem) -> Scaled {
    let n = p.dim();
    let d: Vec<f64> = (0..n)
        .map(|i| {
            let h = p.hessian[(i, i)];
            if h > 0.0 {
                1.0 / h.sqrt()
            } else {
                1.0
            }
        })
        .collect();
    let mut h = p.hessian.clone();
    for i in 0..n {
        for j in 0..n {
            h[(i, j)] *= d[i] * d[j];
        }
    }
    let g: Vec<f64> = p.gradient.iter().zip(&d).map(|(g, di)| g * di).collect();
    let scale = (0..n).map(|i| h[(i, i)]).fold(0.0, f64::max).max(inf_norm(&g)).max(1e-12);
    let c = 1.0 / scale;
    Scaled {
        p: QpProblem {
            hessian: h.scale(c),
            gradient: g.iter().map(|v| v * c).collect(),
            lower: p.lower.iter().zip(&d).map(|(l, di)| l / di).collect(),
            upper: p.upper.iter().zip(&d).map(|(u, di)| u / di).collect(),
        },
        d,
        c,
    }
}

/// Solves the box QP, optionally seeding primal and dual iterates from a
/// previous solution of a problem with the same dimension.
pub fn solve_box_qp(p: &QpProblem, warm: Option<&QpSolution>, settings: &QpSettings) -> Result<QpSolution, QpError> {
    let n = p.dim();
    if p.box_is_empty() {
        return Ok(QpSolution {
            x: vec![f64::NAN; n],
            y: vec![0.0; n],
            objective: f64::NAN,
            primal_residual: f64::INFINITY,
            dual_residual: f64::INFINITY,
            iterations: 0,
            status: QpStatus::InfeasibleBox,
            polished: false,
        });
    }
    if n == 0 {
        return Ok(QpSolution {
            x: Vec::new(),
            y: Vec::new(),
            objective: 0.0,
            primal_residual: 0.0,
            dual_residual: 0.0,
            iterations: 0,
            status: QpStatus::Solved,
            polished: false,
        });
    }
    let s = equilibrate(p);
    let sp = &s.p;
    let (mut x, mut y) = match warm.filter(|w| w.x.len() == n && w.x.iter().all(|v| v.is_finite())) {
        Some(w) => (
            w.x.iter().zip(&s.d).map(|(v, d)| v / d).collect::<Vec<_>>(),
            w.y.iter().zip(&s.d).map(|(v, d)| v * d * s.c).collect::<Vec<_>>(),
        ),
        None => (vec![0.0; n], vec![0.0; n]),
    };
    let mut z = sp.project(&x);
    let mut rho = settings.rho;
    let sigma = settings.sigma;
    let alpha = settings.alpha;
    let mut chol = factor_shifted(&sp.hessian, sigma + rho)?;
    let mut status = QpStatus::MaxIter;
    let mut iterations = 0;
    let mut rhs = vec![0.0; n];
    for it in 1..=settings.max_iter {
        iterations = it;
        for i in 0..n {
            rhs[i] = sigma * x[i] - sp.gradient[i] + rho * z[i] - y[i];
        }
        let xt = chol.solve_vec(&rhs);
        let z_prev = z.clone();
        for i in 0..n {
            let relaxed = alpha * xt[i] + (1.0 - alpha) * z_prev[i];
            x[i] = alpha * xt[i] + (1.0 - alpha) * x[i];
            z[i] = (relaxed + y[i] / rho).clamp(sp.lower[i], sp.upper[i]);
            y[i] += rho * (relaxed - z[i]);
        }
        let hx = sp.hessian.matvec(&x);
        let prim = x.iter().zip(&z).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        let dual = (0..n).map(|i| (hx[i] + sp.gradient[i] + y[i]).abs()).fold(0.0, f64::max);
        let prim_scale = inf_norm(&x).max(inf_norm(&z));
        let dual_scale = inf_norm(&hx).max(inf_norm(&sp.gradient)).max(inf_norm(&y));
        let prim_tol = settings.eps_abs.max(settings.eps_rel * prim_scale);
        let dual_tol = settings.eps_abs.max(settings.eps_rel * dual_scale);
        if prim <= prim_tol && dual <= dual_tol {
            status = QpStatus::Solved;
            break;
        }
        if settings.adapt_interval > 0 && it % settings.adapt_interval == 0 {
            let ratio = (prim / prim_scale.max(1e-12)) / (dual / dual_scale.max(1e-12)).max(1e-12);
            let new_rho = (rho * ratio.sqrt()).clamp(1e-6, 1e6);
            if new_rho > 5.0 * rho || new_rho < 0.2 * rho {
                rho = new_rho;
                chol = factor_shifted(&sp.hessian, sigma + rho)?;
            }
        }
    }
    // the box-feasible iterate
    let mut xs = z;
    let mut ys = y;
    let mut polished = false;
    if settings.polish {
        if let Some((px, py)) = polish(sp, &xs, &ys) {
            let (p0, d0) = kkt_residual(sp, &xs, &ys);
            let (p1, d1) = kkt_residual(sp, &px, &py);
            if p1 <= p0.max(1e-12) && d1 <= d0.max(1e-12) {
                xs = px;
                ys = py;
                polished = true;
                status = QpStatus::Solved;
            }
        }
    }
    let x: Vec<f64> = xs.iter().zip(&s.d).map(|(v, d)| v * d).collect();
    let x = p.project(&x);
    let y: Vec<f64> = ys.iter().zip(&s.d).map(|(v, d)| v / (d * s.c)).collect();
    let (primal_residual, dual_residual) = kkt_residual(p, &x, &y);
    Ok(QpSolution {
        objective: p.objective(&x),
        x,
        y,
        primal_residual,
        dual_residual,
        iterations,
        status,
        polished,
    })
}

/// Solves the equality system on the guessed active set and checks the
/// result is a KKT point.
fn polish(p: &QpProblem, z: &[f64], y: &[f64]) -> Option<(Vec<f64>, Vec<f64>)> {
    let n = p.dim();
    #[derive(Clone, Copy, PartialEq)]
    enum Side {
        Free,
        Lower,
        Upper,
    }
    let sides: Vec<Side> = (0..n)
        .map(|i| {
            if p.lower[i].is_finite() && z[i] - p.lower[i] < -y[i] {
                Side::Lower
            } else if p.upper[i].is_finite() && p.upper[i] - z[i] < y[i] {
                Side::Upper
            } else {
                Side::Free
            }
        })
        .collect();
    let mut x = vec![0.0; n];
    for i in 0..n {
        x[i] = match sides[i] {
            Side::Lower => p.lower[i],
            Side::Upper => p.upper[i],
            Side::Free => 0.0,
        };
    }
    let free: Vec<usize> = (0..n).filter(|&i| sides[i] == Side::Free).collect();
    if !free.is_empty() {
        let k = free.len();
        let mut hff = Matrix::zeros(k, k);
        let mut rhs = vec![0.0; k];
        for (a, &i) in free.iter().enumerate() {
            for (b, &j) in free.iter().enumerate() {
                hff[(a, b)] = p.hessian[(i, j)];
            }
            rhs[a] = -p.gradient[i] - (0..n).filter(|&j| sides[j] != Side::Free).map(|j| p.hessian[(i, j)] * x[j]).sum::<f64>();
        }
        let sol = match Cholesky::factor(&hff) {
            Ok(c) => c.solve_vec(&rhs),
            Err(_) => Lu::factor(&hff).ok()?.solve_vec(&rhs),
        };
        for (a, &i) in free.iter().enumerate() {
            x[i] = sol[a];
        }
    }
    if x.iter().any(|v| !v.is_finite()) {
        return None;
    }
    let hx = p.hessian.matvec(&x);
    let mut yp = vec![0.0; n];
    let tol = 1e-9 * (1.0 + inf_norm(&x));
    for i in 0..n {
        match sides[i] {
            Side::Free => {
                if x[i] < p.lower[i] - tol || x[i] > p.upper[i] + tol {
                    return None;
                }
            }
            Side::Lower => yp[i] = (-(hx[i] + p.gradient[i])).min(0.0),
            Side::Upper => yp[i] = (-(hx[i] + p.gradient[i])).max(0.0),
        }
    }
    Some((p.project(&x), yp))
}

/// Exhaustive reference solver for small strictly convex problems: tries
/// every assignment of each coordinate to free, lower or upper and returns
/// the KKT point. Exponential in the dimension.
pub fn solve_by_enumeration(p: &QpProblem) -> Option<Vec<f64>> {
    let n = p.dim();
    let total = 3usize.checked_pow(n as u32)?;
    let mut best: Option<(f64, Vec<f64>)> = None;
    for code in 0..total {
        let mut c = code;
        let mut side = vec![0u8; n];
        for s in side.iter_mut() {
            *s = (c % 3) as u8;
            c /= 3;
        }
        if (0..n).any(|i| (side[i] == 1 && !p.lower[i].is_finite()) || (side[i] == 2 && !p.upper[i].is_finite())) {
            continue;
        }
        let mut x: Vec<f64> = (0..n)
            .map(|i| match side[i] {
                1 => p.lower[i],
                2 => p.upper[i],
                _ => 0.0,
            })
            .collect();
        let free: Vec<usize> = (0..n).filter(|&i| side[i] == 0).collect();
        if !free.is_empty() {
            let k = free.len();
            let mut hff = Matrix::zeros(k, k);
            let mut rhs = vec![0.0; k];
            for (a, &i) in free.iter().enumerate() {
                for (b, &j) in free.iter().enumerate() {
                    hff[(a, b)] = p.hessian[(i, j)];
                }
                rhs[a] = -p.gradient[i] - (0..n).filter(|&j| side[j] != 0).map(|j| p.hessian[(i, j)] * x[j]).sum::<f64>();
            }
            let Ok(lu) = Lu::factor(&hff) else { continue };
            let sol = lu.solve_vec(&rhs);
            for (a, &i) in free.iter().enumerate() {
                x[i] = sol[a];
            }
        }
        let feasible = (0..n).all(|i| x[i] >= p.lower[i] - 1e-12 && x[i] <= p.upper[i] + 1e-12);
        if !feasible {
            continue;
        }
        let grad: Vec<f64> = p.hessian.matvec(&x).iter().zip(&p.gradient).map(|(h, g)| h + g).collect();
        let scale = 1e-9 * (1.0 + inf_norm(&grad));
        let kkt = (0..n).all(|i| match side[i] {
            1 => grad[i] >= -scale,
            2 => grad[i] <= scale,
            _ => true,
        });
        if kkt {
            let f = p.objective(&x);
            if best.as_ref().is_none_or(|(bf, _)| f < *bf) {
                best = Some((f, x));
            }
        }
    }
    best.map(|(_, x)| x)
}
