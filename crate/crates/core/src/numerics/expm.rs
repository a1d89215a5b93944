//! Matrix exponential by scaling and squaring with a degree-13 Padé
//! approximant, plus its Fréchet derivative.
//!
//! The Fréchet derivative `L(M, E)` is the upper-right block of
//! `exp([[M, E], [0, M]])`. The scaling power is always chosen from `‖M‖₁`
//! alone, which keeps `L` linear in `E` up to rounding. [`ExpmFrechet`]
//! evaluates the same quantity for many directions at a fixed `M` without
//! forming the doubled block, reusing the Padé powers of `M`.

use super::{Matrix, NumericsError};

/// Higham's θ₁₃: the largest ‖A‖₁ for which the [13/13] approximant is
/// accurate to unit roundoff in double precision.
const THETA_13: f64 = 5.371_920_351_148_152;

const PADE13: [f64; 14] = [
    64_764_752_532_480_000.0,
    32_382_376_266_240_000.0,
    7_771_770_303_897_600.0,
    1_187_353_796_428_800.0,
    129_060_195_264_000.0,
    10_559_470_521_600.0,
    670_442_572_800.0,
    33_522_128_640.0,
    1_323_241_920.0,
    40_840_800.0,
    960_960.0,
    16_380.0,
    182.0,
    1.0,
];

fn check_square(op: &'static str, m: &Matrix) -> Result<(), NumericsError> {
    if !m.is_square() {
        return Err(NumericsError::NotSquare { op, shape: m.shape() });
    }
    if !m.is_finite() {
        return Err(NumericsError::NonFinite { op });
    }
    Ok(())
}

fn scaling_power(norm: f64) -> u32 {
    if norm <= THETA_13 {
        0
    } else {
        (norm / THETA_13).log2().ceil().max(0.0) as u32
    }
}

/// Linear combination `Σ cᵢ Xᵢ` (+ `c₀ I` when `identity` is given).
fn lincomb(terms: &[(f64, &Matrix)], identity: Option<f64>) -> Matrix {
    let (n, c) = terms[0].1.shape();
    let mut out = Matrix::zeros(n, c);
    for (coef, m) in terms {
        out.axpy(*coef, m);
    }
    if let Some(c0) = identity {
        out.add_identity(c0);
    }
    out
}

struct PadeTerms {
    a2: Matrix,
    a4: Matrix,
    a6: Matrix,
    w1: Matrix,
    w: Matrix,
    z1: Matrix,
    u: Matrix,
    v: Matrix,
}

fn pade_terms(a: &Matrix) -> PadeTerms {
    let b = &PADE13;
    let a2 = a.matmul(a);
    let a4 = a2.matmul(&a2);
    let a6 = a2.matmul(&a4);
    let w1 = lincomb(&[(b[13], &a6), (b[11], &a4), (b[9], &a2)], None);
    let w2 = lincomb(&[(b[7], &a6), (b[5], &a4), (b[3], &a2)], Some(b[1]));
    let z1 = lincomb(&[(b[12], &a6), (b[10], &a4), (b[8], &a2)], None);
    let z2 = lincomb(&[(b[6], &a6), (b[4], &a4), (b[2], &a2)], Some(b[0]));
    let mut w = a6.matmul(&w1);
    w.axpy(1.0, &w2);
    let u = a.matmul(&w);
    let mut v = a6.matmul(&z1);
    v.axpy(1.0, &z2);
    PadeTerms {
        a2,
        a4,
        a6,
        w1,
        w,
        z1,
        u,
        v,
    }
}

/// [13/13] Padé approximant of `exp(A)` followed by `s` squarings.
fn pade13_squared(a: &Matrix, s: u32) -> Result<Matrix, NumericsError> {
    let t = pade_terms(a);
    let p = &t.v + &t.u;
    let q = &t.v - &t.u;
    let mut r = q.solve(&p)?;
    for _ in 0..s {
        r = r.matmul(&r);
    }
    Ok(r)
}

/// `exp(M)` for square, finite `M`.
pub fn matrix_exp(m: &Matrix) -> Result<Matrix, NumericsError> {
    check_square("matrix_exp", m)?;
    let n = m.rows();
    if n == 0 {
        return Ok(Matrix::zeros(0, 0));
    }
    if m.max_abs() == 0.0 {
        return Ok(Matrix::identity(n));
    }
    let s = scaling_power(m.norm_1());
    let a = m.scale(0.5f64.powi(s as i32));
    let out = pade13_squared(&a, s)?;
    if !out.is_finite() {
        return Err(NumericsError::NonFinite { op: "matrix_exp" });
    }
    Ok(out)
}

/// Returns `(exp(M), L(M, E))` using the block-augmented exponential of
/// `[[M, E], [0, M]]`.
pub fn matrix_exp_frechet(m: &Matrix, e: &Matrix) -> Result<(Matrix, Matrix), NumericsError> {
    check_square("matrix_exp_frechet", m)?;
    if e.shape() != m.shape() {
        return Err(NumericsError::DimensionMismatch {
            op: "matrix_exp_frechet",
            expected: m.shape(),
            found: e.shape(),
        });
    }
    if !e.is_finite() {
        return Err(NumericsError::NonFinite {
            op: "matrix_exp_frechet",
        });
    }
    let n = m.rows();
    if n == 0 {
        return Ok((Matrix::zeros(0, 0), Matrix::zeros(0, 0)));
    }
    let s = scaling_power(m.norm_1());
    let scale = 0.5f64.powi(s as i32);
    let mut block = Matrix::zeros(2 * n, 2 * n);
    let ms = m.scale(scale);
    block.set_block(0, 0, &ms);
    block.set_block(n, n, &ms);
    block.set_block(0, n, &e.scale(scale));
    let out = pade13_squared(&block, s)?;
    let exp_m = out.block(0, 0, n, n);
    let frechet = out.block(0, n, n, n);
    if !exp_m.is_finite() || !frechet.is_finite() {
        return Err(NumericsError::NonFinite {
            op: "matrix_exp_frechet",
        });
    }
    Ok((exp_m, frechet))
}

/// Precomputed Padé data for `exp(M)` that evaluates `L(M, E)` for any
/// number of directions `E`.
pub struct ExpmFrechet {
    n: usize,
    s: u32,
    scale: f64,
    a: Matrix,
    terms: PadeTerms,
    denom: super::matrix::Lu,
    /// `R₀ … R_{s-1}`: the approximant before each squaring.
    squares: Vec<Matrix>,
    exp: Matrix,
}

impl ExpmFrechet {
    pub fn new(m: &Matrix) -> Result<Self, NumericsError> {
        check_square("expm_frechet_context", m)?;
        let n = m.rows();
        let s = scaling_power(m.norm_1());
        let scale = 0.5f64.powi(s as i32);
        let a = m.scale(scale);
        let terms = pade_terms(&a);
        let denom = (&terms.v - &terms.u).lu()?;
        let mut r = denom.solve(&(&terms.v + &terms.u))?;
        let mut squares = Vec::with_capacity(s as usize);
        for _ in 0..s {
            let next = r.matmul(&r);
            squares.push(std::mem::replace(&mut r, next));
        }
        if !r.is_finite() {
            return Err(NumericsError::NonFinite {
                op: "expm_frechet_context",
            });
        }
        Ok(Self {
            n,
            s,
            scale,
            a,
            terms,
            denom,
            squares,
            exp: r,
        })
    }

    pub fn exp(&self) -> &Matrix {
        &self.exp
    }

    /// `L(M, E)`.
    pub fn derivative(&self, e: &Matrix) -> Result<Matrix, NumericsError> {
        if e.shape() != (self.n, self.n) {
            return Err(NumericsError::DimensionMismatch {
                op: "expm_frechet_derivative",
                expected: (self.n, self.n),
                found: e.shape(),
            });
        }
        let b = &PADE13;
        let t = &self.terms;
        let a = &self.a;
        let e = e.scale(self.scale);
        let mut m2 = a.matmul(&e);
        m2.axpy(1.0, &e.matmul(a));
        let mut m4 = t.a2.matmul(&m2);
        m4.axpy(1.0, &m2.matmul(&t.a2));
        let mut m6 = t.a4.matmul(&m2);
        m6.axpy(1.0, &m4.matmul(&t.a2));

        let lw1 = lincomb(&[(b[13], &m6), (b[11], &m4), (b[9], &m2)], None);
        let lw2 = lincomb(&[(b[7], &m6), (b[5], &m4), (b[3], &m2)], None);
        let lz1 = lincomb(&[(b[12], &m6), (b[10], &m4), (b[8], &m2)], None);
        let lz2 = lincomb(&[(b[6], &m6), (b[4], &m4), (b[2], &m2)], None);

        let mut lw = t.a6.matmul(&lw1);
        lw.axpy(1.0, &m6.matmul(&t.w1));
        lw.axpy(1.0, &lw2);
        let mut lu = a.matmul(&lw);
        lu.axpy(1.0, &e.matmul(&t.w));
        let mut lv = t.a6.matmul(&lz1);
        lv.axpy(1.0, &m6.matmul(&t.z1));
        lv.axpy(1.0, &lz2);

        let r0 = if self.s == 0 { &self.exp } else { &self.squares[0] };
        let mut rhs = &lu + &lv;
        rhs.axpy(1.0, &(&lu - &lv).matmul(r0));
        let mut l = self.denom.solve(&rhs)?;
        for r in &self.squares {
            let mut next = r.matmul(&l);
            next.axpy(1.0, &l.matmul(r));
            l = next;
        }
        Ok(l)
    }
}
