//! Eigenvalues of real nonsymmetric matrices by Householder reduction to
//! Hessenberg form followed by the Francis double-shift QR iteration, plus
//! right/left eigenvectors by complex inverse iteration.

use num_complex::Complex64;

use super::{Matrix, NumericsError};

/// Sweeps allowed per matrix dimension before the iteration is abandoned.
const SWEEPS_PER_DIM: usize = 30;

/// Two eigenvalues closer than this (in the complex plane) are treated as
/// a cluster and get no gradient.
pub const CLUSTER_TOL: f64 = 1e-8;

/// Householder reduction to upper Hessenberg form (similarity transform).
pub fn hessenberg(m: &Matrix) -> Result<Matrix, NumericsError> {
    if !m.is_square() {
        return Err(NumericsError::NotSquare {
            op: "hessenberg",
            shape: m.shape(),
        });
    }
    let n = m.rows();
    let mut a = m.clone();
    for k in 0..n.saturating_sub(2) {
        let mut v: Vec<f64> = (k + 1..n).map(|i| a[(i, k)]).collect();
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm == 0.0 {
            continue;
        }
        let alpha = if v[0] >= 0.0 { -norm } else { norm };
        v[0] -= alpha;
        let vnorm2: f64 = v.iter().map(|x| x * x).sum();
        if vnorm2 == 0.0 {
            continue;
        }
        let beta = 2.0 / vnorm2;
        // A ← (I − βvvᵀ) A
        for j in 0..n {
            let s: f64 = (k + 1..n).zip(&v).map(|(i, vi)| vi * a[(i, j)]).sum();
            let s = s * beta;
            for (i, vi) in (k + 1..n).zip(&v) {
                a[(i, j)] -= s * vi;
            }
        }
        // A ← A (I − βvvᵀ)
        for i in 0..n {
            let s: f64 = (k + 1..n).zip(&v).map(|(j, vj)| vj * a[(i, j)]).sum();
            let s = s * beta;
            for (j, vj) in (k + 1..n).zip(&v) {
                a[(i, j)] -= s * vj;
            }
        }
        for i in k + 2..n {
            a[(i, k)] = 0.0;
        }
    }
    Ok(a)
}

fn sign(a: f64, b: f64) -> f64 {
    if b >= 0.0 {
        a.abs()
    } else {
        -a.abs()
    }
}

/// Francis double-shift QR on an upper Hessenberg matrix.
fn hqr(mut h: Matrix) -> Result<Vec<Complex64>, NumericsError> {
    let n = h.rows();
    let mut out = vec![Complex64::new(0.0, 0.0); n];
    if n == 0 {
        return Ok(out);
    }
    let budget = SWEEPS_PER_DIM * n;
    let mut total = 0usize;
    let eps = f64::EPSILON;
    let mut anorm = 0.0;
    for i in 0..n {
        for j in i.saturating_sub(1)..n {
            anorm += h[(i, j)].abs();
        }
    }
    let mut nn = n as isize - 1;
    let mut t = 0.0;
    macro_rules! a {
        ($i:expr, $j:expr) => {
            h[(($i) as usize, ($j) as usize)]
        };
    }
    while nn >= 0 {
        let mut its = 0usize;
        loop {
            let mut l = nn;
            while l > 0 {
                let mut s = a!(l - 1, l - 1).abs() + a!(l, l).abs();
                if s == 0.0 {
                    s = anorm;
                }
                if a!(l, l - 1).abs() <= eps * s {
                    a!(l, l - 1) = 0.0;
                    break;
                }
                l -= 1;
            }
            let mut x = a!(nn, nn);
            if l == nn {
                out[nn as usize] = Complex64::new(x + t, 0.0);
                nn -= 1;
            } else {
                let mut y = a!(nn - 1, nn - 1);
                let mut w = a!(nn, nn - 1) * a!(nn - 1, nn);
                if l == nn - 1 {
                    let p = 0.5 * (y - x);
                    let q = p * p + w;
                    let mut z = q.abs().sqrt();
                    x += t;
                    if q >= 0.0 {
                        z = p + sign(z, p);
                        out[nn as usize - 1] = Complex64::new(x + z, 0.0);
                        out[nn as usize] = Complex64::new(x + z, 0.0);
                        if z != 0.0 {
                            out[nn as usize] = Complex64::new(x - w / z, 0.0);
                        }
                    } else {
                        out[nn as usize] = Complex64::new(x + p, -z);
                        out[nn as usize - 1] = Complex64::new(x + p, z);
                    }
                    nn -= 2;
                } else {
                    if total >= budget {
                        return Err(NumericsError::ConvergenceFailure {
                            partial: h,
                            iterations: total,
                        });
                    }
                    if its == 10 || its == 20 {
                        t += x;
                        for i in 0..=nn {
                            a!(i, i) -= x;
                        }
                        let s = a!(nn, nn - 1).abs() + a!(nn - 1, nn - 2).abs();
                        x = 0.75 * s;
                        y = x;
                        w = -0.4375 * s * s;
                    }
                    its += 1;
                    total += 1;
                    let (mut p, mut q, mut r);
                    let mut z;
                    let mut m = nn - 2;
                    loop {
                        z = a!(m, m);
                        r = x - z;
                        let s0 = y - z;
                        p = (r * s0 - w) / a!(m + 1, m) + a!(m, m + 1);
                        q = a!(m + 1, m + 1) - z - r - s0;
                        r = a!(m + 2, m + 1);
                        let s = p.abs() + q.abs() + r.abs();
                        p /= s;
                        q /= s;
                        r /= s;
                        if m == l {
                            break;
                        }
                        let u = a!(m, m - 1).abs() * (q.abs() + r.abs());
                        let v = p.abs() * (a!(m - 1, m - 1).abs() + z.abs() + a!(m + 1, m + 1).abs());
                        if u <= eps * v {
                            break;
                        }
                        m -= 1;
                    }
                    for i in m..nn - 1 {
                        a!(i + 2, i) = 0.0;
                        if i != m {
                            a!(i + 2, i - 1) = 0.0;
                        }
                    }
                    let mut k = m;
                    while k < nn {
                        if k != m {
                            p = a!(k, k - 1);
                            q = a!(k + 1, k - 1);
                            r = 0.0;
                            if k + 1 != nn {
                                r = a!(k + 2, k - 1);
                            }
                            x = p.abs() + q.abs() + r.abs();
                            if x != 0.0 {
                                p /= x;
                                q /= x;
                                r /= x;
                            }
                        }
                        let s = sign((p * p + q * q + r * r).sqrt(), p);
                        if s != 0.0 {
                            if k == m {
                                if l != m {
                                    a!(k, k - 1) = -a!(k, k - 1);
                                }
                            } else {
                                a!(k, k - 1) = -s * x;
                            }
                            p += s;
                            x = p / s;
                            y = q / s;
                            z = r / s;
                            q /= p;
                            r /= p;
                            for j in k..=nn {
                                p = a!(k, j) + q * a!(k + 1, j);
                                if k + 1 != nn {
                                    p += r * a!(k + 2, j);
                                    a!(k + 2, j) -= p * z;
                                }
                                a!(k + 1, j) -= p * y;
                                a!(k, j) -= p * x;
                            }
                            let mmin = if nn < k + 3 { nn } else { k + 3 };
                            for i in l..=mmin {
                                p = x * a!(i, k) + y * a!(i, k + 1);
                                if k + 1 != nn {
                                    p += z * a!(i, k + 2);
                                    a!(i, k + 2) -= p * r;
                                }
                                a!(i, k + 1) -= p * q;
                                a!(i, k) -= p;
                            }
                        }
                        k += 1;
                    }
                }
            }
            if l >= nn - 1 {
                break;
            }
        }
    }
    Ok(out)
}

fn sort_by_modulus(values: &mut [Complex64]) {
    values.sort_by(|a, b| {
        b.norm()
            .total_cmp(&a.norm())
            .then(b.re.total_cmp(&a.re))
            .then(b.im.total_cmp(&a.im))
    });
}

/// All eigenvalues of `m`, ordered by descending modulus.
pub fn eigenvalues(m: &Matrix) -> Result<Vec<Complex64>, NumericsError> {
    if !m.is_finite() {
        return Err(NumericsError::NonFinite { op: "eigenvalues" });
    }
    let h = hessenberg(m)?;
    let mut values = hqr(h)?;
    sort_by_modulus(&mut values);
    Ok(values)
}

/// Eigenvalue moduli of `m`, descending.
pub fn eig_moduli(m: &Matrix) -> Result<Vec<f64>, NumericsError> {
    Ok(eigenvalues(m)?.iter().map(|l| l.norm()).collect())
}

/// An eigenvalue above the requested modulus threshold, with its right
/// (`Mx = λx`) and left (`yᵀM = λyᵀ`) eigenvectors.
#[derive(Debug, Clone)]
pub struct ActiveEigen {
    pub value: Complex64,
    pub right: Vec<Complex64>,
    pub left: Vec<Complex64>,
    /// Another eigenvalue lies within [`CLUSTER_TOL`].
    pub clustered: bool,
}

impl ActiveEigen {
    /// `∂|λ|/∂M`, or `None` when the eigenvalue is clustered, zero, or
    /// numerically defective.
    pub fn modulus_gradient(&self) -> Option<Matrix> {
        let modulus = self.value.norm();
        if self.clustered || modulus == 0.0 {
            return None;
        }
        let denom: Complex64 = self.left.iter().zip(&self.right).map(|(y, x)| y * x).sum();
        let ny = self.left.iter().map(|c| c.norm_sqr()).sum::<f64>().sqrt();
        let nx = self.right.iter().map(|c| c.norm_sqr()).sum::<f64>().sqrt();
        if denom.norm() <= 1e-12 * ny * nx {
            return None;
        }
        let factor = self.value.conj() / (modulus * denom);
        let n = self.right.len();
        let mut g = Matrix::zeros(n, n);
        for a in 0..n {
            for b in 0..n {
                g[(a, b)] = (factor * self.left[a] * self.right[b]).re;
            }
        }
        Some(g)
    }
}

#[derive(Debug, Clone)]
pub struct EigDecomposition {
    /// All eigenvalues, descending modulus.
    pub values: Vec<Complex64>,
    pub moduli: Vec<f64>,
    /// Eigenvalues with modulus strictly above the threshold.
    pub active: Vec<ActiveEigen>,
}

/// Moduli of `m` plus eigenvectors for every eigenvalue whose modulus
/// exceeds `threshold`.
pub fn eig_moduli_with_vectors(m: &Matrix, threshold: f64) -> Result<EigDecomposition, NumericsError> {
    let values = eigenvalues(m)?;
    let moduli: Vec<f64> = values.iter().map(|l| l.norm()).collect();
    let mt = m.transpose();
    let mut active = Vec::new();
    for (i, &lambda) in values.iter().enumerate() {
        if moduli[i] <= threshold {
            continue;
        }
        let clustered = values
            .iter()
            .enumerate()
            .any(|(j, other)| j != i && (other - lambda).norm() < CLUSTER_TOL);
        active.push(ActiveEigen {
            value: lambda,
            right: inverse_iteration(m, lambda),
            left: inverse_iteration(&mt, lambda),
            clustered,
        });
    }
    Ok(EigDecomposition {
        values,
        moduli,
        active,
    })
}

/// Null vector of `M − λI` by three steps of inverse iteration with
/// complex partial-pivoting LU.
fn inverse_iteration(m: &Matrix, lambda: Complex64) -> Vec<Complex64> {
    let n = m.rows();
    let scale = m.norm_1().max(1.0);
    let tiny = f64::EPSILON * scale;
    let mut a: Vec<Complex64> = m.as_slice().iter().map(|&v| Complex64::new(v, 0.0)).collect();
    for i in 0..n {
        a[i * n + i] -= lambda;
    }
    let mut perm: Vec<usize> = (0..n).collect();
    for k in 0..n {
        let p = (k..n)
            .max_by(|&i, &j| a[i * n + k].norm().total_cmp(&a[j * n + k].norm()))
            .unwrap();
        if p != k {
            for j in 0..n {
                a.swap(k * n + j, p * n + j);
            }
            perm.swap(k, p);
        }
        if a[k * n + k].norm() < tiny {
            a[k * n + k] = Complex64::new(tiny, 0.0);
        }
        let pivot = a[k * n + k];
        for i in k + 1..n {
            let f = a[i * n + k] / pivot;
            a[i * n + k] = f;
            for j in k + 1..n {
                let akj = a[k * n + j];
                a[i * n + j] -= f * akj;
            }
        }
    }
    let mut x = vec![Complex64::new(1.0, 0.0); n];
    for _ in 0..3 {
        let mut b: Vec<Complex64> = perm.iter().map(|&p| x[p]).collect();
        for i in 0..n {
            for j in 0..i {
                let l = a[i * n + j];
                let bj = b[j];
                b[i] -= l * bj;
            }
        }
        for i in (0..n).rev() {
            for j in i + 1..n {
                let u = a[i * n + j];
                let bj = b[j];
                b[i] -= u * bj;
            }
            b[i] /= a[i * n + i];
        }
        let norm = b.iter().map(|c| c.norm_sqr()).sum::<f64>().sqrt();
        x = b.into_iter().map(|c| c / norm).collect();
    }
    x
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_matrix(rng: &mut ChaCha8Rng, n: usize) -> Matrix {
        let data = (0..n * n).map(|_| rng.gen_range(-1.0..1.0)).collect();
        Matrix::from_vec(n, n, data).unwrap()
    }

    #[test]
    fn diagonal_moduli() {
        let m = eig_moduli(&Matrix::diag(&[0.5, -0.9])).unwrap();
        assert_eq!(m, vec![0.9, 0.5]);
    }

    #[test]
    fn rotation_moduli() {
        let m = eig_moduli(&Matrix::from_rows(&[&[0.0, 1.0], &[-1.0, 0.0]])).unwrap();
        assert!((m[0] - 1.0).abs() < 1e-15 && (m[1] - 1.0).abs() < 1e-15);
    }

    #[test]
    fn hessenberg_is_similar_and_banded() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let m = random_matrix(&mut rng, 7);
        let h = hessenberg(&m).unwrap();
        for i in 0..7usize {
            for j in 0..i.saturating_sub(1) {
                assert_eq!(h[(i, j)], 0.0);
            }
        }
        assert!((h.trace() - m.trace()).abs() < 1e-12);
        assert!((h.norm_fro() - m.norm_fro()).abs() < 1e-12);
    }

    #[test]
    fn product_of_moduli_is_abs_det() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for _ in 0..50 {
            let m = random_matrix(&mut rng, 8);
            let prod: f64 = eig_moduli(&m).unwrap().iter().product();
            let det = m.det().unwrap().abs();
            assert!((prod - det).abs() <= 1e-8 * det, "{prod} vs {det}");
        }
    }

    #[test]
    fn eigenvalues_satisfy_trace() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        for n in 1..12 {
            let m = random_matrix(&mut rng, n);
            let values = eigenvalues(&m).unwrap();
            let sum: Complex64 = values.iter().sum();
            assert!((sum.re - m.trace()).abs() < 1e-10);
            assert!(sum.im.abs() < 1e-10);
        }
    }

    #[test]
    fn eigenvectors_satisfy_definition() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let m = random_matrix(&mut rng, 6);
        let dec = eig_moduli_with_vectors(&m, 0.0).unwrap();
        assert_eq!(dec.active.len(), 6);
        for e in &dec.active {
            for i in 0..6 {
                let mx: Complex64 = (0..6).map(|j| e.right[j] * m[(i, j)]).sum();
                assert!((mx - e.value * e.right[i]).norm() < 1e-10);
                let ym: Complex64 = (0..6).map(|j| e.left[j] * m[(j, i)]).sum();
                assert!((ym - e.value * e.left[i]).norm() < 1e-10);
            }
        }
    }

    #[test]
    fn modulus_gradient_matches_finite_difference() {
        let mut rng = ChaCha8Rng::seed_from_u64(33);
        let m = random_matrix(&mut rng, 5);
        let dec = eig_moduli_with_vectors(&m, 0.0).unwrap();
        let top = &dec.active[0];
        let g = top.modulus_gradient().unwrap();
        let h = 1e-6;
        for a in 0..5 {
            for b in 0..5 {
                let mut plus = m.clone();
                plus[(a, b)] += h;
                let mut minus = m.clone();
                minus[(a, b)] -= h;
                let fd = (eig_moduli(&plus).unwrap()[0] - eig_moduli(&minus).unwrap()[0]) / (2.0 * h);
                assert!((fd - g[(a, b)]).abs() < 1e-6, "{a},{b}: {fd} vs {}", g[(a, b)]);
            }
        }
    }

    #[test]
    fn repeated_eigenvalue_is_clustered() {
        let dec = eig_moduli_with_vectors(&Matrix::diag(&[1.2, 1.2, 0.1]), 0.5).unwrap();
        assert_eq!(dec.active.len(), 2);
        assert!(dec.active.iter().all(|e| e.clustered && e.modulus_gradient().is_none()));
    }

    #[test]
    fn conjugate_pair_is_not_clustered() {
        let m = Matrix::from_rows(&[&[0.0, 1.2], &[-1.2, 0.0]]);
        let dec = eig_moduli_with_vectors(&m, 0.5).unwrap();
        assert!(dec.active.iter().all(|e| !e.clustered));
    }

    #[test]
    fn non_finite_input_errors() {
        let mut m = Matrix::identity(2);
        m[(0, 0)] = f64::NAN;
        assert!(matches!(eigenvalues(&m), Err(NumericsError::NonFinite { .. })));
    }

    proptest! {
        #[test]
        fn similarity_invariance(seed in 0u64..1000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let m = random_matrix(&mut rng, 5);
            let mut s = random_matrix(&mut rng, 5).scale(0.3);
            s.add_identity(1.0);
            let sinv = s.inverse().unwrap();
            let sim = sinv.matmul(&m).matmul(&s);
            let a = eig_moduli(&m).unwrap();
            let b = eig_moduli(&sim).unwrap();
            for (x, y) in a.iter().zip(&b) {
                prop_assert!((x - y).abs() < 1e-8);
            }
        }
    }
}
