//! Dense linear algebra, the matrix exponential, eigenvalues, and a
//! reverse-mode tape.

mod eig;
mod expm;
mod matrix;
mod phi;
pub mod tape;

pub use eig::{
    eig_moduli, eig_moduli_with_vectors, eigenvalues, hessenberg, ActiveEigen, EigDecomposition,
};
pub use expm::{matrix_exp, matrix_exp_frechet, ExpmFrechet};
pub use matrix::{Cholesky, Lu, Matrix};
pub use phi::{phi1, phi1_scalar, phi1_partials};
pub use tape::{Gradients, Tape, Var};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum NumericsError {
    #[error("{op}: dimension mismatch, expected {expected:?}, found {found:?}")]
    DimensionMismatch {
        op: &'static str,
        expected: (usize, usize),
        found: (usize, usize),
    },
    #[error("{op}: non-finite value")]
    NonFinite { op: &'static str },
    #[error("{op}: matrix of shape {shape:?} is not square")]
    NotSquare {
        op: &'static str,
        shape: (usize, usize),
    },
    #[error("{op}: matrix is singular")]
    Singular { op: &'static str },
    #[error("cholesky: matrix is not positive definite (pivot {pivot})")]
    NotPositiveDefinite { pivot: usize },
    #[error("eigenvalue iteration did not converge after {iterations} iterations")]
    ConvergenceFailure { partial: Matrix, iterations: usize },
    #[error("no adjoint rule registered for {0}")]
    UnsupportedOp(&'static str),
}
