//! Bilinear latent dynamics models for model-predictive control: plant
//! simulators, dataset generation, training, a box-QP solver and an SCP
//! controller.

pub mod datagen;
pub mod exec;
pub mod model;
pub mod mpc;
pub mod numerics;
pub mod qpsolver;
pub mod simulators;
pub mod training;

pub use exec::Exec;
pub use numerics::{Matrix, NumericsError};
