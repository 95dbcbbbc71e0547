//! Certified l2 robustness for deep equilibrium models via randomized smoothing.
//!
//! A deep equilibrium (DEQ) layer defines its output implicitly as the fixed
//! point `z* = f(z*, x)` of a contractive cell. Randomized smoothing certifies
//! an l2 robustness radius for a classifier by majority vote over Gaussian
//! perturbations of the input, which for a DEQ means one fixed-point solve per
//! Monte Carlo sample. This crate implements the serialized variant of that
//! pipeline: consecutive noisy samples start their solves from the previous
//! sample's fixed point, cutting solver iterations while a holdout-estimated
//! misalignment bound keeps the certified radius sound.
//!
//! Module layout:
//! - [`linalg`]: dense vectors/matrices, power-iteration spectral norm, Gaussian elimination
//! - [`stats`]: Clopper-Pearson lower bounds, the inverse normal CDF, counter-based Gaussian noise
//! - [`deq`]: the tanh equilibrium cell, contraction rescaling, linear readout, model files
//! - [`solvers`]: naive iteration, Anderson acceleration, Broyden's method
//! - [`dataset`]: synthetic point-cloud datasets and their file format
//! - [`training`]: Gaussian-augmented SGD with implicit-function-theorem gradients
//! - [`smoothing`]: Monte Carlo certification with cold-start solves
//! - [`srs`]: serialized smoothing with warm starts and correlation-robust radii
//! - [`eval`]: certified accuracy, ACR, radius discrepancy, PGD spot checks
//! - [`report`]: per-point report rows, CSV report files, metrics summaries

pub mod dataset;
pub mod deq;
pub mod error;
pub mod eval;
pub mod linalg;
pub mod report;
pub mod smoothing;
pub mod solvers;
pub mod srs;
pub mod stats;
pub mod training;

pub use error::{Error, Result};
