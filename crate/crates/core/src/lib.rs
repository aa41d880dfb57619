//! False-data-injection laboratory for DC power-system state estimation.
//!
//! The crate covers the whole pipeline:
//!
//! * [`casefile`] parses MATPOWER-style case files into a [`GridCase`];
//! * [`dcmodel`] builds the DC measurement Jacobian `H`;
//! * [`estimator`] runs weighted least squares, the chi-square bad-data test
//!   and largest-normalized-residual scrubbing;
//! * [`measgen`] simulates measurement windows with Gaussian noise and sparse
//!   gross errors;
//! * [`subspace`] estimates the measurement subspace with PCA / SVD;
//! * [`recover`] separates low-rank and sparse parts (inexact ALM plus APG,
//!   SVT and dual baselines);
//! * [`attack`] constructs known-Jacobian, random and blind attacks;
//! * [`harness`] runs seeded Monte Carlo campaigns and writes CSV reports.

pub mod attack;
pub mod casefile;
pub mod dcmodel;
mod error;
pub mod estimator;
pub mod harness;
pub mod linalg;
pub mod measgen;
pub mod recover;
pub mod subspace;

pub use attack::{AttackStrategy, AttackVector};
pub use casefile::{BranchRecord, BusKind, BusRecord, GridCase};
pub use dcmodel::{DcJacobian, SensorKind};
pub use error::{Error, Result};
pub use estimator::{DetectionOutcome, NoiseModel, Verdict};
pub use measgen::{GrossErrorSpec, MeasurementMatrix};
pub use recover::{Decomposition, RpcaProblem, Solver};
pub use subspace::{PcaModel, ReducedBasis};

pub use nalgebra::{DMatrix, DVector};
