//! Bundle adjustment on the reduced camera system with two interchangeable
//! inner solvers: block-Jacobi preconditioned conjugate gradients (PCG) and
//! multidirectional conjugate gradients (MCG).
//!
//! The pipeline is the usual one for Levenberg-Marquardt bundle adjustment:
//!
//! 1. evaluate residuals and Jacobians ([`camera`]),
//! 2. assemble the damped normal equations and eliminate the landmarks with
//!    a Schur complement ([`normal`], [`schur`]),
//! 3. solve the reduced camera system iteratively ([`pcg`], [`mcg`]),
//! 4. backsubstitute the landmark update and accept or reject the step
//!    ([`lm`]).
//!
//! [`bench`] drives head-to-head comparisons and parameter sweeps and writes
//! CSV traces; the `mcgba` binary exposes it on the command line.

pub mod bench;
pub mod camera;
pub mod lm;
pub mod mcg;
pub mod normal;
pub mod pcg;
pub mod problem;
pub mod schur;
pub mod synthetic;

pub use camera::{project, residual, residual_jacobians, total_cost, ProjectionError};
pub use lm::{optimize, update_lambda, LmConfig, LmError, LmTrace, SolverKind};
pub use mcg::{
    expand_residual, make_partition, pseudo_inverse, solve_mcg, tau_test, McgConfig, Partition,
};
pub use normal::{build_normal_blocks, compute_schur, DampingMode, NormalBlocks, ReducedSystem};
pub use pcg::{solve_pcg, CgConfig, CgStats, SolverError};
pub use problem::{parse_bal, write_bal, BaProblem, Camera, Observation, ParseError, StateVector};
pub use schur::{block_jacobi, BlockJacobiPreconditioner, LinalgError, SchurMatrix};
pub use synthetic::{generate_synthetic, SyntheticConfig, SyntheticError};

/// Number of parameters per camera: axis-angle rotation, translation, focal
/// length and two radial distortion coefficients.
pub const POSE_DIM: usize = 9;

/// Number of parameters per landmark.
pub const POINT_DIM: usize = 3;

pub type Mat9 = nalgebra::SMatrix<f64, 9, 9>;
pub type Mat9x3 = nalgebra::SMatrix<f64, 9, 3>;
pub type Mat2x9 = nalgebra::SMatrix<f64, 2, 9>;
pub type Mat2x3 = nalgebra::SMatrix<f64, 2, 3>;
pub type Vec9 = nalgebra::SVector<f64, 9>;
