//! Block-Jacobi preconditioned conjugate gradients on `S x = -b~`.

use std::time::Instant;

use nalgebra::DVector;
use thiserror::Error;

use crate::schur::{BlockJacobiPreconditioner, SchurMatrix};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SolverError {
    #[error("breakdown at iteration {iteration}: non-positive curvature {curvature:e}")]
    Breakdown { iteration: usize, curvature: f64 },
    #[error("non-finite value at iteration {iteration}")]
    NonFinite { iteration: usize },
    #[error("direction history needs {needed} columns, budget is {budget}")]
    HistoryBudgetExceeded { needed: usize, budget: usize },
    #[error("dimension mismatch: expected {expected}, got {actual}")]
    DimensionMismatch { expected: usize, actual: usize },
}

/// Relative residual tolerance and iteration cap.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CgConfig {
    pub epsilon: f64,
    pub imax: usize,
}

impl Default for CgConfig {
    fn default() -> Self {
        CgConfig {
            epsilon: 1e-6,
            imax: 1000,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct CgStats {
    pub iterations: usize,
    /// `||r_i||_2` for `i = 0..=iterations`.
    pub residual_norm_history: Vec<f64>,
    pub converged: bool,
    /// Seconds spent inside the solver.
    pub wall_time: f64,
    /// Number of search directions used at each iteration (1 for PCG).
    pub search_widths: Vec<usize>,
    /// `t_i` of each τ-test that was evaluated (MCG only).
    pub tau_values: Vec<f64>,
}

pub(crate) fn check_dims(
    s: &SchurMatrix,
    b: &DVector<f64>,
    m: &BlockJacobiPreconditioner,
    x0: &DVector<f64>,
) -> Result<(), SolverError> {
    for actual in [b.len(), x0.len(), 9 * m.num_poses()] {
        if actual != s.dim() {
            return Err(SolverError::DimensionMismatch {
                expected: s.dim(),
                actual,
            });
        }
    }
    Ok(())
}

/// Outcome of one iteration.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StepStatus {
    Running,
    Converged,
}

/// Iteration state of PCG, advanced one step at a time.
pub struct Pcg<'a> {
    s: &'a SchurMatrix,
    precond: &'a BlockJacobiPreconditioner,
    cfg: CgConfig,
    x: DVector<f64>,
    r: DVector<f64>,
    p: DVector<f64>,
    r0_norm: f64,
    stats: CgStats,
    status: StepStatus,
}

impl<'a> Pcg<'a> {
    pub fn new(
        s: &'a SchurMatrix,
        b_tilde: &DVector<f64>,
        precond: &'a BlockJacobiPreconditioner,
        x0: &DVector<f64>,
        cfg: CgConfig,
    ) -> Result<Self, SolverError> {
        check_dims(s, b_tilde, precond, x0)?;
        let r = -b_tilde - s.spmv(x0);
        let p = precond.apply(&r);
        let r0_norm = r.norm();
        if !r0_norm.is_finite() {
            return Err(SolverError::NonFinite { iteration: 0 });
        }
        Ok(Pcg {
            s,
            precond,
            cfg,
            x: x0.clone(),
            r,
            p,
            r0_norm,
            stats: CgStats {
                residual_norm_history: vec![r0_norm],
                ..CgStats::default()
            },
            // a zero right-hand side is solved by x0 = 0
            status: if r0_norm == 0.0 {
                StepStatus::Converged
            } else {
                StepStatus::Running
            },
        })
    }

    pub fn x(&self) -> &DVector<f64> {
        &self.x
    }

    pub fn residual(&self) -> &DVector<f64> {
        &self.r
    }

    pub fn stats(&self) -> &CgStats {
        &self.stats
    }

    pub fn status(&self) -> StepStatus {
        self.status
    }

    pub fn step(&mut self) -> Result<StepStatus, SolverError> {
        if self.status == StepStatus::Converged {
            return Ok(self.status);
        }
        let i = self.stats.iterations;
        let q = self.s.spmv(&self.p);
        let delta = q.dot(&self.p);
        let gamma = self.p.dot(&self.r);
        if !delta.is_finite() || !gamma.is_finite() {
            return Err(SolverError::NonFinite { iteration: i });
        }
        if delta <= 0.0 {
            return Err(SolverError::Breakdown {
                iteration: i,
                curvature: delta,
            });
        }
        let alpha = gamma / delta;
        self.x.axpy(alpha, &self.p, 1.0);
        self.r.axpy(-alpha, &q, 1.0);
        self.stats.iterations += 1;
        self.stats.search_widths.push(1);
        let r_norm = self.r.norm();
        self.stats.residual_norm_history.push(r_norm);
        if !r_norm.is_finite() {
            return Err(SolverError::NonFinite { iteration: i });
        }
        if r_norm < self.cfg.epsilon * self.r0_norm {
            self.status = StepStatus::Converged;
            return Ok(self.status);
        }
        let z = self.precond.apply(&self.r);
        let beta = q.dot(&z) / delta;
        // p <- z - beta p
        self.p *= -beta;
        self.p += z;
        Ok(self.status)
    }

    pub fn finish(mut self, started: Instant) -> (DVector<f64>, CgStats) {
        self.stats.converged = self.status == StepStatus::Converged;
        self.stats.wall_time = started.elapsed().as_secs_f64();
        (self.x, self.stats)
    }
}

/// Solves `S x = -b~` until `||r|| < epsilon ||r_0||` or `imax` iterations.
pub fn solve_pcg(
    s: &SchurMatrix,
    b_tilde: &DVector<f64>,
    precond: &BlockJacobiPreconditioner,
    x0: &DVector<f64>,
    cfg: CgConfig,
) -> Result<(DVector<f64>, CgStats), SolverError> {
    let started = Instant::now();
    let mut solver = Pcg::new(s, b_tilde, precond, x0, cfg)?;
    while solver.status() == StepStatus::Running && solver.stats().iterations < cfg.imax {
        solver.step()?;
    }
    Ok(solver.finish(started))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::Mat9;
    use crate::Vec9;

    #[test]
    fn identity_system_in_one_step() {
        let s = SchurMatrix::identity(3);
        let m = BlockJacobiPreconditioner::identity(3);
        let b = DVector::from_fn(27, |i, _| (i as f64) - 4.5);
        let (x, stats) = solve_pcg(&s, &b, &m, &DVector::zeros(27), CgConfig::default()).unwrap();
        assert_eq!(stats.iterations, 1);
        assert!(stats.converged);
        assert_eq!(x, -b);
        assert_eq!(stats.residual_norm_history.len(), 2);
    }

    #[test]
    fn zero_rhs_is_already_solved() {
        let s = SchurMatrix::identity(2);
        let m = BlockJacobiPreconditioner::identity(2);
        let (x, stats) =
            solve_pcg(&s, &DVector::zeros(18), &m, &DVector::zeros(18), CgConfig::default()).unwrap();
        assert_eq!(stats.iterations, 0);
        assert!(stats.converged);
        assert_eq!(x.amax(), 0.0);
    }

    #[test]
    fn indefinite_matrix_breaks_down() {
        let s = SchurMatrix::block_diagonal(vec![-Mat9::identity()]);
        let m = BlockJacobiPreconditioner::identity(1);
        let err = solve_pcg(&s, &DVector::from_element(9, 1.0), &m, &DVector::zeros(9), CgConfig::default())
            .unwrap_err();
        assert!(matches!(err, SolverError::Breakdown { iteration: 0, .. }));
    }

    #[test]
    fn dimension_mismatch() {
        let s = SchurMatrix::identity(2);
        let m = BlockJacobiPreconditioner::identity(2);
        assert!(matches!(
            solve_pcg(&s, &DVector::zeros(9), &m, &DVector::zeros(18), CgConfig::default()),
            Err(SolverError::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn iteration_cap_reports_not_converged() {
        let blocks: Vec<Mat9> = (0..4)
            .map(|i| Mat9::from_diagonal(&Vec9::from_fn(|k, _| 1.0 + (9 * i + k) as f64)))
            .collect();
        let s = SchurMatrix::block_diagonal(blocks);
        let m = BlockJacobiPreconditioner::identity(4);
        let b = DVector::from_element(36, 1.0);
        let cfg = CgConfig { epsilon: 1e-12, imax: 3 };
        let (_, stats) = solve_pcg(&s, &b, &m, &DVector::zeros(36), cfg).unwrap();
        assert_eq!(stats.iterations, 3);
        assert!(!stats.converged);
        assert_eq!(stats.residual_norm_history.len(), 4);
    }
}
