//! Levenberg-Marquardt outer loop over the reduced camera system.

use std::time::Instant;

use nalgebra::DVector;
use thiserror::Error;

use crate::camera::{total_cost, ProjectionError};
use crate::mcg::{make_partition, solve_mcg, McgConfig, PartitionError};
use crate::normal::{build_normal_blocks, compute_schur, DampingMode, NormalBlocks};
use crate::pcg::{solve_pcg, CgConfig, CgStats, SolverError};
use crate::problem::{BaProblem, StateVector};
use crate::schur::{block_jacobi, LinalgError};

pub const MIN_LAMBDA: f64 = 1e-12;
pub const MAX_LAMBDA: f64 = 1e12;

/// Consecutive failed linear solves after which the run is abandoned.
pub const MAX_CONSECUTIVE_FAILURES: usize = 10;

#[derive(Debug, Error)]
pub enum LmError {
    #[error(transparent)]
    Projection(#[from] ProjectionError),
    #[error(transparent)]
    Partition(#[from] PartitionError),
    #[error("{count} consecutive failed steps, last: {last}")]
    TooManyFailures { count: usize, last: StepFailure },
    #[error("invalid config: {0}")]
    InvalidConfig(String),
}

/// Why a linear step could not be produced.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum StepFailure {
    #[error(transparent)]
    Linalg(#[from] LinalgError),
    #[error(transparent)]
    Solver(#[from] SolverError),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum SolverKind {
    Pcg,
    Mcg { tau: f64, num_subsets: usize },
}

impl SolverKind {
    pub fn name(&self) -> &'static str {
        match self {
            SolverKind::Pcg => "pcg",
            SolverKind::Mcg { .. } => "mcg",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LmConfig {
    pub lambda0: f64,
    pub max_iterations: usize,
    pub function_tolerance: f64,
    pub inner: CgConfig,
    pub solver: SolverKind,
    pub damping: DampingMode,
}

impl Default for LmConfig {
    fn default() -> Self {
        LmConfig {
            lambda0: 1e-4,
            max_iterations: 25,
            function_tolerance: 1e-6,
            inner: CgConfig::default(),
            solver: SolverKind::Pcg,
            damping: DampingMode::Marquardt,
        }
    }
}

impl LmConfig {
    fn validate(&self) -> Result<(), LmError> {
        let ok = self.lambda0 > 0.0
            && self.max_iterations >= 1
            && self.function_tolerance > 0.0
            && self.inner.epsilon > 0.0
            && self.inner.imax >= 1;
        let tau_ok = match self.solver {
            SolverKind::Mcg { tau, num_subsets } => tau >= 0.0 && num_subsets >= 1,
            SolverKind::Pcg => true,
        };
        if ok && tau_ok {
            Ok(())
        } else {
            Err(LmError::InvalidConfig(format!("{self:?}")))
        }
    }
}

/// One outer iteration.
#[derive(Debug, Clone, PartialEq)]
pub struct LmIteration {
    pub cost_before: f64,
    /// Cost at the trial state; `None` when no step could be computed or the
    /// trial state was degenerate.
    pub cost_trial: Option<f64>,
    pub lambda: f64,
    pub accepted: bool,
    pub inner_iterations: usize,
    pub inner_converged: bool,
    /// Seconds in the inner linear solver.
    pub solve_time: f64,
    /// Seconds since the start of [`optimize`].
    pub cumulative_time: f64,
}

impl LmIteration {
    /// Cost of the current state after this iteration.
    pub fn cost_after(&self) -> f64 {
        match (self.accepted, self.cost_trial) {
            (true, Some(c)) => c,
            _ => self.cost_before,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Termination {
    FunctionTolerance,
    MaxIterations,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LmTrace {
    pub initial_cost: f64,
    pub iterations: Vec<LmIteration>,
    pub termination: Termination,
    pub total_time: f64,
}

impl LmTrace {
    pub fn final_cost(&self) -> f64 {
        self.iterations
            .last()
            .map_or(self.initial_cost, LmIteration::cost_after)
    }

    pub fn total_inner_iterations(&self) -> usize {
        self.iterations.iter().map(|it| it.inner_iterations).sum()
    }

    pub fn total_solve_time(&self) -> f64 {
        self.iterations.iter().map(|it| it.solve_time).sum()
    }

    pub fn cost_trace(&self) -> Vec<f64> {
        self.iterations.iter().map(LmIteration::cost_after).collect()
    }
}

/// `lambda / 3` after a successful step, `2 lambda` after a failed one.
pub fn update_lambda(accepted: bool, lambda: f64) -> f64 {
    let next = if accepted { lambda / 3.0 } else { lambda * 2.0 };
    next.clamp(MIN_LAMBDA, MAX_LAMBDA)
}

fn linear_step(
    blocks: &NormalBlocks,
    cfg: &LmConfig,
    mcg: Option<&McgConfig>,
) -> Result<(DVector<f64>, DVector<f64>, CgStats), StepFailure> {
    let reduced = compute_schur(blocks)?;
    let precond = block_jacobi(&reduced.schur)?;
    let x0 = DVector::zeros(reduced.rhs.len());
    let (dxp, stats) = match mcg {
        None => solve_pcg(&reduced.schur, &reduced.rhs, &precond, &x0, cfg.inner)?,
        Some(m) => solve_mcg(&reduced.schur, &reduced.rhs, &precond, &x0, m)?,
    };
    let dxl = reduced.backsubstitute(blocks, &dxp);
    Ok((dxp, dxl, stats))
}

/// Minimises the reprojection cost starting from `initial`.
pub fn optimize(
    problem: &BaProblem,
    initial: &StateVector,
    cfg: &LmConfig,
) -> Result<(StateVector, LmTrace), LmError> {
    cfg.validate()?;
    let started = Instant::now();
    let mcg_cfg = match cfg.solver {
        SolverKind::Pcg => None,
        SolverKind::Mcg { tau, num_subsets } => Some(McgConfig::new(
            tau,
            make_partition(problem.num_cameras(), num_subsets)?,
            cfg.inner,
        )),
    };

    let mut state = initial.clone();
    let mut cost = total_cost(problem, &state)?;
    let initial_cost = cost;
    let mut lambda = cfg.lambda0;
    let mut blocks = build_normal_blocks(problem, &state, lambda, cfg.damping)?;
    let mut iterations = Vec::with_capacity(cfg.max_iterations);
    let mut failures = 0;
    let mut termination = Termination::MaxIterations;

    for _ in 0..cfg.max_iterations {
        blocks.set_lambda(lambda);
        let step = linear_step(&blocks, cfg, mcg_cfg.as_ref());
        let (record, converged) = match step {
            Err(failure) => {
                failures += 1;
                if failures >= MAX_CONSECUTIVE_FAILURES {
                    return Err(LmError::TooManyFailures {
                        count: failures,
                        last: failure,
                    });
                }
                let rec = LmIteration {
                    cost_before: cost,
                    cost_trial: None,
                    lambda,
                    accepted: false,
                    inner_iterations: 0,
                    inner_converged: false,
                    solve_time: 0.0,
                    cumulative_time: started.elapsed().as_secs_f64(),
                };
                (rec, false)
            }
            Ok((dxp, dxl, stats)) => {
                failures = 0;
                let trial = state.updated(&dxp, &dxl);
                // A degenerate trial state counts as a rejected step.
                let trial_cost = total_cost(problem, &trial).ok();
                let accepted = trial_cost.is_some_and(|c| c < cost);
                let rel_decrease = match trial_cost {
                    Some(c) if cost > 0.0 => (cost - c) / cost,
                    Some(_) => 0.0,
                    None => f64::INFINITY,
                };
                let converged = (0.0..cfg.function_tolerance).contains(&rel_decrease);
                let rec = LmIteration {
                    cost_before: cost,
                    cost_trial: trial_cost,
                    lambda,
                    accepted,
                    inner_iterations: stats.iterations,
                    inner_converged: stats.converged,
                    solve_time: stats.wall_time,
                    cumulative_time: 0.0,
                };
                if accepted {
                    state = trial;
                    cost = trial_cost.expect("accepted implies finite cost");
                }
                (rec, converged)
            }
        };
        let accepted = record.accepted;
        lambda = update_lambda(accepted, lambda);
        if accepted && !converged {
            blocks = build_normal_blocks(problem, &state, lambda, cfg.damping)?;
        }
        iterations.push(LmIteration {
            cumulative_time: started.elapsed().as_secs_f64(),
            ..record
        });
        if converged {
            termination = Termination::FunctionTolerance;
            break;
        }
    }

    Ok((
        state,
        LmTrace {
            initial_cost,
            iterations,
            termination,
            total_time: started.elapsed().as_secs_f64(),
        },
    ))
}
