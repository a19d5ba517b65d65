//! Multidirectional conjugate gradients.
//!
//! MCG runs block-Jacobi PCG on the reduced camera system until the τ-test
//! reports slow progress. It then splits the preconditioned residual by pose
//! subset, giving one search direction per subset, and continues with
//! conjugate *matrices* instead of vectors. Because several directions are
//! combined at once, the new block is S-orthogonalised against the whole
//! direction history rather than only the previous one.
//!
//! `S Z` for a split residual is formed with [`SchurMatrix::spmm_structured`],
//! and `Q = S P` follows from the stored history:
//! `Q_{i+1} = S Z_{i+1} - sum_j Q_j beta_{i,j}`.

use std::time::Instant;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use thiserror::Error;

use crate::pcg::{check_dims, CgConfig, CgStats, SolverError, StepStatus};
use crate::schur::{BlockJacobiPreconditioner, SchurMatrix};
use crate::POSE_DIM;

/// τ-test denominators below this count as an exact solve.
pub const TAU_DENOMINATOR_FLOOR: f64 = 1e-30;

/// Relative eigenvalue cutoff of `Delta^+` per unit of block width.
pub const RANK_TOL_PER_DIRECTION: f64 = 1e-12;

/// Negative eigenvalues of `Delta` larger than this fraction of the largest
/// eigenvalue mean `S` is not positive definite.
const INDEFINITE_TOL: f64 = 1e-6;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum PartitionError {
    #[error("cannot split {n_poses} poses into {n_subsets} subsets")]
    TooManySubsets { n_poses: usize, n_subsets: usize },
    #[error("number of subsets must be at least 1")]
    NoSubsets,
}

/// Contiguous split of the poses into `N` subsets.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Partition {
    sizes: Vec<usize>,
    subset_of: Vec<usize>,
}

impl Partition {
    pub fn num_subsets(&self) -> usize {
        self.sizes.len()
    }

    pub fn num_poses(&self) -> usize {
        self.subset_of.len()
    }

    pub fn sizes(&self) -> &[usize] {
        &self.sizes
    }

    pub fn subset_of(&self, pose: usize) -> usize {
        self.subset_of[pose]
    }
}

/// Subsets `1..N-1` get `floor(n_p / (N-1))` consecutive poses each and the
/// last subset takes the rest. If nothing is left over, the last pose of
/// subset `N-1` moves to subset `N` so that no subset is empty.
pub fn make_partition(n_poses: usize, n_subsets: usize) -> Result<Partition, PartitionError> {
    if n_subsets == 0 {
        return Err(PartitionError::NoSubsets);
    }
    if n_subsets > n_poses {
        return Err(PartitionError::TooManySubsets { n_poses, n_subsets });
    }
    let sizes = if n_subsets == 1 {
        vec![n_poses]
    } else {
        let size = n_poses / (n_subsets - 1);
        let mut sizes = vec![size; n_subsets - 1];
        let remainder = n_poses - size * (n_subsets - 1);
        sizes.push(remainder);
        if remainder == 0 {
            sizes[n_subsets - 2] -= 1;
            sizes[n_subsets - 1] = 1;
        }
        sizes
    };
    let subset_of = sizes
        .iter()
        .enumerate()
        .flat_map(|(p, &l)| std::iter::repeat_n(p, l))
        .collect();
    Ok(Partition { sizes, subset_of })
}

/// Result of the τ-test together with the global preconditioned residual,
/// which the next search block is built from.
#[derive(Debug, Clone, PartialEq)]
pub struct TauTest {
    /// `t_i`, or `+inf` when the residual vanished.
    pub t: f64,
    pub converged: bool,
    pub precond_residual: DVector<f64>,
}

/// `t_i = gamma^T alpha / (r^T D(S)^{-1} r)`.
pub fn tau_test(
    gamma: &DVector<f64>,
    alpha: &DVector<f64>,
    r_next: &DVector<f64>,
    precond: &BlockJacobiPreconditioner,
) -> TauTest {
    let precond_residual = precond.apply(r_next);
    let denom = r_next.dot(&precond_residual);
    if denom < TAU_DENOMINATOR_FLOOR {
        return TauTest {
            t: f64::INFINITY,
            converged: true,
            precond_residual,
        };
    }
    TauTest {
        t: gamma.dot(alpha) / denom,
        converged: false,
        precond_residual,
    }
}

/// Splits `D(S)^{-1} r` into one column per subset: column `p` keeps the
/// block rows of subset `p` and is zero elsewhere.
pub fn expand_residual(precond_residual: &DVector<f64>, partition: &Partition) -> DMatrix<f64> {
    let n = precond_residual.len();
    assert_eq!(n, POSE_DIM * partition.num_poses());
    let mut z = DMatrix::zeros(n, partition.num_subsets());
    let mut row = 0;
    for (p, &l) in partition.sizes().iter().enumerate() {
        let len = POSE_DIM * l;
        z.view_mut((row, p), (len, 1))
            .copy_from(&precond_residual.rows(row, len));
        row += len;
    }
    z
}

struct Eigen {
    values: DVector<f64>,
    vectors: DMatrix<f64>,
}

fn symmetric_eigen(delta: &DMatrix<f64>) -> Eigen {
    let sym = (delta + delta.transpose()) * 0.5;
    let e = SymmetricEigen::new(sym);
    Eigen {
        values: e.eigenvalues,
        vectors: e.eigenvectors,
    }
}

fn assemble_pinv(e: &Eigen, keep: impl Fn(f64) -> bool) -> DMatrix<f64> {
    let n = e.values.len();
    let mut out = DMatrix::zeros(n, n);
    for (k, &lam) in e.values.iter().enumerate() {
        if keep(lam) {
            let v = e.vectors.column(k);
            out += v * v.transpose() / lam;
        }
    }
    out
}

/// Moore-Penrose pseudo-inverse of a symmetric matrix via its
/// eigendecomposition; eigenvalues with magnitude at most
/// `rank_tol * max |eigenvalue|` are treated as zero.
pub fn pseudo_inverse(delta: &DMatrix<f64>, rank_tol: f64) -> DMatrix<f64> {
    let e = symmetric_eigen(delta);
    let max = e.values.amax();
    if max == 0.0 {
        return DMatrix::zeros(delta.nrows(), delta.ncols());
    }
    let cutoff = rank_tol * max;
    assemble_pinv(&e, |lam| lam.abs() > cutoff)
}

/// `Delta^+` for the solver. `Delta = Q^T P` is positive semidefinite in
/// exact arithmetic, so non-positive eigenvalues are dropped as rank
/// deficiency and only clearly negative ones are a breakdown.
fn solver_pinv(delta: &DMatrix<f64>, iteration: usize) -> Result<DMatrix<f64>, SolverError> {
    if delta.iter().any(|v| !v.is_finite()) {
        return Err(SolverError::NonFinite { iteration });
    }
    if delta.nrows() == 1 {
        let d = delta[(0, 0)];
        if d <= 0.0 {
            return Err(SolverError::Breakdown {
                iteration,
                curvature: d,
            });
        }
        return Ok(DMatrix::from_element(1, 1, 1.0 / d));
    }
    let e = symmetric_eigen(delta);
    let max = e.values.max();
    let min = e.values.min();
    if max <= 0.0 || min < -INDEFINITE_TOL * max {
        return Err(SolverError::Breakdown {
            iteration,
            curvature: min.min(max),
        });
    }
    let cutoff = RANK_TOL_PER_DIRECTION * delta.nrows() as f64 * max;
    Ok(assemble_pinv(&e, |lam| lam > cutoff))
}

#[derive(Debug, Clone, PartialEq)]
pub struct McgConfig {
    pub tau: f64,
    pub partition: Partition,
    pub cg: CgConfig,
    /// Cap on stored history columns; `None` means `imax * N`.
    pub max_history_columns: Option<usize>,
}

impl McgConfig {
    pub fn new(tau: f64, partition: Partition, cg: CgConfig) -> Self {
        assert!(tau >= 0.0, "tau must be non-negative");
        McgConfig {
            tau,
            partition,
            cg,
            max_history_columns: None,
        }
    }

    fn history_budget(&self) -> usize {
        self.max_history_columns
            .unwrap_or(self.cg.imax.saturating_mul(self.partition.num_subsets()))
    }
}

/// One stored search block `(P_j, Q_j = S P_j, Delta_j^+)`.
#[derive(Debug, Clone)]
pub struct Direction {
    pub p: DMatrix<f64>,
    pub q: DMatrix<f64>,
    pub pinv_delta: DMatrix<f64>,
}

impl Direction {
    pub fn width(&self) -> usize {
        self.p.ncols()
    }
}

/// Iteration state of MCG, advanced one step at a time.
pub struct Mcg<'a> {
    s: &'a SchurMatrix,
    precond: &'a BlockJacobiPreconditioner,
    cfg: &'a McgConfig,
    x: DVector<f64>,
    r: DVector<f64>,
    p: DMatrix<f64>,
    q: DMatrix<f64>,
    history: Vec<Direction>,
    history_columns: usize,
    r0_norm: f64,
    stats: CgStats,
    status: StepStatus,
}

fn column(v: DVector<f64>) -> DMatrix<f64> {
    let n = v.len();
    DMatrix::from_vec(n, 1, v.data.into())
}

impl<'a> Mcg<'a> {
    pub fn new(
        s: &'a SchurMatrix,
        b_tilde: &DVector<f64>,
        precond: &'a BlockJacobiPreconditioner,
        x0: &DVector<f64>,
        cfg: &'a McgConfig,
    ) -> Result<Self, SolverError> {
        check_dims(s, b_tilde, precond, x0)?;
        if cfg.partition.num_poses() != s.num_poses() {
            return Err(SolverError::DimensionMismatch {
                expected: s.num_poses(),
                actual: cfg.partition.num_poses(),
            });
        }
        let r = -b_tilde - s.spmv(x0);
        let z = precond.apply(&r);
        let q = column(s.spmv(&z));
        let r0_norm = r.norm();
        if !r0_norm.is_finite() {
            return Err(SolverError::NonFinite { iteration: 0 });
        }
        Ok(Mcg {
            s,
            precond,
            cfg,
            x: x0.clone(),
            r,
            p: column(z),
            q,
            history: Vec::new(),
            history_columns: 0,
            r0_norm,
            stats: CgStats {
                residual_norm_history: vec![r0_norm],
                ..CgStats::default()
            },
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

    /// Completed search blocks `P_0 .. P_i`.
    pub fn history(&self) -> &[Direction] {
        &self.history
    }

    /// The next search block `P_{i+1}` and its recurred `Q_{i+1}`.
    pub fn current_direction(&self) -> (&DMatrix<f64>, &DMatrix<f64>) {
        (&self.p, &self.q)
    }

    pub fn step(&mut self) -> Result<StepStatus, SolverError> {
        if self.status == StepStatus::Converged {
            return Ok(self.status);
        }
        let i = self.stats.iterations;
        let width = self.p.ncols();
        let needed = self.history_columns + width;
        let budget = self.cfg.history_budget();
        if needed > budget {
            return Err(SolverError::HistoryBudgetExceeded { needed, budget });
        }

        let delta = self.q.transpose() * &self.p;
        let gamma = self.p.transpose() * &self.r;
        let pinv = solver_pinv(&delta, i)?;
        let alpha = &pinv * &gamma;
        self.x.gemv(1.0, &self.p, &alpha, 1.0);
        self.r.gemv(-1.0, &self.q, &alpha, 1.0);

        self.stats.iterations += 1;
        self.stats.search_widths.push(width);
        let r_norm = self.r.norm();
        self.stats.residual_norm_history.push(r_norm);
        if !r_norm.is_finite() {
            return Err(SolverError::NonFinite { iteration: i });
        }

        let p = std::mem::replace(&mut self.p, DMatrix::zeros(0, 0));
        let q = std::mem::replace(&mut self.q, DMatrix::zeros(0, 0));
        self.history.push(Direction {
            p,
            q,
            pinv_delta: pinv,
        });
        self.history_columns = needed;

        if r_norm < self.cfg.cg.epsilon * self.r0_norm {
            self.status = StepStatus::Converged;
            return Ok(self.status);
        }

        let test = tau_test(&gamma, &alpha, &self.r, self.precond);
        if test.converged {
            self.status = StepStatus::Converged;
            return Ok(self.status);
        }
        self.stats.tau_values.push(test.t);

        let (mut p_next, mut q_next) = if test.t < self.cfg.tau {
            let z = expand_residual(&test.precond_residual, &self.cfg.partition);
            let sz = self.s.spmm_structured(&z, &self.cfg.partition);
            (z, sz)
        } else {
            let sz = self.s.spmv(&test.precond_residual);
            (column(test.precond_residual), column(sz))
        };

        // Classical Gram-Schmidt in the S inner product: every beta_{i,j}
        // is computed from the unmodified Z_{i+1}.
        let z = p_next.clone();
        for dir in &self.history {
            let phi = dir.q.transpose() * &z;
            let beta = &dir.pinv_delta * phi;
            p_next.gemm(-1.0, &dir.p, &beta, 1.0);
            q_next.gemm(-1.0, &dir.q, &beta, 1.0);
        }
        if p_next.iter().any(|v| !v.is_finite()) {
            return Err(SolverError::NonFinite { iteration: i });
        }
        self.p = p_next;
        self.q = q_next;
        Ok(self.status)
    }

    pub fn finish(mut self, started: Instant) -> (DVector<f64>, CgStats) {
        self.stats.converged = self.status == StepStatus::Converged;
        self.stats.wall_time = started.elapsed().as_secs_f64();
        (self.x, self.stats)
    }
}

/// Solves `S x = -b~` with MCG. Stops on the same rule as PCG.
pub fn solve_mcg(
    s: &SchurMatrix,
    b_tilde: &DVector<f64>,
    precond: &BlockJacobiPreconditioner,
    x0: &DVector<f64>,
    cfg: &McgConfig,
) -> Result<(DVector<f64>, CgStats), SolverError> {
    let started = Instant::now();
    let mut solver = Mcg::new(s, b_tilde, precond, x0, cfg)?;
    while solver.status() == StepStatus::Running && solver.stats().iterations < cfg.cg.imax {
        solver.step()?;
    }
    Ok(solver.finish(started))
}
