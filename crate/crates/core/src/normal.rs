//! Damped normal equations, landmark elimination and backsubstitution.

use nalgebra::{DVector, Matrix3, Vector3};
use rayon::prelude::*;

use crate::camera::{residual_jacobians, ProjectionError};
use crate::problem::{BaProblem, StateVector};
use crate::schur::{LinalgError, SchurMatrix};
use crate::{Mat9, Mat9x3, Vec9, POINT_DIM, POSE_DIM};

/// Bounds for the Marquardt scaling `D^2 = diag(J^T J)`.
pub const MIN_DAMPING: f64 = 1e-10;
pub const MAX_DAMPING: f64 = 1e32;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum DampingMode {
    /// `D^2 = diag(J^T J)` clamped to `[MIN_DAMPING, MAX_DAMPING]`.
    #[default]
    Marquardt,
    /// `D = I`.
    Identity,
}

/// Per-block pieces of `H = [U W; W^T V]` and the gradient `J^T r`.
///
/// The undamped Gauss-Newton blocks are kept so that a change of `lambda`
/// only has to redo the diagonal augmentation.
#[derive(Debug, Clone)]
pub struct NormalBlocks {
    /// Damped pose blocks `U_lambda`.
    pub u_blocks: Vec<Mat9>,
    /// Damped landmark blocks `V_lambda`.
    pub v_blocks: Vec<Matrix3<f64>>,
    /// `J_p^T J_l` restricted to each observation, in observation order.
    pub w_blocks: Vec<Mat9x3>,
    pub b_p: DVector<f64>,
    pub b_l: DVector<f64>,
    pub lambda: f64,
    pub damping: DampingMode,
    /// Diagonal of `D_p^T D_p`.
    pub d_p_diag: DVector<f64>,
    /// Diagonal of `D_l^T D_l`.
    pub d_l_diag: DVector<f64>,
    u_gn: Vec<Mat9>,
    v_gn: Vec<Matrix3<f64>>,
    /// (camera, point) of each observation.
    pairs: Vec<(usize, usize)>,
    camera_obs: Vec<Vec<usize>>,
    point_obs: Vec<Vec<usize>>,
}

impl NormalBlocks {
    pub fn num_cameras(&self) -> usize {
        self.u_blocks.len()
    }

    pub fn num_points(&self) -> usize {
        self.v_blocks.len()
    }

    /// Observation `(camera, point)` index pairs matching `w_blocks`.
    pub fn pairs(&self) -> &[(usize, usize)] {
        &self.pairs
    }

    /// Undamped `J_p^T J_p` block of camera `i`.
    pub fn gauss_newton_u(&self, i: usize) -> &Mat9 {
        &self.u_gn[i]
    }

    pub fn gauss_newton_v(&self, j: usize) -> &Matrix3<f64> {
        &self.v_gn[j]
    }

    /// Re-applies damping for a new `lambda` without touching the Jacobians.
    pub fn set_lambda(&mut self, lambda: f64) {
        self.lambda = lambda;
        for (i, (u, gn)) in self.u_blocks.iter_mut().zip(&self.u_gn).enumerate() {
            *u = *gn;
            for k in 0..POSE_DIM {
                u[(k, k)] += lambda * self.d_p_diag[POSE_DIM * i + k];
            }
        }
        for (j, (v, gn)) in self.v_blocks.iter_mut().zip(&self.v_gn).enumerate() {
            *v = *gn;
            for k in 0..POINT_DIM {
                v[(k, k)] += lambda * self.d_l_diag[POINT_DIM * j + k];
            }
        }
    }

    /// Blockwise `V_lambda^{-1}`.
    pub fn landmark_inverses(&self) -> Result<Vec<Matrix3<f64>>, LinalgError> {
        self.v_blocks
            .iter()
            .enumerate()
            .map(|(j, v)| {
                v.cholesky()
                    .map(|c| c.inverse())
                    .filter(|inv| inv.iter().all(|x| x.is_finite()))
                    .ok_or(LinalgError::SingularLandmarkBlock(j))
            })
            .collect()
    }
}

fn damping_diag(gn_diag: impl Iterator<Item = f64>, mode: DampingMode) -> Vec<f64> {
    match mode {
        DampingMode::Marquardt => gn_diag.map(|d| d.clamp(MIN_DAMPING, MAX_DAMPING)).collect(),
        DampingMode::Identity => gn_diag.map(|_| 1.0).collect(),
    }
}

/// Linearises every observation at `state` and accumulates the damped normal
/// equation blocks.
pub fn build_normal_blocks(
    problem: &BaProblem,
    state: &StateVector,
    lambda: f64,
    damping: DampingMode,
) -> Result<NormalBlocks, ProjectionError> {
    let n_cam = problem.num_cameras();
    let n_pt = problem.num_points();
    let linearised = problem
        .observations
        .par_iter()
        .enumerate()
        .map(|(k, o)| {
            residual_jacobians(&state.camera(o.camera), &state.point(o.point), &o.measurement)
                .map_err(|e| match e {
                    ProjectionError::Degenerate { depth } => {
                        ProjectionError::DegenerateObservation { index: k, depth }
                    }
                    other => other,
                })
        })
        .collect::<Result<Vec<_>, _>>()?;

    let mut u_gn = vec![Mat9::zeros(); n_cam];
    let mut v_gn = vec![Matrix3::zeros(); n_pt];
    let mut w_blocks = Vec::with_capacity(linearised.len());
    let mut b_p = DVector::zeros(POSE_DIM * n_cam);
    let mut b_l = DVector::zeros(POINT_DIM * n_pt);
    let mut pairs = Vec::with_capacity(linearised.len());
    let mut camera_obs = vec![Vec::new(); n_cam];
    let mut point_obs = vec![Vec::new(); n_pt];

    for (k, (o, blk)) in problem.observations.iter().zip(&linearised).enumerate() {
        let (i, j) = (o.camera, o.point);
        u_gn[i] += blk.camera.transpose() * blk.camera;
        v_gn[j] += blk.point.transpose() * blk.point;
        w_blocks.push(blk.camera.transpose() * blk.point);
        let mut bp = b_p.fixed_rows_mut::<9>(POSE_DIM * i);
        bp += blk.camera.transpose() * blk.residual;
        let mut bl = b_l.fixed_rows_mut::<3>(POINT_DIM * j);
        bl += blk.point.transpose() * blk.residual;
        pairs.push((i, j));
        camera_obs[i].push(k);
        point_obs[j].push(k);
    }

    let d_p_diag = DVector::from_vec(damping_diag(
        u_gn.iter().flat_map(|u| u.diagonal().iter().copied().collect::<Vec<_>>()),
        damping,
    ));
    let d_l_diag = DVector::from_vec(damping_diag(
        v_gn.iter().flat_map(|v| v.diagonal().iter().copied().collect::<Vec<_>>()),
        damping,
    ));

    let mut blocks = NormalBlocks {
        u_blocks: u_gn.clone(),
        v_blocks: v_gn.clone(),
        w_blocks,
        b_p,
        b_l,
        lambda,
        damping,
        d_p_diag,
        d_l_diag,
        u_gn,
        v_gn,
        pairs,
        camera_obs,
        point_obs,
    };
    blocks.set_lambda(lambda);
    Ok(blocks)
}

/// `S dx_p = -rhs` together with the landmark inverses needed to recover
/// `dx_l` afterwards.
#[derive(Debug, Clone)]
pub struct ReducedSystem {
    pub schur: SchurMatrix,
    /// `b~ = b_p - W V^{-1} b_l`.
    pub rhs: DVector<f64>,
    pub landmark_inverses: Vec<Matrix3<f64>>,
}

impl ReducedSystem {
    /// `dx_l = -V^{-1} (b_l + W^T dx_p)`, the second block row of
    /// `H dx = -b`.
    pub fn backsubstitute(&self, blocks: &NormalBlocks, delta_pose: &DVector<f64>) -> DVector<f64> {
        backsubstitute_with(blocks, &self.landmark_inverses, delta_pose)
    }
}

pub fn backsubstitute_with(
    blocks: &NormalBlocks,
    landmark_inverses: &[Matrix3<f64>],
    delta_pose: &DVector<f64>,
) -> DVector<f64> {
    assert_eq!(delta_pose.len(), POSE_DIM * blocks.num_cameras());
    let mut out = DVector::zeros(POINT_DIM * blocks.num_points());
    out.as_mut_slice()
        .par_chunks_mut(POINT_DIM)
        .enumerate()
        .for_each(|(j, dst)| {
            let mut acc: Vector3<f64> = blocks.b_l.fixed_rows::<3>(POINT_DIM * j).into_owned();
            for &k in &blocks.point_obs[j] {
                let i = blocks.pairs[k].0;
                acc += blocks.w_blocks[k].transpose() * delta_pose.fixed_rows::<9>(POSE_DIM * i);
            }
            let dx = -(landmark_inverses[j] * acc);
            dst.copy_from_slice(dx.as_slice());
        });
    out
}

/// Eliminates the landmarks: `S = U - W V^{-1} W^T`, `b~ = b_p - W V^{-1} b_l`.
/// Block `(m, j)` of `S` exists exactly when cameras `m` and `j` share a
/// point.
pub fn compute_schur(blocks: &NormalBlocks) -> Result<ReducedSystem, LinalgError> {
    let v_inv = blocks.landmark_inverses()?;
    let n_cam = blocks.num_cameras();

    let rows: Vec<(Vec<(usize, Mat9)>, Vec9)> = (0..n_cam)
        .into_par_iter()
        .map(|m| {
            let mut row: Vec<(usize, Mat9)> = vec![(m, blocks.u_blocks[m])];
            let mut rhs: Vec9 = blocks.b_p.fixed_rows::<9>(POSE_DIM * m).into_owned();
            for &k in &blocks.camera_obs[m] {
                let j_pt = blocks.pairs[k].1;
                let y = blocks.w_blocks[k] * v_inv[j_pt];
                rhs -= y * blocks.b_l.fixed_rows::<3>(POINT_DIM * j_pt);
                for &k2 in &blocks.point_obs[j_pt] {
                    let other = blocks.pairs[k2].0;
                    row.push((other, -(y * blocks.w_blocks[k2].transpose())));
                }
            }
            row.sort_by_key(|(j, _)| *j);
            let mut merged: Vec<(usize, Mat9)> = Vec::with_capacity(row.len());
            for (j, b) in row {
                match merged.last_mut() {
                    Some((lj, lb)) if *lj == j => *lb += b,
                    _ => merged.push((j, b)),
                }
            }
            // Rounding leaves the accumulated diagonal block slightly asymmetric.
            if let Some((_, d)) = merged.iter_mut().find(|(j, _)| *j == m) {
                *d = (*d + d.transpose()) * 0.5;
            }
            (merged, rhs)
        })
        .collect();

    let mut rhs = DVector::zeros(POSE_DIM * n_cam);
    let mut s_rows = Vec::with_capacity(n_cam);
    for (m, (row, r)) in rows.into_iter().enumerate() {
        rhs.fixed_rows_mut::<9>(POSE_DIM * m).copy_from(&r);
        s_rows.push(row);
    }
    let schur = SchurMatrix::from_rows(s_rows);

    Ok(ReducedSystem {
        schur,
        rhs,
        landmark_inverses: v_inv,
    })
}
