//! Reprojection residuals, total cost and analytic Jacobians for the BAL
//! camera model.

use nalgebra::{Matrix2x3, Matrix3, Vector2, Vector3};
use rayon::prelude::*;
use thiserror::Error;

use crate::problem::{BaProblem, Camera, StateVector};
use crate::{Mat2x3, Mat2x9};

/// Depths closer to the camera plane than this are treated as degenerate.
pub const MIN_DEPTH: f64 = 1e-12;

/// Observations per block in the parallel cost reduction. The block partial
/// sums are added in block order, so the result does not depend on the thread
/// count.
const COST_CHUNK: usize = 4096;

#[derive(Debug, Error, Clone, Copy, PartialEq)]
pub enum ProjectionError {
    #[error("degenerate observation: point lies on the camera plane (depth {depth:e})")]
    Degenerate { depth: f64 },
    #[error("observation {index} is degenerate (depth {depth:e})")]
    DegenerateObservation { index: usize, depth: f64 },
}

impl ProjectionError {
    fn at(self, index: usize) -> Self {
        match self {
            ProjectionError::Degenerate { depth } => {
                ProjectionError::DegenerateObservation { index, depth }
            }
            other => other,
        }
    }
}

/// Residual and its Jacobians with respect to the 9 camera parameters and the
/// 3 point coordinates.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ResidualJacobianBlock {
    pub residual: Vector2<f64>,
    pub camera: Mat2x9,
    pub point: Mat2x3,
}

fn skew(v: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(0.0, -v.z, v.y, v.z, 0.0, -v.x, -v.y, v.x, 0.0)
}

/// Coefficients `sin(t)/t`, `(1-cos t)/t^2`, `(t - sin t)/t^3` with series
/// expansions near zero.
fn rodrigues_coefficients(theta2: f64) -> (f64, f64, f64) {
    if theta2 < 1e-8 {
        (
            1.0 - theta2 / 6.0,
            0.5 - theta2 / 24.0,
            1.0 / 6.0 - theta2 / 120.0,
        )
    } else {
        let theta = theta2.sqrt();
        let (s, c) = theta.sin_cos();
        (s / theta, (1.0 - c) / theta2, (theta - s) / (theta2 * theta))
    }
}

/// Rotation matrix of an axis-angle vector.
pub fn rotation_matrix(w: &Vector3<f64>) -> Matrix3<f64> {
    let (a, b, _) = rodrigues_coefficients(w.norm_squared());
    let k = skew(w);
    Matrix3::identity() + k * a + k * k * b
}

/// Left Jacobian of SO(3): `d(R(w) x)/dw = -[R(w) x]_x J_l(w)`.
fn left_jacobian(w: &Vector3<f64>) -> Matrix3<f64> {
    let (_, b, c) = rodrigues_coefficients(w.norm_squared());
    let k = skew(w);
    Matrix3::identity() + k * b + k * k * c
}

fn camera_point(camera: &Camera, rotation: &Matrix3<f64>, point: &Vector3<f64>) -> Vector3<f64> {
    rotation * point + camera.translation
}

fn check_depth(p: &Vector3<f64>) -> Result<(), ProjectionError> {
    if p.z.is_nan() || p.z.abs() < MIN_DEPTH {
        return Err(ProjectionError::Degenerate { depth: p.z });
    }
    Ok(())
}

/// Pixel coordinates of `point` seen by `camera`.
pub fn project(camera: &Camera, point: &Vector3<f64>) -> Result<Vector2<f64>, ProjectionError> {
    let p = camera_point(camera, &rotation_matrix(&camera.rotation), point);
    check_depth(&p)?;
    let n = Vector2::new(-p.x / p.z, -p.y / p.z);
    let r2 = n.norm_squared();
    let radial = 1.0 + camera.k1 * r2 + camera.k2 * r2 * r2;
    Ok(n * (camera.focal * radial))
}

/// `project(camera, point) - measurement`.
pub fn residual(
    camera: &Camera,
    point: &Vector3<f64>,
    measurement: &Vector2<f64>,
) -> Result<Vector2<f64>, ProjectionError> {
    Ok(project(camera, point)? - measurement)
}

/// Residual with analytic Jacobians. Camera parameter order is rotation (3),
/// translation (3), focal, k1, k2.
pub fn residual_jacobians(
    camera: &Camera,
    point: &Vector3<f64>,
    measurement: &Vector2<f64>,
) -> Result<ResidualJacobianBlock, ProjectionError> {
    let rot = rotation_matrix(&camera.rotation);
    let rx = rot * point;
    let p = rx + camera.translation;
    check_depth(&p)?;

    let inv_z = 1.0 / p.z;
    let n = Vector2::new(-p.x * inv_z, -p.y * inv_z);
    let r2 = n.norm_squared();
    let radial = 1.0 + camera.k1 * r2 + camera.k2 * r2 * r2;
    let d_radial = camera.k1 + 2.0 * camera.k2 * r2;
    let f = camera.focal;

    // d n / d p
    let dn_dp = Matrix2x3::new(
        -inv_z,
        0.0,
        p.x * inv_z * inv_z,
        0.0,
        -inv_z,
        p.y * inv_z * inv_z,
    );
    // d pixel / d n = f (radial I + 2 d_radial n n^T)
    let du_dn = (nalgebra::Matrix2::identity() * radial + n * n.transpose() * (2.0 * d_radial)) * f;
    let du_dp = du_dn * dn_dp;

    let mut jc = Mat2x9::zeros();
    let d_rot = -skew(&rx) * left_jacobian(&camera.rotation);
    jc.fixed_view_mut::<2, 3>(0, 0).copy_from(&(du_dp * d_rot));
    jc.fixed_view_mut::<2, 3>(0, 3).copy_from(&du_dp);
    jc.fixed_view_mut::<2, 1>(0, 6).copy_from(&(n * radial));
    jc.fixed_view_mut::<2, 1>(0, 7).copy_from(&(n * (f * r2)));
    jc.fixed_view_mut::<2, 1>(0, 8).copy_from(&(n * (f * r2 * r2)));

    Ok(ResidualJacobianBlock {
        residual: n * (f * radial) - measurement,
        camera: jc,
        point: du_dp * rot,
    })
}

/// Sum of squared residual norms over all observations.
pub fn total_cost(problem: &BaProblem, state: &StateVector) -> Result<f64, ProjectionError> {
    let obs = &problem.observations;
    let partials: Vec<f64> = obs
        .par_chunks(COST_CHUNK)
        .enumerate()
        .map(|(c, chunk)| {
            let mut sum = 0.0;
            for (k, o) in chunk.iter().enumerate() {
                let r = residual(&state.camera(o.camera), &state.point(o.point), &o.measurement)
                    .map_err(|e| e.at(c * COST_CHUNK + k))?;
                sum += r.norm_squared();
            }
            Ok(sum)
        })
        .collect::<Result<_, ProjectionError>>()?;
    Ok(partials.iter().sum())
}
