//! Independent reference computations shared by the integration tests.

#![allow(dead_code)]

use mcg_ba::{residual_jacobians, BaProblem, Camera, Mat9, SchurMatrix, StateVector};
use nalgebra::{DMatrix, DVector, Matrix2x3, SMatrix, Vector3};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

pub const FD_STEP: f64 = 1e-6;

/// A camera with moderate rotation and distortion and a point 2 to 20 units
/// in front of it.
pub fn random_pair(rng: &mut ChaCha8Rng) -> (Camera, Vector3<f64>) {
    let camera = Camera {
        rotation: Vector3::from_fn(|_, _| rng.random_range(-1.0..1.0)),
        translation: Vector3::from_fn(|_, _| rng.random_range(-2.0..2.0)),
        focal: rng.random_range(300.0..1000.0),
        k1: rng.random_range(-0.1..0.1),
        k2: rng.random_range(-0.01..0.01),
    };
    let depth: f64 = rng.random_range(2.0..20.0);
    let in_camera = Vector3::new(
        rng.random_range(-0.5..0.5) * depth,
        rng.random_range(-0.5..0.5) * depth,
        -depth,
    );
    let rot = mcg_ba::camera::rotation_matrix(&camera.rotation);
    let point = rot.transpose() * (in_camera - camera.translation);
    (camera, point)
}

type Dd = twofloat::TwoFloat;

fn dd(v: f64) -> Dd {
    Dd::from(v)
}

/// Quotient refined by one Newton step; plain `TwoFloat` division is only
/// good to about 1e-17.
fn div(a: Dd, b: Dd) -> Dd {
    let q = a / b;
    q + (a - q * b) / b
}

/// Pixel coordinates in double-double precision, written out independently
/// of the library: `R x = x cos t + (k x x) sin t + k (k.x)(1 - cos t)`.
fn project_dd(params: &[Dd; 9], point: &[Dd; 3]) -> [Dd; 2] {
    let w = [params[0], params[1], params[2]];
    let theta = (w[0] * w[0] + w[1] * w[1] + w[2] * w[2]).sqrt();
    let k = [div(w[0], theta), div(w[1], theta), div(w[2], theta)];
    let (s, c) = (theta.sin(), theta.cos());
    let x = point;
    let cross = [
        k[1] * x[2] - k[2] * x[1],
        k[2] * x[0] - k[0] * x[2],
        k[0] * x[1] - k[1] * x[0],
    ];
    let kx = k[0] * x[0] + k[1] * x[1] + k[2] * x[2];
    let p: Vec<Dd> = (0..3)
        .map(|i| x[i] * c + cross[i] * s + k[i] * kx * (dd(1.0) - c) + params[3 + i])
        .collect();
    let n = [-div(p[0], p[2]), -div(p[1], p[2])];
    let r2 = n[0] * n[0] + n[1] * n[1];
    let radial = dd(1.0) + params[7] * r2 + params[8] * r2 * r2;
    [params[6] * radial * n[0], params[6] * radial * n[1]]
}

/// Central-difference Jacobians of the projection with step `FD_STEP`,
/// evaluated in double-double precision so that cancellation does not
/// swamp small entries.
pub fn fd_jacobians(camera: &Camera, point: &Vector3<f64>) -> (SMatrix<f64, 2, 9>, Matrix2x3<f64>) {
    let cam: [Dd; 9] = std::array::from_fn(|k| dd(camera.params()[k]));
    let pt: [Dd; 3] = std::array::from_fn(|k| dd(point[k]));
    let h = dd(FD_STEP);
    let diff = |up: [Dd; 2], down: [Dd; 2], row: usize| f64::from(div(up[row] - down[row], h * 2.0));
    let mut jc = SMatrix::<f64, 2, 9>::zeros();
    for k in 0..9 {
        let (mut plus, mut minus) = (cam, cam);
        plus[k] += h;
        minus[k] -= h;
        let (up, down) = (project_dd(&plus, &pt), project_dd(&minus, &pt));
        jc[(0, k)] = diff(up, down, 0);
        jc[(1, k)] = diff(up, down, 1);
    }
    let mut jp = Matrix2x3::zeros();
    for k in 0..3 {
        let (mut plus, mut minus) = (pt, pt);
        plus[k] += h;
        minus[k] -= h;
        let (up, down) = (project_dd(&cam, &plus), project_dd(&cam, &minus));
        jp[(0, k)] = diff(up, down, 0);
        jp[(1, k)] = diff(up, down, 1);
    }
    (jc, jp)
}

/// Full residual vector and Jacobian, one row pair per observation.
pub fn dense_jacobian(problem: &BaProblem, state: &StateVector) -> (DVector<f64>, DMatrix<f64>) {
    let np = 9 * problem.num_cameras();
    let cols = np + 3 * problem.num_points();
    let m = problem.num_observations();
    let mut r = DVector::zeros(2 * m);
    let mut j = DMatrix::zeros(2 * m, cols);
    for (k, o) in problem.observations.iter().enumerate() {
        let blk =
            residual_jacobians(&state.camera(o.camera), &state.point(o.point), &o.measurement).unwrap();
        r.fixed_rows_mut::<2>(2 * k).copy_from(&blk.residual);
        j.view_mut((2 * k, 9 * o.camera), (2, 9)).copy_from(&blk.camera);
        j.view_mut((2 * k, np + 3 * o.point), (2, 3)).copy_from(&blk.point);
    }
    (r, j)
}

/// Solves the full damped system `(J^T J + lambda D^2) dx = -J^T r` densely,
/// with `D^2 = diag(J^T J)` clamped to `[1e-10, 1e32]`. Returns the pose and
/// landmark parts.
pub fn dense_damped_step(
    problem: &BaProblem,
    state: &StateVector,
    lambda: f64,
) -> (DVector<f64>, DVector<f64>) {
    let (r, j) = dense_jacobian(problem, state);
    let jt = j.transpose();
    let mut h = &jt * &j;
    let g = &jt * &r;
    for k in 0..h.nrows() {
        let d = h[(k, k)].clamp(1e-10, 1e32);
        h[(k, k)] += lambda * d;
    }
    let dx = h.cholesky().expect("damped system is SPD").solve(&(-g));
    let np = 9 * problem.num_cameras();
    (dx.rows(0, np).into_owned(), dx.rows(np, dx.len() - np).into_owned())
}

/// Cuts a dense symmetric matrix into 9x9 blocks.
pub fn schur_from_dense(a: &DMatrix<f64>) -> SchurMatrix {
    let n = a.nrows() / 9;
    let mut entries = Vec::new();
    for m in 0..n {
        for c in 0..n {
            let blk: Mat9 = a.fixed_view::<9, 9>(9 * m, 9 * c).into_owned();
            if blk.iter().any(|&v| v != 0.0) || m == c {
                entries.push((m, c, blk));
            }
        }
    }
    SchurMatrix::from_blocks(n, entries)
}

/// Random SPD matrix of `9 n` rows with eigenvalues log-uniform in `[1, cond]`.
pub fn random_spd(n: usize, cond: f64, rng: &mut ChaCha8Rng) -> DMatrix<f64> {
    let dim = 9 * n;
    let g = DMatrix::from_fn(dim, dim, |_, _| rng.random_range(-1.0..1.0));
    let q = g.qr().q();
    let eig = DVector::from_fn(dim, |_, _| cond.powf(rng.random_range(0.0..1.0)));
    let a = &q * DMatrix::from_diagonal(&eig) * q.transpose();
    (&a + a.transpose()) * 0.5
}

pub fn random_vector(dim: usize, rng: &mut ChaCha8Rng) -> DVector<f64> {
    DVector::from_fn(dim, |_, _| rng.random_range(-1.0..1.0))
}

/// `max_i |a_i - b_i| / max(|a|_inf, |b|_inf)`.
pub fn rel_diff(a: &DVector<f64>, b: &DVector<f64>) -> f64 {
    let scale = a.amax().max(b.amax());
    if scale == 0.0 {
        0.0
    } else {
        (a - b).amax() / scale
    }
}


/// Exact preconditioned-CG iterates for `S x = -b` from `x0 = 0`: Galerkin
/// solutions on an Arnoldi basis of `K_k(M^{-1} S, M^{-1} r_0)`,
/// orthogonalized twice. Returns the first `steps` iterates.
pub fn krylov_iterates(
    s: &DMatrix<f64>,
    b: &DVector<f64>,
    precond: &mcg_ba::BlockJacobiPreconditioner,
    steps: usize,
) -> Vec<DVector<f64>> {
    let r0 = -b;
    let mut basis: Vec<DVector<f64>> = Vec::with_capacity(steps);
    let mut v = precond.apply(&r0);
    let mut iterates = Vec::with_capacity(steps);
    for _ in 0..steps {
        for _ in 0..2 {
            for q in &basis {
                let c = q.dot(&v);
                v -= q * c;
            }
        }
        let norm = v.norm();
        basis.push(v / norm);
        v = precond.apply(&(s * basis.last().unwrap()));
        let vk = DMatrix::from_columns(&basis);
        let y = (vk.transpose() * s * &vk)
            .cholesky()
            .expect("projected system is SPD")
            .solve(&(vk.transpose() * &r0));
        iterates.push(&vk * y);
    }
    iterates
}

/// Problem from the synthetic generator with noise and a perturbed start.
pub fn noisy_synthetic(np: usize, nl: usize, density: f64, seed: u64) -> mcg_ba::BaProblem {
    let mut cfg = mcg_ba::SyntheticConfig::new(np, nl, density, seed);
    cfg.noise_sigma = 0.5;
    cfg.initial_perturbation = 0.01;
    mcg_ba::generate_synthetic(&cfg).expect("feasible config").problem
}
