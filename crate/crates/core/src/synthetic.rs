//! Synthetic problems with a prescribed reduced-camera-system density.
//!
//! Cameras sit on a circle around the origin looking inwards, landmarks are
//! drawn uniformly from a cube around the origin, so every landmark is in
//! front of every camera. Visibility is then assigned combinatorially: a
//! co-visibility graph with the exact number of camera pairs required by the
//! target density is drawn first, and each landmark is observed by a clique
//! of that graph. The Schur pattern therefore matches the graph exactly.

use std::collections::HashSet;

use nalgebra::{Matrix3, Rotation3, Vector2, Vector3};
use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use thiserror::Error;

use crate::camera::project;
use crate::problem::{BaProblem, Camera, Observation};

const CIRCLE_RADIUS: f64 = 10.0;
const CUBE_HALF_SIZE: f64 = 2.0;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SyntheticError {
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error("density {density} infeasible for {n_poses} poses and {n_points} points: {reason}")]
    InfeasibleDensity {
        density: f64,
        n_poses: usize,
        n_points: usize,
        reason: String,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticConfig {
    pub n_poses: usize,
    pub n_points: usize,
    /// Fraction of present 9x9 blocks in `S`, diagonal included.
    pub target_density: f64,
    /// Standard deviation of the pixel noise on measurements.
    pub noise_sigma: f64,
    pub rng_seed: u64,
    /// Standard deviation of the perturbation applied to the returned
    /// cameras and points (world units for translations and points, a tenth
    /// of it in radians for rotations). Zero returns the ground truth.
    pub initial_perturbation: f64,
    /// Largest number of cameras observing a single landmark.
    pub max_track_length: usize,
}

impl SyntheticConfig {
    pub fn new(n_poses: usize, n_points: usize, target_density: f64, rng_seed: u64) -> Self {
        SyntheticConfig {
            n_poses,
            n_points,
            target_density,
            noise_sigma: 0.0,
            rng_seed,
            initial_perturbation: 0.0,
            max_track_length: 6,
        }
    }

    fn validate(&self) -> Result<(), SyntheticError> {
        let bad = |m: &str| Err(SyntheticError::InvalidConfig(m.to_owned()));
        if self.n_poses < 2 {
            return bad("need at least 2 poses");
        }
        if self.n_points < self.n_poses {
            return bad("need at least as many points as poses");
        }
        if !(self.target_density > 0.0 && self.target_density <= 1.0) {
            return bad("target density must lie in (0, 1]");
        }
        if [self.noise_sigma, self.initial_perturbation].iter().any(|v| v.is_nan() || *v < 0.0) {
            return bad("noise levels must be non-negative");
        }
        if self.max_track_length < 2 {
            return bad("tracks need at least 2 cameras");
        }
        Ok(())
    }
}

/// Ground truth plus the perturbed problem handed to the optimiser.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticProblem {
    pub problem: BaProblem,
    pub ground_truth: BaProblem,
}

fn look_at_origin(center: Vector3<f64>) -> (Vector3<f64>, Vector3<f64>) {
    // BAL cameras look down their negative z axis.
    let z_axis = center.normalize();
    let up = Vector3::y();
    let x_axis = up.cross(&z_axis).normalize();
    let y_axis = z_axis.cross(&x_axis);
    let rot = Matrix3::from_rows(&[x_axis.transpose(), y_axis.transpose(), z_axis.transpose()]);
    let r = Rotation3::from_matrix_unchecked(rot);
    (r.scaled_axis(), -(rot * center))
}

struct Graph {
    n: usize,
    adj: Vec<bool>,
}

impl Graph {
    fn new(n: usize) -> Self {
        Graph {
            n,
            adj: vec![false; n * n],
        }
    }

    fn connected(&self, a: usize, b: usize) -> bool {
        self.adj[a * self.n + b]
    }

    fn connect(&mut self, a: usize, b: usize) {
        self.adj[a * self.n + b] = true;
        self.adj[b * self.n + a] = true;
    }
}

fn ordered(a: usize, b: usize) -> (usize, usize) {
    (a.min(b), a.max(b))
}

/// Number of distinct off-diagonal camera pairs for a density target.
fn target_edges(n: usize, density: f64) -> usize {
    let max = n * (n - 1) / 2;
    let e = ((density * (n * n) as f64 - n as f64) / 2.0).round();
    (e.max(0.0) as usize).min(max)
}

/// Cameras sit on a ring in index order and see what their neighbours see:
/// pairs are added nearest first along the ring, ties broken at random.
fn build_graph(n: usize, edges: usize, rng: &mut ChaCha8Rng) -> (Graph, Vec<(usize, usize)>) {
    let ring_distance = |a: usize, b: usize| (b - a).min(n - (b - a));
    let mut candidates: Vec<(usize, usize)> = (0..n)
        .flat_map(|a| (a + 1..n).map(move |b| (a, b)))
        .collect();
    candidates.shuffle(rng);
    // Consecutive cameras come first so the graph is always connected.
    candidates.sort_by_key(|&(a, b)| (ring_distance(a, b), b - a != 1));
    candidates.truncate(edges);
    let mut g = Graph::new(n);
    for &(a, b) in &candidates {
        g.connect(a, b);
    }
    (g, candidates)
}

/// Grows a clique from `seed`, preferring cameras that close uncovered pairs.
fn grow_track(
    seed: (usize, usize),
    graph: &Graph,
    uncovered: &HashSet<(usize, usize)>,
    length: usize,
    rng: &mut ChaCha8Rng,
) -> Vec<usize> {
    let mut track = vec![seed.0, seed.1];
    while track.len() < length {
        let mut best: Vec<usize> = Vec::new();
        let mut best_gain = 0usize;
        for c in 0..graph.n {
            if track.contains(&c) || !track.iter().all(|&t| graph.connected(t, c)) {
                continue;
            }
            let gain = 1 + track
                .iter()
                .filter(|&&t| uncovered.contains(&ordered(t, c)))
                .count();
            if gain > best_gain {
                best_gain = gain;
                best.clear();
            }
            if gain == best_gain {
                best.push(c);
            }
        }
        match best.choose(rng) {
            Some(&c) => track.push(c),
            None => break,
        }
    }
    track.sort_unstable();
    track
}

/// Generates a problem whose Schur block density is as close to the target
/// as the pose count allows. Deterministic in the config.
pub fn generate_synthetic(cfg: &SyntheticConfig) -> Result<SyntheticProblem, SyntheticError> {
    cfg.validate()?;
    let n = cfg.n_poses;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.rng_seed);
    let infeasible = |reason: String| SyntheticError::InfeasibleDensity {
        density: cfg.target_density,
        n_poses: n,
        n_points: cfg.n_points,
        reason,
    };

    let edges = target_edges(n, cfg.target_density);
    if edges < n - 1 {
        let min = (3 * n - 2) as f64 / (n * n) as f64;
        return Err(infeasible(format!(
            "a connected co-visibility graph needs density >= {min:.4}"
        )));
    }
    let (graph, edge_list) = build_graph(n, edges, &mut rng);

    let mut uncovered: HashSet<(usize, usize)> = edge_list.iter().copied().collect();
    let mut seeds = edge_list.clone();
    seeds.shuffle(&mut rng);
    let mut seeds = seeds.into_iter();
    let mut tracks = Vec::with_capacity(cfg.n_points);
    for _ in 0..cfg.n_points {
        let seed = loop {
            match seeds.next() {
                Some(e) if uncovered.contains(&e) => break e,
                Some(_) => continue,
                None => break edge_list[rng.random_range(0..edge_list.len())],
            }
        };
        let length = rng.random_range(2..=cfg.max_track_length.min(n));
        let track = grow_track(seed, &graph, &uncovered, length, &mut rng);
        for (a, &ca) in track.iter().enumerate() {
            for &cb in &track[a + 1..] {
                uncovered.remove(&(ca, cb));
            }
        }
        tracks.push(track);
    }
    if !uncovered.is_empty() {
        return Err(infeasible(format!(
            "{} points cannot cover {} camera pairs ({} left uncovered)",
            cfg.n_points,
            edges,
            uncovered.len()
        )));
    }

    let focal = rand_distr::Uniform::new(500.0, 800.0).expect("valid range");
    let cameras: Vec<Camera> = (0..n)
        .map(|i| {
            let phi = 2.0 * std::f64::consts::PI * i as f64 / n as f64;
            let height = rng.random_range(-0.5..0.5);
            let center = Vector3::new(CIRCLE_RADIUS * phi.cos(), height, CIRCLE_RADIUS * phi.sin());
            let (rotation, translation) = look_at_origin(center);
            Camera {
                rotation,
                translation,
                focal: focal.sample(&mut rng),
                k1: rng.random_range(-0.05..0.05),
                k2: rng.random_range(-0.01..0.01),
            }
        })
        .collect();
    let landmarks: Vec<Vector3<f64>> = (0..cfg.n_points)
        .map(|_| {
            Vector3::from_fn(|_, _| rng.random_range(-CUBE_HALF_SIZE..CUBE_HALF_SIZE))
        })
        .collect();

    let pixel_noise = Normal::new(0.0, cfg.noise_sigma).expect("sigma validated");
    let mut observations = Vec::new();
    for (j, track) in tracks.iter().enumerate() {
        for &i in track {
            let exact = project(&cameras[i], &landmarks[j]).expect("points lie in front of cameras");
            let noise = Vector2::new(pixel_noise.sample(&mut rng), pixel_noise.sample(&mut rng));
            observations.push(Observation {
                camera: i,
                point: j,
                measurement: exact + noise,
            });
        }
    }
    // camera-major order, like published BAL files
    observations.sort_by_key(|o| (o.camera, o.point));

    let ground_truth = BaProblem {
        cameras,
        landmarks,
        observations,
    };
    let mut problem = ground_truth.clone();
    if cfg.initial_perturbation > 0.0 {
        let s = cfg.initial_perturbation;
        let world = Normal::new(0.0, s).expect("validated");
        let angle = Normal::new(0.0, 0.1 * s).expect("validated");
        for c in &mut problem.cameras {
            c.rotation += Vector3::from_fn(|_, _| angle.sample(&mut rng));
            c.translation += Vector3::from_fn(|_, _| world.sample(&mut rng));
        }
        for p in &mut problem.landmarks {
            *p += Vector3::from_fn(|_, _| world.sample(&mut rng));
        }
    }
    Ok(SyntheticProblem {
        problem,
        ground_truth,
    })
}
