//! Bundle adjustment problems and the BAL text format.
//!
//! A BAL file is a stream of whitespace-separated decimals:
//!
//! 1. header `<num_cameras> <num_points> <num_observations>`
//! 2. one `<camera> <point> <u> <v>` record per observation
//! 3. nine scalars per camera: axis-angle rotation, translation, focal, k1, k2
//! 4. three scalars per point
//!
//! Line breaks carry no meaning beyond error reporting.

use std::collections::HashSet;
use std::fmt::Write as _;
use std::io::BufRead;

use nalgebra::{DVector, Vector2, Vector3};
use thiserror::Error;

use crate::{Vec9, POINT_DIM, POSE_DIM};

#[derive(Debug, Error)]
pub enum ParseError {
    #[error("line {line}: malformed header: {message}")]
    MalformedHeader { line: usize, message: String },
    #[error("line {line}: invalid number `{token}`")]
    InvalidNumber { line: usize, token: String },
    #[error("line {line}: {kind} index {index} out of range (count {count})")]
    IndexOutOfRange {
        line: usize,
        kind: &'static str,
        index: usize,
        count: usize,
    },
    #[error("line {line}: duplicate observation of point {point} by camera {camera}")]
    DuplicateObservation {
        line: usize,
        camera: usize,
        point: usize,
    },
    #[error("line {line}: premature end of stream, expected {expected}")]
    UnexpectedEof { line: usize, expected: &'static str },
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Error, PartialEq)]
pub enum InvalidProblem {
    #[error("problem has no observations")]
    NoObservations,
    #[error("observation {0} references a camera or point out of range")]
    IndexOutOfRange(usize),
    #[error("observation {0} duplicates an earlier (camera, point) pair")]
    Duplicate(usize),
    #[error("camera {0} has no observations")]
    UnobservedCamera(usize),
    #[error("point {0} has no observations")]
    UnobservedPoint(usize),
}

/// Snavely/BAL camera: `p = R(rotation) X + translation`, perspective
/// division with a negated sign, then two-term radial distortion and focal.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Camera {
    pub rotation: Vector3<f64>,
    pub translation: Vector3<f64>,
    pub focal: f64,
    pub k1: f64,
    pub k2: f64,
}

impl Camera {
    pub fn from_params(p: &[f64]) -> Self {
        assert_eq!(p.len(), POSE_DIM);
        Camera {
            rotation: Vector3::new(p[0], p[1], p[2]),
            translation: Vector3::new(p[3], p[4], p[5]),
            focal: p[6],
            k1: p[7],
            k2: p[8],
        }
    }

    pub fn params(&self) -> Vec9 {
        let r = &self.rotation;
        let t = &self.translation;
        Vec9::from_column_slice(&[r.x, r.y, r.z, t.x, t.y, t.z, self.focal, self.k1, self.k2])
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Observation {
    pub camera: usize,
    pub point: usize,
    pub measurement: Vector2<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BaProblem {
    pub cameras: Vec<Camera>,
    pub landmarks: Vec<Vector3<f64>>,
    pub observations: Vec<Observation>,
}

/// Flat optimisation state: `9 * n_p` pose scalars followed (separately) by
/// `3 * n_l` landmark scalars.
#[derive(Debug, Clone, PartialEq)]
pub struct StateVector {
    pub pose: DVector<f64>,
    pub landmark: DVector<f64>,
}

impl StateVector {
    pub fn num_cameras(&self) -> usize {
        self.pose.len() / POSE_DIM
    }

    pub fn num_points(&self) -> usize {
        self.landmark.len() / POINT_DIM
    }

    pub fn camera(&self, i: usize) -> Camera {
        Camera::from_params(&self.pose.as_slice()[POSE_DIM * i..POSE_DIM * (i + 1)])
    }

    pub fn point(&self, j: usize) -> Vector3<f64> {
        Vector3::from_column_slice(&self.landmark.as_slice()[POINT_DIM * j..POINT_DIM * (j + 1)])
    }

    /// `x + (dx_p, dx_l)`.
    pub fn updated(&self, delta_pose: &DVector<f64>, delta_landmark: &DVector<f64>) -> Self {
        StateVector {
            pose: &self.pose + delta_pose,
            landmark: &self.landmark + delta_landmark,
        }
    }
}

impl BaProblem {
    pub fn num_cameras(&self) -> usize {
        self.cameras.len()
    }

    pub fn num_points(&self) -> usize {
        self.landmarks.len()
    }

    pub fn num_observations(&self) -> usize {
        self.observations.len()
    }

    pub fn state(&self) -> StateVector {
        let mut pose = DVector::zeros(POSE_DIM * self.cameras.len());
        for (i, cam) in self.cameras.iter().enumerate() {
            pose.fixed_rows_mut::<POSE_DIM>(POSE_DIM * i)
                .copy_from(&cam.params());
        }
        let mut landmark = DVector::zeros(POINT_DIM * self.landmarks.len());
        for (j, p) in self.landmarks.iter().enumerate() {
            landmark.fixed_rows_mut::<POINT_DIM>(POINT_DIM * j).copy_from(p);
        }
        StateVector { pose, landmark }
    }

    /// Copy of the problem with cameras and landmarks replaced by `state`.
    pub fn with_state(&self, state: &StateVector) -> Self {
        BaProblem {
            cameras: (0..self.cameras.len()).map(|i| state.camera(i)).collect(),
            landmarks: (0..self.landmarks.len()).map(|j| state.point(j)).collect(),
            observations: self.observations.clone(),
        }
    }

    pub fn validate(&self) -> Result<(), InvalidProblem> {
        if self.observations.is_empty() {
            return Err(InvalidProblem::NoObservations);
        }
        let mut seen = HashSet::with_capacity(self.observations.len());
        let mut cam_seen = vec![false; self.cameras.len()];
        let mut pt_seen = vec![false; self.landmarks.len()];
        for (k, obs) in self.observations.iter().enumerate() {
            if obs.camera >= self.cameras.len() || obs.point >= self.landmarks.len() {
                return Err(InvalidProblem::IndexOutOfRange(k));
            }
            if !seen.insert((obs.camera, obs.point)) {
                return Err(InvalidProblem::Duplicate(k));
            }
            cam_seen[obs.camera] = true;
            pt_seen[obs.point] = true;
        }
        if let Some(i) = cam_seen.iter().position(|s| !s) {
            return Err(InvalidProblem::UnobservedCamera(i));
        }
        if let Some(j) = pt_seen.iter().position(|s| !s) {
            return Err(InvalidProblem::UnobservedPoint(j));
        }
        Ok(())
    }

    /// Drops cameras and points without observations and renumbers the rest.
    pub fn prune(&mut self) -> PruneReport {
        let mut cam_used = vec![false; self.cameras.len()];
        let mut pt_used = vec![false; self.landmarks.len()];
        for obs in &self.observations {
            cam_used[obs.camera] = true;
            pt_used[obs.point] = true;
        }
        let cam_map = compact(&cam_used);
        let pt_map = compact(&pt_used);
        let report = PruneReport {
            cameras: cam_used.iter().filter(|u| !**u).count(),
            points: pt_used.iter().filter(|u| !**u).count(),
        };
        if report.cameras == 0 && report.points == 0 {
            return report;
        }
        self.cameras = retain_used(&self.cameras, &cam_used);
        self.landmarks = retain_used(&self.landmarks, &pt_used);
        for obs in &mut self.observations {
            obs.camera = cam_map[obs.camera];
            obs.point = pt_map[obs.point];
        }
        report
    }
}

fn compact(used: &[bool]) -> Vec<usize> {
    let mut next = 0;
    used.iter()
        .map(|&u| {
            let idx = next;
            if u {
                next += 1;
            }
            idx
        })
        .collect()
}

fn retain_used<T: Copy>(items: &[T], used: &[bool]) -> Vec<T> {
    items
        .iter()
        .zip(used)
        .filter(|(_, &u)| u)
        .map(|(t, _)| *t)
        .collect()
}

/// Number of cameras and points removed because nothing observed them.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct PruneReport {
    pub cameras: usize,
    pub points: usize,
}

struct Tokens<R> {
    reader: R,
    line: usize,
    buf: String,
    pending: Vec<String>,
}

impl<R: BufRead> Tokens<R> {
    fn new(reader: R) -> Self {
        Tokens {
            reader,
            line: 0,
            buf: String::new(),
            pending: Vec::new(),
        }
    }

    fn next_token(&mut self, expected: &'static str) -> Result<(usize, String), ParseError> {
        while self.pending.is_empty() {
            self.buf.clear();
            if self.reader.read_line(&mut self.buf)? == 0 {
                return Err(ParseError::UnexpectedEof {
                    line: self.line,
                    expected,
                });
            }
            self.line += 1;
            self.pending = self.buf.split_whitespace().rev().map(str::to_owned).collect();
        }
        let tok = self.pending.pop().expect("non-empty");
        Ok((self.line, tok))
    }

    fn next_f64(&mut self, expected: &'static str) -> Result<f64, ParseError> {
        let (line, tok) = self.next_token(expected)?;
        tok.parse::<f64>()
            .map_err(|_| ParseError::InvalidNumber { line, token: tok })
    }

    fn next_index(&mut self, kind: &'static str, count: usize) -> Result<usize, ParseError> {
        let (line, tok) = self.next_token(kind)?;
        let index = tok
            .parse::<usize>()
            .map_err(|_| ParseError::InvalidNumber { line, token: tok })?;
        if index >= count {
            return Err(ParseError::IndexOutOfRange {
                line,
                kind,
                index,
                count,
            });
        }
        Ok(index)
    }
}

/// Parses a BAL stream, pruning orphan cameras and points.
pub fn parse_bal<R: BufRead>(reader: R) -> Result<BaProblem, ParseError> {
    parse_bal_with_report(reader).map(|(p, _)| p)
}

pub fn parse_bal_with_report<R: BufRead>(
    reader: R,
) -> Result<(BaProblem, PruneReport), ParseError> {
    let mut tokens = Tokens::new(reader);
    let mut header = [0usize; 3];
    for (slot, name) in header
        .iter_mut()
        .zip(["camera count", "point count", "observation count"])
    {
        let (line, tok) = tokens.next_token("header").map_err(|e| match e {
            ParseError::UnexpectedEof { line, .. } => ParseError::MalformedHeader {
                line: line.max(1),
                message: format!("missing {name}"),
            },
            other => other,
        })?;
        *slot = tok.parse().map_err(|_| ParseError::MalformedHeader {
            line,
            message: format!("{name} `{tok}` is not a non-negative integer"),
        })?;
    }
    let [n_cam, n_pt, n_obs] = header;

    let mut observations = Vec::with_capacity(n_obs);
    let mut seen = HashSet::with_capacity(n_obs);
    for _ in 0..n_obs {
        let camera = tokens.next_index("camera", n_cam)?;
        let point = tokens.next_index("point", n_pt)?;
        let line = tokens.line;
        if !seen.insert((camera, point)) {
            return Err(ParseError::DuplicateObservation {
                line,
                camera,
                point,
            });
        }
        let u = tokens.next_f64("observation u")?;
        let v = tokens.next_f64("observation v")?;
        observations.push(Observation {
            camera,
            point,
            measurement: Vector2::new(u, v),
        });
    }

    let mut cameras = Vec::with_capacity(n_cam);
    let mut params = [0.0; POSE_DIM];
    for _ in 0..n_cam {
        for p in params.iter_mut() {
            *p = tokens.next_f64("camera parameter")?;
        }
        cameras.push(Camera::from_params(&params));
    }

    let mut landmarks = Vec::with_capacity(n_pt);
    for _ in 0..n_pt {
        let x = tokens.next_f64("point coordinate")?;
        let y = tokens.next_f64("point coordinate")?;
        let z = tokens.next_f64("point coordinate")?;
        landmarks.push(Vector3::new(x, y, z));
    }

    let mut problem = BaProblem {
        cameras,
        landmarks,
        observations,
    };
    let report = problem.prune();
    Ok((problem, report))
}

/// Serialises to BAL text. Scalars use Rust's shortest round-trip formatting,
/// so parsing the output reproduces the problem bit for bit.
pub fn write_bal(problem: &BaProblem) -> Result<String, InvalidProblem> {
    problem.validate()?;
    let mut out = String::with_capacity(
        32 * problem.observations.len() + 24 * (9 * problem.cameras.len() + 3 * problem.landmarks.len()),
    );
    // Writing into a String cannot fail.
    let _ = writeln!(
        out,
        "{} {} {}",
        problem.cameras.len(),
        problem.landmarks.len(),
        problem.observations.len()
    );
    for obs in &problem.observations {
        let _ = writeln!(
            out,
            "{} {} {:?} {:?}",
            obs.camera, obs.point, obs.measurement.x, obs.measurement.y
        );
    }
    for cam in &problem.cameras {
        for v in cam.params().iter() {
            let _ = writeln!(out, "{v:?}");
        }
    }
    for p in &problem.landmarks {
        for v in p.iter() {
            let _ = writeln!(out, "{v:?}");
        }
    }
    Ok(out)
}
