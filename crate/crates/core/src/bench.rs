//! Benchmark harness: single runs, PCG/MCG comparisons and parameter sweeps,
//! with CSV output.
//!
//! All floating-point CSV fields are written with 17 significant digits.
//! Timing columns are wall-clock measurements and naturally vary between
//! runs; every other column is reproducible for a fixed input and seed.

use std::fmt::Write as _;
use std::fs;
use std::io::BufReader;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use thiserror::Error;

use crate::lm::{optimize, LmConfig, LmError, LmTrace, SolverKind, Termination};
use crate::problem::{parse_bal_with_report, BaProblem, ParseError};
use crate::synthetic::{generate_synthetic, SyntheticConfig, SyntheticError};

#[derive(Debug, Error)]
pub enum InputError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("{path}: {source}")]
    Parse { path: PathBuf, source: ParseError },
    #[error("invalid synthetic spec `{spec}`: {message}")]
    SyntheticSpec { spec: String, message: String },
    #[error(transparent)]
    Synthetic(#[from] SyntheticError),
}

#[derive(Debug, Error)]
pub enum BenchError {
    #[error(transparent)]
    Input(#[from] InputError),
    #[error(transparent)]
    Solver(#[from] LmError),
    #[error("{0}")]
    InvalidArgument(String),
    #[error("cannot write output: {0}")]
    Output(#[from] std::io::Error),
}

/// Where a problem comes from: a BAL file or an inline synthetic spec
/// `synth:seed=1,np=20,nl=500,density=0.8[,noise=..][,perturb=..][,track=..]`.
#[derive(Debug, Clone, PartialEq)]
pub enum InputSpec {
    File(PathBuf),
    Synthetic(SyntheticConfig),
}

/// Pixel noise used by inline synthetic specs unless `noise=` is given.
pub const DEFAULT_SYNTH_NOISE: f64 = 0.5;
/// Initial-state perturbation used by inline synthetic specs unless
/// `perturb=` is given.
pub const DEFAULT_SYNTH_PERTURBATION: f64 = 0.01;

impl FromStr for InputSpec {
    type Err = InputError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let Some(body) = s.strip_prefix("synth:") else {
            return Ok(InputSpec::File(PathBuf::from(s)));
        };
        let err = |message: String| InputError::SyntheticSpec {
            spec: s.to_owned(),
            message,
        };
        let mut cfg = SyntheticConfig::new(0, 0, 0.0, 0);
        cfg.noise_sigma = DEFAULT_SYNTH_NOISE;
        cfg.initial_perturbation = DEFAULT_SYNTH_PERTURBATION;
        let mut have = (false, false, false);
        for kv in body.split(',').filter(|kv| !kv.is_empty()) {
            let (key, value) = kv
                .split_once('=')
                .ok_or_else(|| err(format!("expected key=value, got `{kv}`")))?;
            let bad = |_: std::num::ParseIntError| err(format!("bad value for {key}: `{value}`"));
            let badf = |_: std::num::ParseFloatError| err(format!("bad value for {key}: `{value}`"));
            match key.trim() {
                "seed" => cfg.rng_seed = value.parse().map_err(bad)?,
                "np" => {
                    cfg.n_poses = value.parse().map_err(bad)?;
                    have.0 = true;
                }
                "nl" => {
                    cfg.n_points = value.parse().map_err(bad)?;
                    have.1 = true;
                }
                "density" => {
                    cfg.target_density = value.parse().map_err(badf)?;
                    have.2 = true;
                }
                "noise" => cfg.noise_sigma = value.parse().map_err(badf)?,
                "perturb" => cfg.initial_perturbation = value.parse().map_err(badf)?,
                "track" => cfg.max_track_length = value.parse().map_err(bad)?,
                other => return Err(err(format!("unknown key `{other}`"))),
            }
        }
        if have != (true, true, true) {
            return Err(err("np, nl and density are required".to_owned()));
        }
        Ok(InputSpec::Synthetic(cfg))
    }
}

impl InputSpec {
    pub fn name(&self) -> String {
        match self {
            InputSpec::File(p) => p
                .file_stem()
                .map_or_else(|| p.display().to_string(), |s| s.to_string_lossy().into_owned()),
            InputSpec::Synthetic(c) => format!(
                "synth-np{}-nl{}-d{}-s{}",
                c.n_poses, c.n_points, c.target_density, c.rng_seed
            ),
        }
    }

    pub fn load(&self) -> Result<BaProblem, InputError> {
        match self {
            InputSpec::File(path) => {
                let file = fs::File::open(path).map_err(|source| InputError::Io {
                    path: path.clone(),
                    source,
                })?;
                let (problem, _) =
                    parse_bal_with_report(BufReader::new(file)).map_err(|source| InputError::Parse {
                        path: path.clone(),
                        source,
                    })?;
                Ok(problem)
            }
            InputSpec::Synthetic(cfg) => Ok(generate_synthetic(cfg)?.problem),
        }
    }
}

/// Co-observation block density of `S` computed from the observation
/// pattern alone.
pub fn structural_density(problem: &BaProblem) -> f64 {
    let n = problem.num_cameras();
    if n == 0 {
        return 0.0;
    }
    let mut by_point = vec![Vec::new(); problem.num_points()];
    for o in &problem.observations {
        by_point[o.point].push(o.camera);
    }
    let mut neighbours: Vec<Vec<usize>> = vec![Vec::new(); n];
    for cams in &by_point {
        for &a in cams {
            neighbours[a].extend_from_slice(cams);
        }
    }
    let blocks: usize = neighbours
        .iter_mut()
        .map(|row| {
            row.sort_unstable();
            row.dedup();
            row.len()
        })
        .sum();
    blocks as f64 / (n * n) as f64
}

/// Summary of one optimisation run.
#[derive(Debug, Clone, PartialEq)]
pub struct RunReport {
    pub problem: String,
    pub solver: SolverKind,
    pub threads: usize,
    /// Total seconds in the linear solver.
    pub solver_time: f64,
    /// Total seconds for the whole optimisation.
    pub total_time: f64,
    /// `t_MCG / t_PCG` when part of a comparison.
    pub runtime_ratio: Option<f64>,
    pub density: f64,
    pub outer_iterations: usize,
    pub inner_iterations: usize,
    pub termination: Termination,
    pub initial_cost: f64,
    pub final_cost: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunOutcome {
    pub report: RunReport,
    pub trace: LmTrace,
}

/// Resolves the automatic subset count (`None`) to `max(1, n_p / 10)`.
pub fn resolve_subsets(num_subsets: Option<usize>, n_poses: usize) -> usize {
    num_subsets.unwrap_or((n_poses / 10).max(1))
}

pub fn run_problem(
    name: &str,
    problem: &BaProblem,
    cfg: &LmConfig,
    threads: usize,
) -> Result<RunOutcome, LmError> {
    let (_, trace) = optimize(problem, &problem.state(), cfg)?;
    let report = RunReport {
        problem: name.to_owned(),
        solver: cfg.solver,
        threads,
        solver_time: trace.total_solve_time(),
        total_time: trace.total_time,
        runtime_ratio: None,
        density: structural_density(problem),
        outer_iterations: trace.iterations.len(),
        inner_iterations: trace.total_inner_iterations(),
        termination: trace.termination,
        initial_cost: trace.initial_cost,
        final_cost: trace.final_cost(),
    };
    Ok(RunOutcome { report, trace })
}

#[derive(Debug, Clone, PartialEq)]
pub struct Comparison {
    pub pcg: RunOutcome,
    pub mcg: RunOutcome,
    pub solver_runtime_ratio: f64,
    pub global_runtime_ratio: f64,
    /// MCG total inner iterations over PCG total inner iterations.
    pub iteration_ratio: f64,
    /// Largest relative difference between the per-iteration costs of the
    /// two runs over their common length.
    pub max_cost_divergence: f64,
}

fn ratio(a: f64, b: f64) -> f64 {
    if b > 0.0 {
        a / b
    } else if a == 0.0 {
        1.0
    } else {
        f64::INFINITY
    }
}

pub fn cost_divergence(a: &LmTrace, b: &LmTrace) -> f64 {
    a.cost_trace()
        .iter()
        .zip(b.cost_trace())
        .map(|(x, y)| {
            let scale = x.abs().max(y.abs());
            if scale == 0.0 {
                0.0
            } else {
                (x - y).abs() / scale
            }
        })
        .fold(0.0, f64::max)
}

fn combine(pcg: RunOutcome, mut mcg: RunOutcome) -> Comparison {
    let solver_runtime_ratio = ratio(mcg.report.solver_time, pcg.report.solver_time);
    mcg.report.runtime_ratio = Some(solver_runtime_ratio);
    Comparison {
        solver_runtime_ratio,
        global_runtime_ratio: ratio(mcg.report.total_time, pcg.report.total_time),
        iteration_ratio: ratio(
            mcg.report.inner_iterations as f64,
            pcg.report.inner_iterations as f64,
        ),
        max_cost_divergence: cost_divergence(&pcg.trace, &mcg.trace),
        pcg,
        mcg,
    }
}

/// Runs PCG and MCG with otherwise identical LM settings from the same start.
pub fn compare(
    name: &str,
    problem: &BaProblem,
    base: &LmConfig,
    tau: f64,
    num_subsets: usize,
    threads: usize,
) -> Result<Comparison, LmError> {
    let pcg_cfg = LmConfig {
        solver: SolverKind::Pcg,
        ..*base
    };
    let pcg = run_problem(name, problem, &pcg_cfg, threads)?;
    compare_against(name, problem, base, pcg, tau, num_subsets, threads)
}

fn compare_against(
    name: &str,
    problem: &BaProblem,
    base: &LmConfig,
    pcg: RunOutcome,
    tau: f64,
    num_subsets: usize,
    threads: usize,
) -> Result<Comparison, LmError> {
    let mcg_cfg = LmConfig {
        solver: SolverKind::Mcg { tau, num_subsets },
        ..*base
    };
    let mcg = run_problem(name, problem, &mcg_cfg, threads)?;
    Ok(combine(pcg, mcg))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SweepKind {
    Tau,
    Subsets,
    Density,
}

impl FromStr for SweepKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "tau" => Ok(SweepKind::Tau),
            "subsets" => Ok(SweepKind::Subsets),
            "density" => Ok(SweepKind::Density),
            other => Err(format!("unknown sweep `{other}` (expected tau, subsets or density)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    pub value: f64,
    pub seed: Option<u64>,
    pub comparison: Comparison,
}

/// MCG against a single PCG baseline for each `tau` in `grid`.
pub fn sweep_tau(
    name: &str,
    problem: &BaProblem,
    base: &LmConfig,
    num_subsets: usize,
    grid: &[f64],
    threads: usize,
) -> Result<Vec<SweepRow>, LmError> {
    let pcg = run_problem(name, problem, &LmConfig { solver: SolverKind::Pcg, ..*base }, threads)?;
    grid.iter()
        .map(|&tau| {
            let comparison =
                compare_against(name, problem, base, pcg.clone(), tau, num_subsets, threads)?;
            Ok(SweepRow {
                value: tau,
                seed: None,
                comparison,
            })
        })
        .collect()
}

/// MCG against a single PCG baseline for each subset count in `grid`.
pub fn sweep_subsets(
    name: &str,
    problem: &BaProblem,
    base: &LmConfig,
    tau: f64,
    grid: &[usize],
    threads: usize,
) -> Result<Vec<SweepRow>, LmError> {
    let pcg = run_problem(name, problem, &LmConfig { solver: SolverKind::Pcg, ..*base }, threads)?;
    grid.iter()
        .map(|&n| {
            let comparison = compare_against(name, problem, base, pcg.clone(), tau, n, threads)?;
            Ok(SweepRow {
                value: n as f64,
                seed: None,
                comparison,
            })
        })
        .collect()
}

/// One comparison per `(density, seed)` on synthetic problems derived from
/// `template`.
#[allow(clippy::too_many_arguments)]
pub fn sweep_density(
    template: &SyntheticConfig,
    base: &LmConfig,
    tau: f64,
    num_subsets: Option<usize>,
    grid: &[f64],
    seeds: &[u64],
    threads: usize,
) -> Result<Vec<SweepRow>, BenchError> {
    let mut rows = Vec::with_capacity(grid.len() * seeds.len());
    for &density in grid {
        for &seed in seeds {
            let cfg = SyntheticConfig {
                target_density: density,
                rng_seed: seed,
                ..template.clone()
            };
            let spec = InputSpec::Synthetic(cfg);
            let problem = spec.load()?;
            let n = resolve_subsets(num_subsets, problem.num_cameras());
            let comparison = compare(&spec.name(), &problem, base, tau, n, threads)?;
            rows.push(SweepRow {
                value: density,
                seed: Some(seed),
                comparison,
            });
        }
    }
    Ok(rows)
}

/// Float field with 17 significant digits.
pub fn fmt_f64(v: f64) -> String {
    format!("{v:.16e}")
}

fn termination_name(t: Termination) -> &'static str {
    match t {
        Termination::FunctionTolerance => "function_tolerance",
        Termination::MaxIterations => "max_iterations",
    }
}

pub const TRACE_HEADER: &str = "iter,cost,lambda,inner_iters,solve_seconds,cumulative_seconds";

pub fn trace_csv(trace: &LmTrace) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "{TRACE_HEADER}");
    for (k, it) in trace.iterations.iter().enumerate() {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{}",
            k + 1,
            fmt_f64(it.cost_after()),
            fmt_f64(it.lambda),
            it.inner_iterations,
            fmt_f64(it.solve_time),
            fmt_f64(it.cumulative_time)
        );
    }
    out
}

pub const REPORT_HEADER: &str = "problem,solver,num_subsets,tau,solver_seconds,total_seconds,runtime_ratio,density,outer_iterations,inner_iterations,threads,termination,initial_cost,final_cost";

pub fn report_csv(reports: &[&RunReport]) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "{REPORT_HEADER}");
    for r in reports {
        let (n, tau) = match r.solver {
            SolverKind::Pcg => (String::new(), String::new()),
            SolverKind::Mcg { tau, num_subsets } => (num_subsets.to_string(), fmt_f64(tau)),
        };
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{},{},{},{},{},{},{}",
            r.problem,
            r.solver.name(),
            n,
            tau,
            fmt_f64(r.solver_time),
            fmt_f64(r.total_time),
            r.runtime_ratio.map(fmt_f64).unwrap_or_default(),
            fmt_f64(r.density),
            r.outer_iterations,
            r.inner_iterations,
            r.threads,
            termination_name(r.termination),
            fmt_f64(r.initial_cost),
            fmt_f64(r.final_cost)
        );
    }
    out
}

pub const COMPARISON_HEADER: &str = "problem,num_subsets,tau,solver_runtime_ratio,global_runtime_ratio,iteration_ratio,pcg_inner_iterations,mcg_inner_iterations,max_cost_divergence,density";

fn comparison_fields(c: &Comparison) -> String {
    let (n, tau) = match c.mcg.report.solver {
        SolverKind::Mcg { tau, num_subsets } => (num_subsets, tau),
        SolverKind::Pcg => (1, 0.0),
    };
    format!(
        "{},{},{},{},{},{},{},{},{},{}",
        c.mcg.report.problem,
        n,
        fmt_f64(tau),
        fmt_f64(c.solver_runtime_ratio),
        fmt_f64(c.global_runtime_ratio),
        fmt_f64(c.iteration_ratio),
        c.pcg.report.inner_iterations,
        c.mcg.report.inner_iterations,
        fmt_f64(c.max_cost_divergence),
        fmt_f64(c.mcg.report.density)
    )
}

pub fn comparison_csv(c: &Comparison) -> String {
    format!("{COMPARISON_HEADER}\n{}\n", comparison_fields(c))
}

pub const SWEEP_HEADER: &str = "value,seed,runtime_ratio,iteration_ratio,global_runtime_ratio,pcg_inner_iterations,mcg_inner_iterations,max_cost_divergence,density";

pub fn sweep_csv(rows: &[SweepRow]) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "{SWEEP_HEADER}");
    for row in rows {
        let c = &row.comparison;
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{},{}",
            fmt_f64(row.value),
            row.seed.map(|s| s.to_string()).unwrap_or_default(),
            fmt_f64(c.solver_runtime_ratio),
            fmt_f64(c.iteration_ratio),
            fmt_f64(c.global_runtime_ratio),
            c.pcg.report.inner_iterations,
            c.mcg.report.inner_iterations,
            fmt_f64(c.max_cost_divergence),
            fmt_f64(c.mcg.report.density)
        );
    }
    out
}

pub fn write_file(dir: &Path, name: &str, contents: &str) -> Result<PathBuf, std::io::Error> {
    fs::create_dir_all(dir)?;
    let path = dir.join(name);
    fs::write(&path, contents)?;
    Ok(path)
}
