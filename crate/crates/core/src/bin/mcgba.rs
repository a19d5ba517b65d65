use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use mcg_ba::bench::{
    self, comparison_csv, report_csv, resolve_subsets, sweep_csv, trace_csv, write_file,
    BenchError, InputSpec, SweepKind,
};
use mcg_ba::{CgConfig, LmConfig, LmError, SolverKind};

const EXIT_INPUT: u8 = 2;
const EXIT_SOLVER: u8 = 3;

#[derive(Parser)]
#[command(name = "mcgba", version, about = "Bundle adjustment with PCG and MCG inner solvers")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Optimise one problem and write trace.csv and report.csv.
    Run {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_parser = ["pcg", "mcg"], default_value = "pcg")]
        solver: String,
    },
    /// Run PCG and MCG on the same problem and report their ratios.
    Compare {
        #[command(flatten)]
        common: Common,
    },
    /// Compare PCG and MCG over a grid of tau, subset counts or densities.
    Sweep {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_parser = clap::value_parser!(SweepKind))]
        sweep: SweepKind,
        /// Comma-separated grid values.
        #[arg(long, value_delimiter = ',', required = true)]
        grid: Vec<f64>,
        /// Seeds per grid point for density sweeps (seed, seed+1, ...).
        #[arg(long, default_value_t = 1)]
        seeds: u64,
    },
}

#[derive(Args)]
struct Common {
    /// BAL file or `synth:seed=..,np=..,nl=..,density=..`.
    #[arg(long)]
    input: String,
    #[arg(long, default_value_t = 2.0)]
    tau: f64,
    /// Number of pose subsets; defaults to max(1, n_p / 10).
    #[arg(long)]
    num_subsets: Option<usize>,
    #[arg(long, default_value_t = 1e-6)]
    cg_tol: f64,
    #[arg(long, default_value_t = 1000)]
    cg_max_iters: usize,
    #[arg(long, default_value_t = 25)]
    lm_max_iters: usize,
    #[arg(long, default_value_t = 1e-6)]
    lm_tol: f64,
    #[arg(long, default_value_t = 1e-4)]
    lambda0: f64,
    #[arg(long, default_value_t = 4)]
    threads: usize,
    #[arg(long, default_value = ".")]
    out_dir: PathBuf,
}

impl Common {
    fn lm_config(&self) -> LmConfig {
        LmConfig {
            lambda0: self.lambda0,
            max_iterations: self.lm_max_iters,
            function_tolerance: self.lm_tol,
            inner: CgConfig {
                epsilon: self.cg_tol,
                imax: self.cg_max_iters,
            },
            ..LmConfig::default()
        }
    }
}

fn exit_code(err: &BenchError) -> u8 {
    match err {
        BenchError::Input(_) | BenchError::InvalidArgument(_) => EXIT_INPUT,
        BenchError::Solver(LmError::InvalidConfig(_) | LmError::Partition(_)) => EXIT_INPUT,
        BenchError::Solver(_) => EXIT_SOLVER,
        BenchError::Output(_) => 1,
    }
}

fn run(cli: Cli) -> Result<(), BenchError> {
    match cli.command {
        Command::Run { common, solver } => {
            let spec: InputSpec = common.input.parse().map_err(BenchError::Input)?;
            let problem = spec.load()?;
            let mut cfg = common.lm_config();
            if solver == "mcg" {
                cfg.solver = SolverKind::Mcg {
                    tau: common.tau,
                    num_subsets: resolve_subsets(common.num_subsets, problem.num_cameras()),
                };
            }
            let outcome = bench::run_problem(&spec.name(), &problem, &cfg, common.threads)?;
            write_file(&common.out_dir, "trace.csv", &trace_csv(&outcome.trace))?;
            let report = report_csv(&[&outcome.report]);
            write_file(&common.out_dir, "report.csv", &report)?;
            print!("{report}");
        }
        Command::Compare { common } => {
            let spec: InputSpec = common.input.parse().map_err(BenchError::Input)?;
            let problem = spec.load()?;
            let n = resolve_subsets(common.num_subsets, problem.num_cameras());
            let c = bench::compare(
                &spec.name(),
                &problem,
                &common.lm_config(),
                common.tau,
                n,
                common.threads,
            )?;
            write_file(&common.out_dir, "trace_pcg.csv", &trace_csv(&c.pcg.trace))?;
            write_file(&common.out_dir, "trace_mcg.csv", &trace_csv(&c.mcg.trace))?;
            write_file(
                &common.out_dir,
                "report.csv",
                &report_csv(&[&c.pcg.report, &c.mcg.report]),
            )?;
            let summary = comparison_csv(&c);
            write_file(&common.out_dir, "compare.csv", &summary)?;
            print!("{summary}");
        }
        Command::Sweep {
            common,
            sweep,
            grid,
            seeds,
        } => {
            let spec: InputSpec = common.input.parse().map_err(BenchError::Input)?;
            let cfg = common.lm_config();
            let rows = match sweep {
                SweepKind::Tau => {
                    let problem = spec.load()?;
                    let n = resolve_subsets(common.num_subsets, problem.num_cameras());
                    bench::sweep_tau(&spec.name(), &problem, &cfg, n, &grid, common.threads)?
                }
                SweepKind::Subsets => {
                    let problem = spec.load()?;
                    let counts = grid
                        .iter()
                        .map(|&g| {
                            if g >= 1.0 && g.fract() == 0.0 {
                                Ok(g as usize)
                            } else {
                                Err(BenchError::InvalidArgument(format!(
                                    "subset count {g} is not a positive integer"
                                )))
                            }
                        })
                        .collect::<Result<Vec<_>, _>>()?;
                    bench::sweep_subsets(&spec.name(), &problem, &cfg, common.tau, &counts, common.threads)?
                }
                SweepKind::Density => {
                    let InputSpec::Synthetic(template) = &spec else {
                        return Err(BenchError::InvalidArgument(
                            "density sweeps need a synth: input".to_owned(),
                        ));
                    };
                    let seed_list: Vec<u64> =
                        (0..seeds.max(1)).map(|k| template.rng_seed + k).collect();
                    bench::sweep_density(
                        template,
                        &cfg,
                        common.tau,
                        common.num_subsets,
                        &grid,
                        &seed_list,
                        common.threads,
                    )?
                }
            };
            let csv = sweep_csv(&rows);
            write_file(&common.out_dir, "sweep.csv", &csv)?;
            print!("{csv}");
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let threads = match &cli.command {
        Command::Run { common, .. } | Command::Compare { common } | Command::Sweep { common, .. } => {
            common.threads
        }
    };
    let pool = match rayon::ThreadPoolBuilder::new().num_threads(threads).build() {
        Ok(pool) => pool,
        Err(e) => {
            eprintln!("error: cannot start {threads} threads: {e}");
            return ExitCode::from(1);
        }
    };
    match pool.install(|| run(cli)) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
