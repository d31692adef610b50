//! `ghmf` — batch front-end for hierarchical max-flow segmentation.
//!
//! Subcommands: `validate` (parse and report a problem file), `solve`
//! (run the solver and write a solution directory), `reduce` (rewrite a
//! flat or ordered model as a problem file), `oracle` (exhaustive discrete
//! minimum for desk-scale instances), `energy` (recompute the energy of
//! stored leaf fields).
//!
//! Exit codes: 0 success, 1 usage or input error, 2 runtime failure,
//! 3 solved-but-not-converged. Progress goes to standard error; the
//! machine-readable summary goes to standard output.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand};

use ghmf::io::{self, IoError};
use ghmf::oracle::{brute_force_min, OracleError, DEFAULT_ENUMERATION_CAP};
use ghmf::problem::primal_energy;
use ghmf::reductions::{from_ishikawa, from_potts};
use ghmf::solver::{solve_observed, SolverError};
use ghmf::{GhmfProblem64, SolverParams64};

#[derive(Parser)]
#[command(
    name = "ghmf",
    version,
    about = "Multi-region image segmentation via hierarchical max-flow"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Parse a problem file and report its structure.
    Validate {
        /// Problem file to check.
        spec: PathBuf,
    },
    /// Solve a problem file and write the solution into a directory.
    Solve(SolveArgs),
    /// Rewrite a flat (--potts) or ordered (--ishikawa) model as a
    /// problem file.
    Reduce {
        /// Treat the input as a flat model (all labels under ROOT, one
        /// shared boundary weight).
        #[arg(long, conflicts_with = "ishikawa")]
        potts: bool,
        /// Treat the input as an ordered model (level lines); also writes
        /// a reconstruction table next to the output.
        #[arg(long)]
        ishikawa: bool,
        /// Model file to convert.
        input: PathBuf,
        /// Problem file to write.
        #[arg(long)]
        out: PathBuf,
    },
    /// Enumerate every discrete labeling and report the minimum energy.
    Oracle {
        /// Problem file to minimize.
        spec: PathBuf,
        /// Refuse instances needing more evaluations than this.
        #[arg(long, default_value_t = DEFAULT_ENUMERATION_CAP)]
        cap: u64,
        /// Directory for the minimizing label map.
        #[arg(long, default_value = ".")]
        out: PathBuf,
    },
    /// Recompute the energy of a stored solution directory.
    Energy {
        /// Problem file the labeling belongs to.
        spec: PathBuf,
        /// Directory holding the per-leaf weight fields.
        labeling_dir: PathBuf,
    },
}

#[derive(Args)]
struct SolveArgs {
    /// Problem file to solve.
    spec: PathBuf,
    /// Augmentation weight of the flow-conservation penalty.
    #[arg(long, default_value_t = 0.25)]
    c: f64,
    /// Step size of the spatial-flow update.
    #[arg(long, default_value_t = 0.1)]
    tau: f64,
    /// Convergence threshold on the mean labeling change.
    #[arg(long, default_value_t = 1e-4)]
    tol: f64,
    /// Iteration budget.
    #[arg(long, default_value_t = 2000)]
    max_iters: usize,
    /// Directory for the solution files.
    #[arg(long, default_value = ".")]
    out: PathBuf,
    /// Check flow-capacity invariants every iteration; any violation
    /// makes the run fail after writing its files.
    #[arg(long)]
    debug_invariants: bool,
    /// Worker threads (0 = one per core).
    #[arg(long, default_value_t = 0)]
    threads: usize,
}

/// A failed command: exit code plus the message for standard error.
struct Failure {
    code: u8,
    message: String,
}

impl Failure {
    fn usage(message: impl Into<String>) -> Self {
        Failure {
            code: 1,
            message: message.into(),
        }
    }

    fn runtime(message: impl Into<String>) -> Self {
        Failure {
            code: 2,
            message: message.into(),
        }
    }
}

/// Classifies an I/O-layer error: filesystem problems are runtime
/// failures, everything else is a defect in the input.
fn input_failure(path: &Path, error: IoError) -> Failure {
    match &error {
        IoError::File { .. } => Failure::runtime(error.to_string()),
        IoError::Parse { .. } => Failure::usage(format!("{}: {error}", path.display())),
        _ => Failure::usage(format!("{}: {error}", path.display())),
    }
}

/// Classifies an I/O-layer error on the output side, where even format
/// errors mean the run could not complete.
fn output_failure(path: &Path, error: IoError) -> Failure {
    match &error {
        IoError::File { .. } => Failure::runtime(error.to_string()),
        _ => Failure::runtime(format!("{}: {error}", path.display())),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(error) => {
            let code = match error.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = error.print();
            return ExitCode::from(code);
        }
    };
    let result = match cli.command {
        Command::Validate { spec } => cmd_validate(&spec),
        Command::Solve(args) => cmd_solve(&args),
        Command::Reduce {
            potts,
            ishikawa,
            input,
            out,
        } => cmd_reduce(potts, ishikawa, &input, &out),
        Command::Oracle { spec, cap, out } => cmd_oracle(&spec, cap, &out),
        Command::Energy { spec, labeling_dir } => cmd_energy(&spec, &labeling_dir),
    };
    match result {
        Ok(code) => ExitCode::from(code),
        Err(failure) => {
            eprintln!("error: {}", failure.message);
            ExitCode::from(failure.code)
        }
    }
}

fn cmd_validate(spec: &Path) -> Result<u8, Failure> {
    let problem = io::parse_problem(spec).map_err(|e| input_failure(spec, e))?;
    let hierarchy = problem.hierarchy();
    println!(
        "{} nodes, {} leaves, depth {}",
        hierarchy.node_count(),
        hierarchy.leaves().len(),
        hierarchy.depth()
    );
    let names: Vec<&str> = hierarchy
        .leaves()
        .iter()
        .map(|&leaf| hierarchy.name(leaf))
        .collect();
    println!("leaves: {}", names.join(" "));
    Ok(0)
}

fn solver_failure(error: SolverError) -> Failure {
    match error {
        SolverError::InvalidParams(_) => Failure::usage(error.to_string()),
        other => Failure::usage(other.to_string()),
    }
}

fn cmd_solve(args: &SolveArgs) -> Result<u8, Failure> {
    let problem = io::parse_problem(&args.spec).map_err(|e| input_failure(&args.spec, e))?;
    let params = SolverParams64 {
        c: args.c,
        tau: args.tau,
        tolerance: args.tol,
        max_iters: args.max_iters,
    };
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(args.threads)
        .build()
        .map_err(|e| Failure::runtime(format!("thread pool: {e}")))?;

    let debug_invariants = args.debug_invariants;
    let mut first_violation: Option<(usize, String)> = None;
    let solution = pool
        .install(|| {
            solve_observed(&problem, &params, |progress| {
                if progress.iteration % 100 == 0 {
                    let energy = progress.state.current_energy() + progress.offset_total;
                    let dual = progress.state.dual_value() + progress.offset_total;
                    eprintln!(
                        "iter={} residual={:.6e} energy={:.6e} gap={:.6e}",
                        progress.iteration,
                        progress.residual,
                        energy,
                        energy - dual
                    );
                }
                if debug_invariants && first_violation.is_none() {
                    if let Some(violation) =
                        progress.state.invariant_violations().into_iter().next()
                    {
                        first_violation = Some((progress.iteration, violation));
                    }
                }
            })
        })
        .map_err(solver_failure)?;

    io::write_solution(&args.out, &solution).map_err(|e| output_failure(&args.out, e))?;
    print!("{}", io::solution_summary(&solution));

    if let Some((iteration, violation)) = first_violation {
        return Err(Failure::runtime(format!(
            "invariant violated at iteration {iteration}: {violation}"
        )));
    }
    Ok(if solution.converged { 0 } else { 3 })
}

fn cmd_reduce(potts: bool, ishikawa: bool, input: &Path, out: &Path) -> Result<u8, Failure> {
    if potts == ishikawa {
        return Err(Failure::usage(
            "exactly one of --potts or --ishikawa is required",
        ));
    }
    if potts {
        let spec = io::parse_potts(input).map_err(|e| input_failure(input, e))?;
        let problem = from_potts(&spec)
            .map_err(|e| Failure::usage(format!("{}: {e}", input.display())))?;
        io::write_problem(out, &problem).map_err(|e| output_failure(out, e))?;
        println!("wrote {}", out.display());
    } else {
        let spec = io::parse_ishikawa(input).map_err(|e| input_failure(input, e))?;
        let (problem, map) = from_ishikawa(&spec)
            .map_err(|e| Failure::usage(format!("{}: {e}", input.display())))?;
        io::write_problem(out, &problem).map_err(|e| output_failure(out, e))?;

        let hierarchy = problem.hierarchy();
        let mut table = String::new();
        writeln!(table, "levels={}", map.level_count())
            .expect("writing to a string cannot fail");
        for i in 1..=map.level_count() {
            writeln!(
                table,
                "level {i} node={} dummy={}",
                hierarchy.name(map.level_labels[i]),
                hierarchy.name(map.dummy_labels[i - 1])
            )
            .expect("writing to a string cannot fail");
        }
        let stem = out
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| "reduced".to_string());
        let table_path = out.with_file_name(format!("{stem}_reconstruction.txt"));
        fs::write(&table_path, table)
            .map_err(|e| Failure::runtime(format!("{}: {e}", table_path.display())))?;
        println!("wrote {} and {}", out.display(), table_path.display());
    }
    Ok(0)
}

fn cmd_oracle(spec: &Path, cap: u64, out: &Path) -> Result<u8, Failure> {
    let problem: GhmfProblem64 =
        io::parse_problem(spec).map_err(|e| input_failure(spec, e))?;
    let (labeling, energy) = brute_force_min(&problem, cap).map_err(|e| match e {
        OracleError::TooLarge { required, cap } => Failure::runtime(format!(
            "exhaustive search needs {required} evaluations, above the cap of {cap}"
        )),
        other => Failure::runtime(other.to_string()),
    })?;
    io::write_label_map(out, &labeling).map_err(|e| output_failure(out, e))?;
    println!("energy={energy:.11e}");
    Ok(0)
}

fn cmd_energy(spec: &Path, labeling_dir: &Path) -> Result<u8, Failure> {
    let problem = io::parse_problem(spec).map_err(|e| input_failure(spec, e))?;
    let labeling =
        io::read_labeling(labeling_dir, &problem).map_err(|e| output_failure(labeling_dir, e))?;
    let energy = primal_energy(&problem, &labeling)
        .map_err(|e| Failure::runtime(e.to_string()))?;
    println!("energy={energy:.11e}");
    Ok(0)
}
