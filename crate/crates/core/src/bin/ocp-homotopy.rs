use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::thread;
use std::time::Instant;

use clap::{Parser, Subcommand};
use log::info;
use nalgebra::DVector;
use serde::Serialize;

use ocp_homotopy::diagnostics::{assumption_report, KktResiduals};
use ocp_homotopy::pathplan::{path_metrics, PathMetrics};
use ocp_homotopy::tracker::write_trace_csv;
use ocp_homotopy::{
    build_problem, find_initial_guess, solve, Error, GuessStrategy, HomotopyParams, NlpView,
    PathPlanConfig, SolveResult, SolveStatus, StackedControl, TrackerConfig,
};

#[derive(Parser)]
#[command(
    name = "ocp-homotopy",
    version,
    about = "Homotopy path planning around circular obstacles"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Track the zero curve from an initial guess to a KKT point.
    Solve(SolveArgs),
    /// Report parameter validity and sampled assumption checks as JSON.
    Check {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, default_value_t = 10_000)]
        samples: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Print the state trajectory for a control sequence as `k,x1,x2`.
    Rollout {
        #[arg(long)]
        config: PathBuf,
        /// CSV with one `u1,u2` row per step.
        #[arg(long)]
        controls: PathBuf,
    },
}

#[derive(clap::Args)]
struct SolveArgs {
    #[arg(long)]
    config: PathBuf,
    /// Predictor step; defaults to the reference value for the guess.
    #[arg(long)]
    h: Option<f64>,
    #[arg(long)]
    b0: Option<f64>,
    #[arg(long)]
    c0: Option<f64>,
    /// straight, two-leg, three-leg or all
    #[arg(long, default_value = "straight")]
    guess: String,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    trace: Option<PathBuf>,
    /// Include u and mu columns in the trace.
    #[arg(long)]
    full_trace: bool,
    #[arg(long)]
    result: Option<PathBuf>,
}

#[derive(Serialize)]
struct ResultJson {
    guess: String,
    h: f64,
    b0: f64,
    c0: f64,
    status: SolveStatus,
    lambda_final: f64,
    cost: f64,
    kkt: KktResiduals,
    steps: usize,
    min_obstacle_margin: f64,
    terminal_error: f64,
    max_control: f64,
    tangent_warnings: usize,
    seconds: f64,
    u: Vec<f64>,
    mu: Vec<f64>,
}

enum Failure {
    Config(String),
    Solver(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::Config(_)
            | Error::InvalidProblem(_)
            | Error::InvalidParams(_)
            | Error::InfeasibleGuess(_)
            | Error::Dimension { .. } => Failure::Config(e.to_string()),
            other => Failure::Solver(other.to_string()),
        }
    }
}

fn io_failure(path: &Path, e: impl std::fmt::Display) -> Failure {
    Failure::Config(format!("{}: {e}", path.display()))
}

fn load_config(path: &Path) -> Result<PathPlanConfig, Failure> {
    let text = std::fs::read_to_string(path).map_err(|e| io_failure(path, e))?;
    let config = PathPlanConfig::from_json(&text)?;
    config.validate()?;
    Ok(config)
}

struct Run {
    guess: GuessStrategy,
    h: f64,
    b0: f64,
    c0: f64,
    result: SolveResult,
    metrics: PathMetrics,
    seconds: f64,
}

fn run_one(
    config: &PathPlanConfig,
    args: &SolveArgs,
    guess: GuessStrategy,
) -> Result<Run, Failure> {
    let (h_ref, bc_ref) = guess.reference_settings();
    let h = args.h.unwrap_or(h_ref);
    let b0 = args.b0.unwrap_or(bc_ref);
    let c0 = args.c0.unwrap_or(bc_ref);
    let view = NlpView::new(build_problem(config)?);
    let u0 = find_initial_guess(config, guess, args.seed)?;
    let params = HomotopyParams::uniform(u0, view.s(), b0, c0)?;
    let tracker = TrackerConfig::with_step(h);
    tracker.validate()?;
    let started = Instant::now();
    let result = solve(view, params, &tracker)?;
    let seconds = started.elapsed().as_secs_f64();
    let metrics = path_metrics(config, &result.u)?;
    info!(
        "{guess}: {:?} after {} steps in {seconds:.2}s",
        result.status, result.steps
    );
    Ok(Run {
        guess,
        h,
        b0,
        c0,
        result,
        metrics,
        seconds,
    })
}

fn suffixed(path: &Path, guess: GuessStrategy, many: bool) -> PathBuf {
    if !many {
        return path.to_path_buf();
    }
    let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or("out");
    let name = match path.extension().and_then(|e| e.to_str()) {
        Some(ext) => format!("{stem}-{guess}.{ext}"),
        None => format!("{stem}-{guess}"),
    };
    path.with_file_name(name)
}

fn to_json(run: &Run) -> ResultJson {
    let r = &run.result;
    ResultJson {
        guess: run.guess.to_string(),
        h: run.h,
        b0: run.b0,
        c0: run.c0,
        status: r.status,
        lambda_final: r.lambda_final,
        cost: r.cost,
        kkt: r.kkt,
        steps: r.steps,
        min_obstacle_margin: run.metrics.min_obstacle_margin,
        terminal_error: run.metrics.terminal_error,
        max_control: run.metrics.max_control,
        tangent_warnings: r.tangent_warnings,
        seconds: run.seconds,
        u: r.u.0.iter().copied().collect(),
        mu: r.mu.iter().copied().collect(),
    }
}

fn cmd_solve(args: &SolveArgs) -> Result<bool, Failure> {
    let config = load_config(&args.config)?;
    let guesses: Vec<GuessStrategy> = if args.guess == "all" {
        GuessStrategy::ALL.to_vec()
    } else {
        vec![args.guess.parse()?]
    };
    let many = guesses.len() > 1;
    let runs: Vec<Result<Run, Failure>> = thread::scope(|scope| {
        let handles: Vec<_> = guesses
            .iter()
            .map(|&g| {
                let config = &config;
                scope.spawn(move || run_one(config, args, g))
            })
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("solver thread panicked"))
            .collect()
    });

    let mut all_converged = true;
    let mut json = Vec::new();
    for run in runs {
        let run = run?;
        let r = &run.result;
        println!(
            "{}: status={:?} lambda={} cost={:.10} kkt={:.3e} steps={} margin={:.3e} terminal_error={:.3e} time={:.2}s",
            run.guess,
            r.status,
            r.lambda_final,
            r.cost,
            r.kkt.max(),
            r.steps,
            run.metrics.min_obstacle_margin,
            run.metrics.terminal_error,
            run.seconds
        );
        all_converged &= r.status == SolveStatus::Converged;
        if let Some(path) = &args.trace {
            let path = suffixed(path, run.guess, many);
            let file = File::create(&path).map_err(|e| io_failure(&path, e))?;
            let mut out = BufWriter::new(file);
            write_trace_csv(&mut out, &r.trace, r.u.len(), args.full_trace)
                .and_then(|_| out.flush())
                .map_err(|e| io_failure(&path, e))?;
        }
        json.push(to_json(&run));
    }
    if let Some(path) = &args.result {
        let text = if many {
            serde_json::to_string_pretty(&json)
        } else {
            serde_json::to_string_pretty(&json[0])
        }
        .expect("result serializes");
        std::fs::write(path, text).map_err(|e| io_failure(path, e))?;
    }
    Ok(all_converged)
}

fn cmd_check(config: &Path, samples: usize, seed: u64) -> Result<bool, Failure> {
    let config = load_config(config)?;
    let view = NlpView::new(build_problem(&config)?);
    let u0 = find_initial_guess(&config, GuessStrategy::Straight, seed)?;
    let params = HomotopyParams::uniform(u0, view.s(), 1.0, 1.0)?;
    let report = assumption_report(&view, &params, samples, seed, config.u_max)?;
    println!("{}", report.to_json());
    Ok(!report.has_failures())
}

fn read_controls(path: &Path, horizon: usize) -> Result<StackedControl, Failure> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .trim(csv::Trim::All)
        .comment(Some(b'#'))
        .from_path(path)
        .map_err(|e| io_failure(path, e))?;
    let mut values = Vec::new();
    for (line, record) in reader.records().enumerate() {
        let record = record.map_err(|e| io_failure(path, e))?;
        let parsed: Result<Vec<f64>, _> = record.iter().map(str::parse::<f64>).collect();
        match parsed {
            Ok(row) if row.len() == 2 => values.extend(row),
            // tolerate a header line
            Err(_) if line == 0 => continue,
            _ => {
                return Err(io_failure(
                    path,
                    format!("row {}: expected two numbers", line + 1),
                ))
            }
        }
    }
    if values.len() != 2 * horizon {
        return Err(io_failure(
            path,
            format!(
                "expected {horizon} control rows, found {}",
                values.len() / 2
            ),
        ));
    }
    Ok(StackedControl(DVector::from_vec(values)))
}

fn cmd_rollout(config: &Path, controls: &Path) -> Result<bool, Failure> {
    let config = load_config(config)?;
    let problem = build_problem(&config)?;
    let u = read_controls(controls, config.horizon)?;
    let traj = problem.rollout(&u)?;
    let stdout = io::stdout();
    let mut out = stdout.lock();
    let write = |out: &mut io::StdoutLock| -> io::Result<()> {
        writeln!(out, "k,x1,x2")?;
        for (k, x) in traj.states.iter().enumerate() {
            writeln!(out, "{k},{:.17e},{:.17e}", x[0], x[1])?;
        }
        Ok(())
    };
    write(&mut out).map_err(|e| Failure::Config(e.to_string()))?;
    Ok(true)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let outcome = match &cli.command {
        Command::Solve(args) => cmd_solve(args),
        Command::Check {
            config,
            samples,
            seed,
        } => cmd_check(config, *samples, *seed),
        Command::Rollout { config, controls } => cmd_rollout(config, controls),
    };
    match outcome {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(2),
        Err(Failure::Config(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
        Err(Failure::Solver(msg)) => {
            eprintln!("solver error: {msg}");
            ExitCode::from(2)
        }
    }
}
