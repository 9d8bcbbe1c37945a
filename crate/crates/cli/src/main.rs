use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Duration;

use clap::{Parser, Subcommand, ValueEnum};
use intervalog::lang::parse_query;
use intervalog::scenario::{
    answer_query, compare_trace, scenario_cardgame, scenario_welding, Draws, GoldenTrace, RunReport, Scenario,
    ScenarioError, ScenarioSpec, StopReason, GOLDEN_DRAWS,
};

#[derive(Parser)]
#[command(
    name = "intervalog",
    version,
    about = "Interval-annotated temporal reasoning over knowledge graphs"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a scenario and print a summary.
    Run {
        scenario: PathBuf,
        /// Single-threaded scheduler with a fixed interleaving.
        #[arg(long)]
        deterministic: bool,
        #[arg(long)]
        seed: Option<u64>,
        /// Write the trace as TSV.
        #[arg(long)]
        trace_out: Option<PathBuf>,
        #[arg(long)]
        horizon: Option<u32>,
        /// Wall-clock limit in seconds for a real-time run.
        #[arg(long, default_value_t = 10.0)]
        duration: f64,
    },
    /// Run a scenario deterministically, then answer a query with its explanation.
    Query {
        scenario: PathBuf,
        query: String,
        /// Timestep to ask about; defaults to the final one.
        #[arg(long)]
        at: Option<u32>,
    },
    /// Compare a trace TSV against a golden TSV.
    Compare {
        trace: PathBuf,
        golden: PathBuf,
        #[arg(long, default_value_t = 1e-5)]
        tol: f64,
    },
    /// Check that a scenario and the files it names load.
    Validate { scenario: PathBuf },
    /// Write a built-in scenario and its files into a directory.
    Scenario {
        name: Builtin,
        #[arg(long)]
        out: PathBuf,
        /// Card game only: shuffle the deck with this seed instead of the reference order.
        #[arg(long)]
        seed: Option<u64>,
        /// Card game only: noisy classifier scores.
        #[arg(long)]
        noisy: bool,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Builtin {
    Welding,
    Cardgame,
}

enum Failure {
    /// Reasoning or comparison failed.
    Failed(String),
    Input(String),
}

impl From<ScenarioError> for Failure {
    fn from(e: ScenarioError) -> Self {
        if e.is_input_error() {
            Failure::Input(e.to_string())
        } else {
            Failure::Failed(e.to_string())
        }
    }
}

fn load(path: &Path, seed: Option<u64>, horizon: Option<u32>) -> Result<Scenario, Failure> {
    let (mut spec, base) = ScenarioSpec::load(path)?;
    if let Some(s) = seed {
        spec.seed = s;
    }
    if let Some(h) = horizon {
        spec.engine.horizon = h;
    }
    Ok(Scenario::resolve(&spec, &base)?)
}

fn write(path: &Path, content: &str) -> Result<(), Failure> {
    std::fs::write(path, content).map_err(|e| Failure::Input(format!("cannot write {}: {e}", path.display())))
}

fn run(cli: Cli) -> Result<(), Failure> {
    match cli.command {
        Command::Run {
            scenario,
            deterministic,
            seed,
            trace_out,
            horizon,
            duration,
        } => {
            let sc = load(&scenario, seed, horizon)?;
            let (tsv, halted) = if deterministic {
                let report: RunReport = sc.run_deterministic()?;
                print!("{}", report.summary());
                let halted = match &report.stop {
                    StopReason::Inconsistency(r) => Some(r.to_string()),
                    _ => None,
                };
                (report.tsv(), halted)
            } else {
                if !(duration > 0.0 && duration.is_finite()) {
                    return Err(Failure::Input("--duration must be positive".into()));
                }
                let report = sc.run_realtime(Duration::from_secs_f64(duration))?;
                println!("timestep: {}", report.engine.now());
                println!("fpo: {}", report.engine.fpo_count());
                println!("updates: {}", report.engine.export_trace().len());
                for (i, polls) in report.polls.iter().enumerate() {
                    let fired = polls.iter().filter(|p| p.fired).count();
                    println!("poller {i}: {} wake-ups, {fired} fired", polls.len());
                }
                let halted = report.engine.halted().map(ToString::to_string);
                (intervalog::engine::trace_to_tsv(&report.exported), halted)
            };
            if let Some(p) = trace_out {
                write(&p, &tsv)?;
            }
            match halted {
                Some(r) => Err(Failure::Failed(format!("inconsistency: {r}"))),
                None => Ok(()),
            }
        }
        Command::Query { scenario, query, at } => {
            let q = parse_query(&query).map_err(|e| Failure::Input(format!("query: {e}")))?;
            let report = load(&scenario, None, None)?.run_deterministic()?;
            let at = at.unwrap_or_else(|| report.engine.now());
            print!("{}", answer_query(&report.engine, &q, at));
            match &report.stop {
                StopReason::Inconsistency(r) => Err(Failure::Failed(format!("run halted: {r}"))),
                _ => Ok(()),
            }
        }
        Command::Compare { trace, golden, tol } => {
            let read = |p: &Path| -> Result<GoldenTrace, Failure> {
                let text = std::fs::read_to_string(p)
                    .map_err(|e| Failure::Input(format!("cannot read {}: {e}", p.display())))?;
                GoldenTrace::parse_tsv(&text).map_err(|e| Failure::Input(format!("{}: {e}", p.display())))
            };
            let report = compare_trace(&read(&trace)?, &read(&golden)?, tol);
            print!("{report}");
            if report.passed() {
                Ok(())
            } else {
                Err(Failure::Failed("traces differ".into()))
            }
        }
        Command::Validate { scenario } => {
            let sc = load(&scenario, None, None)?;
            println!("{}: ok", sc.name);
            Ok(())
        }
        Command::Scenario { name, out, seed, noisy } => {
            let builtin = match name {
                Builtin::Welding => scenario_welding(),
                Builtin::Cardgame => scenario_cardgame(match seed {
                    Some(seed) => Draws::Shuffled { seed, noisy },
                    None => Draws::Scripted(GOLDEN_DRAWS.iter().map(|s| s.to_string()).collect()),
                }),
            };
            let path = builtin.write_to(&out)?;
            println!("{}", path.display());
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Failed(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
        Err(Failure::Input(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
    }
}
