//! `hydra`: run, validate and report on simulation scenarios.

use anyhow::{bail, Context, Result};
use clap::{ArgAction, Parser, Subcommand};
use hydra_core::harness::{run_scenario, RunOutput, Scenario, Summary};
use hydra_core::sim::MetricsSink;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

#[derive(Parser)]
#[command(name = "hydra", version, about = "Deterministic peer-to-peer training network simulator")]
struct Cli {
    /// Print more detail; repeat for the full report.
    #[arg(short, long, action = ArgAction::Count, global = true)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a scenario and check its assertions.
    Run {
        scenario: PathBuf,
        /// Override the scenario's seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Directory for metrics, ledger and report tables.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Run this many consecutive seeds in parallel.
        #[arg(long, default_value_t = 1)]
        sweep: u64,
    },
    /// Check a scenario file without running it.
    Validate { scenario: PathBuf },
    /// Summarize a metrics directory written by `run --out`.
    Report { dir: PathBuf },
}

fn load(path: &Path) -> Result<Scenario> {
    Scenario::load(path).with_context(|| format!("loading {}", path.display()))
}

fn print_run(out: &RunOutput, verbose: u8) {
    let verdict = if out.passed() { "PASS" } else { "FAIL" };
    println!("{} seed {}: {verdict} ({} ms simulated)", out.name, out.seed, out.end_ms);
    for a in &out.assertions {
        if !a.passed || verbose > 0 {
            let mark = if a.passed { "pass" } else { "FAIL" };
            let detail = if a.detail.is_empty() { String::new() } else { format!(": {}", a.detail) };
            println!("  {mark} {}{detail}", a.check);
        }
    }
    if verbose > 1 {
        print!("{}", Summary::from_records(&out.metrics).to_text());
    }
}

fn run(path: &Path, seed: Option<u64>, out_dir: Option<&Path>, sweep: u64, verbose: u8) -> Result<bool> {
    let base = load(path)?;
    if let Err(errors) = base.validate() {
        for e in &errors {
            eprintln!("error: {e}");
        }
        bail!("{} has {} validation errors", path.display(), errors.len());
    }
    let first = seed.unwrap_or(base.seed);
    let seeds: Vec<u64> = (0..sweep.max(1)).map(|i| first.wrapping_add(i)).collect();
    // One thread per seed; each run is single-threaded and independent.
    let results: Vec<Result<RunOutput>> = std::thread::scope(|scope| {
        let handles: Vec<_> = seeds
            .iter()
            .map(|s| {
                let mut scenario = base.clone();
                scenario.seed = *s;
                scope.spawn(move || run_scenario(&scenario).map_err(anyhow::Error::from))
            })
            .collect();
        handles.into_iter().map(|h| h.join().expect("scenario thread panicked")).collect()
    });
    let mut passed = 0;
    for (seed, result) in seeds.iter().zip(results) {
        let out = result.with_context(|| format!("seed {seed}"))?;
        print_run(&out, verbose);
        passed += usize::from(out.passed());
        if let Some(dir) = out_dir {
            let dir = if seeds.len() > 1 { dir.join(format!("seed-{seed}")) } else { dir.to_path_buf() };
            out.write_dir(&dir).with_context(|| format!("writing {}", dir.display()))?;
        }
    }
    if seeds.len() > 1 {
        println!("{passed} of {} seeds passed", seeds.len());
    }
    Ok(passed == seeds.len())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Run { scenario, seed, out, sweep } => run(scenario, *seed, out.as_deref(), *sweep, cli.verbose),
        Command::Validate { scenario } => load(scenario).map(|s| match s.validate() {
            Ok(()) => {
                println!("{}: ok", scenario.display());
                true
            }
            Err(errors) => {
                for e in &errors {
                    eprintln!("error: {e}");
                }
                false
            }
        }),
        Command::Report { dir } => std::fs::read_to_string(dir.join("metrics.jsonl"))
            .with_context(|| format!("reading {}", dir.join("metrics.jsonl").display()))
            .and_then(|text| Ok(MetricsSink::parse_jsonl(&text)?))
            .map(|records| {
                print!("{}", Summary::from_records(&records).to_text());
                true
            }),
    };
    match result {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
