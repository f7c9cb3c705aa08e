//! Command-line harness: run scenarios, check invariants, compare latency
//! models, replay traces, and list the bundled corpus.

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use ezbft::harness::{self, latency, scenario::ScenarioError};
use std::collections::BTreeMap;
use std::path::PathBuf;
use std::process::ExitCode;

const EXIT_PARSE: u8 = 2;
const EXIT_INVALID: u8 = 3;
const EXIT_VIOLATION: u8 = 4;

#[derive(Parser)]
#[command(name = "ezbft", about = "Leaderless BFT replication simulator", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a scenario, write its trace and metrics, and check invariants.
    Run {
        /// Bundled scenario name or path to a scenario file.
        #[arg(long)]
        scenario: String,
        /// Override the scenario's seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Directory for trace.log, metrics.txt, and metrics.json.
        #[arg(long, default_value = "ezbft-out")]
        out_dir: PathBuf,
        /// Override the scenario's time limit, in milliseconds.
        #[arg(long)]
        time_limit: Option<u64>,
        /// Treat every invariant as fatal, even ones the scenario is
        /// outside the model for.
        #[arg(long)]
        strict: bool,
    },
    /// Run a scenario and print the invariant report only.
    Check {
        #[arg(long)]
        scenario: String,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        strict: bool,
    },
    /// Compare simulated latency against a primary-based three-step model.
    Compare {
        #[arg(long)]
        scenario: String,
        /// Replica index the modeled primary lives at.
        #[arg(long, default_value_t = 0)]
        primary: u32,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Re-run the scenario recorded in a trace and verify the digest.
    Replay {
        /// Path to a trace.log produced by `run`.
        #[arg(long)]
        trace: PathBuf,
    },
    /// List the bundled scenario corpus.
    ListScenarios,
}

fn exit_for(err: &ScenarioError) -> u8 {
    match err {
        ScenarioError::Parse { .. } => EXIT_PARSE,
        ScenarioError::Invalid(_) => EXIT_INVALID,
    }
}

fn load_with_overrides(
    scenario: &str,
    seed: Option<u64>,
    time_limit: Option<u64>,
) -> Result<harness::scenario::ScenarioConfig, ScenarioError> {
    let mut sc = harness::load_config(scenario)?;
    if let Some(seed) = seed {
        sc.seed = seed;
    }
    if let Some(limit) = time_limit {
        sc.time_limit_ms = limit;
    }
    Ok(sc)
}

fn run_cmd(
    scenario: &str,
    seed: Option<u64>,
    out_dir: &PathBuf,
    time_limit: Option<u64>,
    strict: bool,
) -> Result<u8> {
    let sc = match load_with_overrides(scenario, seed, time_limit) {
        Ok(sc) => sc,
        Err(e) => {
            eprintln!("{e}");
            return Ok(exit_for(&e));
        }
    };
    let result = match harness::run_config(&sc) {
        Ok(r) => r,
        Err(e) => {
            eprintln!("{e}");
            return Ok(exit_for(&e));
        }
    };

    std::fs::create_dir_all(out_dir).context("create out dir")?;
    std::fs::write(out_dir.join("trace.log"), &result.outcome.trace).context("write trace")?;
    std::fs::write(out_dir.join("metrics.txt"), result.metrics.to_text())
        .context("write metrics")?;
    std::fs::write(out_dir.join("metrics.json"), result.metrics.to_json())
        .context("write metrics json")?;

    println!("{}", result.metrics.to_text());
    println!("{}", result.invariants.to_text());
    println!("trace digest: {}", result.outcome.trace_digest.hex());
    println!("wrote {}", out_dir.display());

    let failed_applicable = !result.invariants.all_passed();
    let failed_strict = strict && result.invariants.properties.iter().any(|p| !p.passed);
    if failed_applicable || failed_strict {
        return Ok(EXIT_VIOLATION);
    }
    Ok(0)
}

fn check_cmd(scenario: &str, seed: Option<u64>, strict: bool) -> Result<u8> {
    let sc = match load_with_overrides(scenario, seed, None) {
        Ok(sc) => sc,
        Err(e) => {
            eprintln!("{e}");
            return Ok(exit_for(&e));
        }
    };
    let result = match harness::run_config(&sc) {
        Ok(r) => r,
        Err(e) => {
            eprintln!("{e}");
            return Ok(exit_for(&e));
        }
    };
    print!("{}", result.invariants.to_text());
    println!(
        "delivered {}/{}, fast ratio {:.3}, trace digest {}",
        result.metrics.delivered,
        result.metrics.submitted,
        result.metrics.fast_ratio,
        result.outcome.trace_digest.hex()
    );
    let failed = !result.invariants.all_passed()
        || (strict && result.invariants.properties.iter().any(|p| !p.passed));
    Ok(if failed { EXIT_VIOLATION } else { 0 })
}

fn compare_cmd(scenario: &str, primary: u32, seed: Option<u64>) -> Result<u8> {
    let sc = match load_with_overrides(scenario, seed, None) {
        Ok(sc) => sc,
        Err(e) => {
            eprintln!("{e}");
            return Ok(exit_for(&e));
        }
    };
    if !sc.faults.is_empty() || !sc.partitions.is_empty() {
        eprintln!("compare expects a fault-free scenario");
        return Ok(EXIT_INVALID);
    }
    let result = match harness::run_config(&sc) {
        Ok(r) => r,
        Err(e) => {
            eprintln!("{e}");
            return Ok(exit_for(&e));
        }
    };
    let sim_means: BTreeMap<u32, f64> =
        result.metrics.per_region.iter().map(|(k, v)| (*k, v.mean_ms)).collect();
    let table = latency::compare(&result.config, primary, &sim_means);
    print!("{}", table.to_text());
    Ok(0)
}

fn replay_cmd(trace_path: &PathBuf) -> Result<u8> {
    let text = std::fs::read_to_string(trace_path).context("read trace")?;
    let header = text.lines().next().unwrap_or("");
    let mut scenario = None;
    let mut seed = None;
    for tok in header.split_whitespace() {
        if let Some(v) = tok.strip_prefix("scenario=") {
            scenario = Some(v.to_string());
        }
        if let Some(v) = tok.strip_prefix("seed=") {
            seed = v.parse::<u64>().ok();
        }
    }
    let (Some(scenario), Some(seed)) = (scenario, seed) else {
        bail!("trace has no recognizable header line");
    };
    let sc = match load_with_overrides(&scenario, Some(seed), None) {
        Ok(sc) => sc,
        Err(e) => {
            eprintln!("{e}");
            return Ok(exit_for(&e));
        }
    };
    let result = match harness::run_config(&sc) {
        Ok(r) => r,
        Err(e) => {
            eprintln!("{e}");
            return Ok(exit_for(&e));
        }
    };
    let recorded = ezbft::crypto::digest(text.as_bytes());
    if result.outcome.trace_digest == recorded {
        println!("replay of '{}' (seed {}) is byte-identical: {}", scenario, seed, recorded.hex());
        Ok(0)
    } else {
        println!(
            "replay DIVERGED: recorded {}, replayed {}",
            recorded.hex(),
            result.outcome.trace_digest.hex()
        );
        Ok(EXIT_VIOLATION)
    }
}

fn list_cmd() -> Result<u8> {
    for (name, text) in harness::bundled() {
        let desc = text
            .lines()
            .find(|l| l.trim_start().starts_with('#'))
            .map(|l| l.trim_start_matches(['#', ' ']).to_string())
            .unwrap_or_default();
        println!("{:16} {}", name, desc);
    }
    Ok(0)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let code = match cli.command {
        Command::Run { scenario, seed, out_dir, time_limit, strict } => {
            run_cmd(&scenario, seed, &out_dir, time_limit, strict)
        }
        Command::Check { scenario, seed, strict } => check_cmd(&scenario, seed, strict),
        Command::Compare { scenario, primary, seed } => compare_cmd(&scenario, primary, seed),
        Command::Replay { trace } => replay_cmd(&trace),
        Command::ListScenarios => list_cmd(),
    };
    match code {
        Ok(c) => ExitCode::from(c),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
