//! Scenario loading, execution, metrics, and invariant checking: the
//! programmatic face of the command-line harness.

pub mod invariants;
pub mod latency;
pub mod metrics;
pub mod scenario;

use crate::sim::{RunOutcome, Simulation};
use invariants::{CheckContext, InvariantReport};
use metrics::MetricsReport;
use scenario::{ScenarioConfig, ScenarioError};
use std::collections::BTreeMap;

/// Bundled scenario corpus, embedded in the library.
pub fn bundled() -> BTreeMap<&'static str, &'static str> {
    BTreeMap::from([
        ("fig1_fastpath", include_str!("../../scenarios/fig1_fastpath.ez")),
        ("fig2_conflict", include_str!("../../scenarios/fig2_conflict.ez")),
        ("fig3_lying_r2", include_str!("../../scenarios/fig3_lying_r2.ez")),
        ("four_region", include_str!("../../scenarios/four_region.ez")),
        ("equivocate", include_str!("../../scenarios/equivocate.ez")),
        ("mute_replica", include_str!("../../scenarios/mute_replica.ez")),
        ("crash_home", include_str!("../../scenarios/crash_home.ez")),
        ("partition_heal", include_str!("../../scenarios/partition_heal.ez")),
    ])
}

/// Resolve a scenario by bundled name or filesystem path.
pub fn load(name_or_path: &str) -> Result<(String, String), ScenarioError> {
    if let Some(text) = bundled().get(name_or_path) {
        return Ok((name_or_path.to_string(), text.to_string()));
    }
    let path = std::path::Path::new(name_or_path);
    let text = std::fs::read_to_string(path)
        .map_err(|e| ScenarioError::Invalid(format!("cannot read '{name_or_path}': {e}")))?;
    let name = path.file_stem().and_then(|s| s.to_str()).unwrap_or(name_or_path).to_string();
    Ok((name, text))
}

/// A completed run with everything the CLI and tests need.
pub struct RunResult {
    pub config: ScenarioConfig,
    pub outcome: RunOutcome,
    pub metrics: MetricsReport,
    pub invariants: InvariantReport,
}

pub fn context_for(sc: &ScenarioConfig) -> CheckContext {
    let severe = sc.faults.iter().filter(|f| f.behavior.is_byzantine_or_crash()).count();
    CheckContext {
        in_model: severe <= sc.f && sc.partitions.is_empty(),
        fault_free: sc.faults.is_empty() && sc.partitions.is_empty(),
        contention_free: sc.conflict == 0.0 && sc.clients.iter().all(|c| c.conflict == 0.0),
    }
}

/// Validate and run one scenario configuration end to end.
pub fn run_config(sc: &ScenarioConfig) -> Result<RunResult, ScenarioError> {
    scenario::validate(sc)?;
    let setup = scenario::build_setup(sc);
    let outcome = Simulation::new(setup).run();
    let regions: BTreeMap<u32, u32> =
        sc.clients.iter().enumerate().map(|(i, c)| (i as u32, c.region)).collect();
    let metrics = metrics::build(&sc.name, sc.seed, &regions, &outcome);
    let ctx = context_for(sc);
    let invariants = invariants::check(&outcome, &ctx);
    Ok(RunResult { config: sc.clone(), outcome, metrics, invariants })
}

/// Parse, validate, and run a scenario given as text.
pub fn run_text(name: &str, text: &str) -> Result<RunResult, ScenarioError> {
    let sc = scenario::parse(name, text)?;
    run_config(&sc)
}

/// Resolve by name or path, then run.
pub fn run_file(name_or_path: &str) -> Result<RunResult, ScenarioError> {
    let (name, text) = load(name_or_path)?;
    run_text(&name, &text)
}

/// Parse a bundled or on-disk scenario without running it.
pub fn load_config(name_or_path: &str) -> Result<ScenarioConfig, ScenarioError> {
    let (name, text) = load(name_or_path)?;
    scenario::parse(&name, &text)
}
