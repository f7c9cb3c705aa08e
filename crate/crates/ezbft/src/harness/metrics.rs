//! Per-command records and run summaries, in a line-oriented text form and
//! as JSON.

use crate::actions::Path;
use crate::sim::RunOutcome;
use std::collections::BTreeMap;
use std::fmt::Write as _;

#[derive(Debug, Clone, serde::Serialize)]
pub struct CommandMetric {
    pub client: u32,
    pub t: u64,
    pub region: u32,
    pub submit_us: u64,
    pub deliver_us: Option<u64>,
    pub latency_us: Option<u64>,
    pub path: Option<Path>,
    pub steps: Option<u32>,
}

#[derive(Debug, Clone, serde::Serialize)]
pub struct RegionSummary {
    pub count: u64,
    pub mean_ms: f64,
    pub median_ms: f64,
    pub p99_ms: f64,
}

#[derive(Debug, Clone, serde::Serialize)]
pub struct MetricsReport {
    pub scenario: String,
    pub seed: u64,
    pub digest_scheme: &'static str,
    pub trace_digest: String,
    pub submitted: u64,
    pub delivered: u64,
    pub undelivered: u64,
    pub fast_ratio: f64,
    pub throughput_cps: f64,
    pub owner_changes: u64,
    pub rollbacks: u64,
    pub poms: u64,
    pub per_region: BTreeMap<u32, RegionSummary>,
    pub commands: Vec<CommandMetric>,
}

fn percentile(sorted_us: &[u64], p: f64) -> f64 {
    if sorted_us.is_empty() {
        return 0.0;
    }
    let rank = (p * (sorted_us.len() - 1) as f64).round() as usize;
    sorted_us[rank.min(sorted_us.len() - 1)] as f64 / 1000.0
}

pub fn build(scenario: &str, seed: u64, regions: &BTreeMap<u32, u32>, out: &RunOutcome) -> MetricsReport {
    let mut commands: Vec<CommandMetric> = out
        .commands
        .values()
        .map(|c| CommandMetric {
            client: c.client,
            t: c.t,
            region: regions.get(&c.client).copied().unwrap_or(0),
            submit_us: c.submit_us,
            deliver_us: c.deliver_us,
            latency_us: c.deliver_us.map(|d| d - c.submit_us),
            path: c.path,
            steps: c.path.map(|p| p.steps()),
        })
        .collect();
    commands.sort_by_key(|c| (c.client, c.t));

    let submitted = commands.len() as u64;
    let delivered = commands.iter().filter(|c| c.deliver_us.is_some()).count() as u64;
    let fast = commands.iter().filter(|c| c.path == Some(Path::Fast)).count() as u64;

    let mut per_region = BTreeMap::new();
    let mut by_region: BTreeMap<u32, Vec<u64>> = BTreeMap::new();
    for c in &commands {
        if let Some(l) = c.latency_us {
            by_region.entry(c.region).or_default().push(l);
        }
    }
    for (region, mut lats) in by_region {
        lats.sort_unstable();
        let mean_ms = lats.iter().sum::<u64>() as f64 / lats.len() as f64 / 1000.0;
        per_region.insert(
            region,
            RegionSummary {
                count: lats.len() as u64,
                mean_ms,
                median_ms: percentile(&lats, 0.5),
                p99_ms: percentile(&lats, 0.99),
            },
        );
    }

    let horizon_s = (out.end_time.max(1)) as f64 / 1_000_000.0;
    MetricsReport {
        scenario: scenario.to_string(),
        seed,
        digest_scheme: crate::crypto::DIGEST_SCHEME,
        trace_digest: out.trace_digest.hex(),
        submitted,
        delivered,
        undelivered: submitted - delivered,
        fast_ratio: if delivered == 0 { 0.0 } else { fast as f64 / delivered as f64 },
        throughput_cps: delivered as f64 / horizon_s,
        owner_changes: out.stats.owner_changes,
        rollbacks: out.stats.rollbacks,
        poms: out.stats.poms,
        per_region,
        commands,
    }
}

impl MetricsReport {
    /// Line-delimited records followed by a summary block.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "# ezbft metrics v1");
        let _ = writeln!(
            s,
            "# scenario={} seed={} digest_scheme={} trace_digest={}",
            self.scenario, self.seed, self.digest_scheme, self.trace_digest
        );
        for c in &self.commands {
            let _ = writeln!(
                s,
                "cmd c{} t={} region={} submit_us={} deliver_us={} latency_us={} path={} steps={}",
                c.client,
                c.t,
                c.region,
                c.submit_us,
                c.deliver_us.map(|v| v.to_string()).unwrap_or_else(|| "-".into()),
                c.latency_us.map(|v| v.to_string()).unwrap_or_else(|| "-".into()),
                match c.path {
                    Some(Path::Fast) => "fast",
                    Some(Path::Slow) => "slow",
                    None => "-",
                },
                c.steps.map(|v| v.to_string()).unwrap_or_else(|| "-".into()),
            );
        }
        let _ = writeln!(
            s,
            "summary submitted={} delivered={} undelivered={} fast_ratio={:.4} throughput_cps={:.2}",
            self.submitted, self.delivered, self.undelivered, self.fast_ratio, self.throughput_cps
        );
        for (region, r) in &self.per_region {
            let _ = writeln!(
                s,
                "summary region={} count={} mean_ms={:.3} median_ms={:.3} p99_ms={:.3}",
                region, r.count, r.mean_ms, r.median_ms, r.p99_ms
            );
        }
        let _ = writeln!(
            s,
            "summary owner_changes={} rollbacks={} poms={}",
            self.owner_changes, self.rollbacks, self.poms
        );
        s
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("metrics serialize")
    }
}
