//! Closed-form latency comparison between the leaderless fast path and a
//! primary-based three-step protocol over the same delay matrix.
//!
//! Both models count one-way legs: the leaderless client talks to its local
//! replica, which relays to everyone, and the slowest relay-plus-reply leg
//! closes the quorum. The primary model prepends the client-to-primary leg
//! and fans out from the primary instead.

use crate::harness::scenario::ScenarioConfig;
use std::fmt::Write as _;

#[derive(Debug, Clone, serde::Serialize)]
pub struct RegionComparison {
    pub region: u32,
    pub sim_mean_ms: f64,
    pub analytic_leaderless_ms: f64,
    pub primary_model_ms: f64,
    /// primary / leaderless-simulated; above 1 means the leaderless run won.
    pub advantage: f64,
}

#[derive(Debug, Clone, serde::Serialize)]
pub struct CompareTable {
    pub primary: u32,
    pub rows: Vec<RegionComparison>,
}

/// Expected fast-path latency for a client in `region` with a co-located
/// home replica: the slowest relay leg closes the 3f+1 quorum.
pub fn analytic_leaderless_ms(sc: &ScenarioConfig, region: u32) -> f64 {
    let d = &sc.latency_ms;
    let home = region as usize;
    let relay = (0..sc.n).map(|i| d[home][i] + d[i][home]).max().unwrap_or(0);
    relay as f64
}

/// Expected latency of a three-step primary-based protocol for a client in
/// `region`: client to primary, then the slowest primary-to-replica-to-client
/// leg over the full quorum.
pub fn primary_model_ms(sc: &ScenarioConfig, primary: u32, region: u32) -> f64 {
    let d = &sc.latency_ms;
    let p = primary as usize;
    let r = region as usize;
    let first = d[r][p];
    let rest = (0..sc.n).map(|i| d[p][i] + d[i][r]).max().unwrap_or(0);
    (first + rest) as f64
}

pub fn compare(
    sc: &ScenarioConfig,
    primary: u32,
    sim_mean_ms_per_region: &std::collections::BTreeMap<u32, f64>,
) -> CompareTable {
    let mut rows = Vec::new();
    for region in 0..sc.n as u32 {
        let sim = sim_mean_ms_per_region.get(&region).copied().unwrap_or(f64::NAN);
        let primary_ms = primary_model_ms(sc, primary, region);
        rows.push(RegionComparison {
            region,
            sim_mean_ms: sim,
            analytic_leaderless_ms: analytic_leaderless_ms(sc, region),
            primary_model_ms: primary_ms,
            advantage: if sim > 0.0 { primary_ms / sim } else { f64::NAN },
        });
    }
    CompareTable { primary, rows }
}

impl CompareTable {
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(
            s,
            "{:>6}  {:>12}  {:>12}  {:>14}  {:>9}",
            "region",
            "sim_mean_ms",
            "analytic_ms",
            format!("primary_ms(R{})", self.primary),
            "advantage"
        );
        for row in &self.rows {
            let _ = writeln!(
                s,
                "{:>6}  {:>12.3}  {:>12.3}  {:>14.3}  {:>8.2}x",
                format!("R{}", row.region),
                row.sim_mean_ms,
                row.analytic_leaderless_ms,
                row.primary_model_ms,
                row.advantage
            );
        }
        let _ = writeln!(s, "primary modeled at R{}", self.primary);
        s
    }
}
