//! Scenario files: a flat `key = value` format with `[section]` headers.
//!
//! Grammar, exactly as parsed:
//!
//! ```text
//! file        := line*
//! line        := blank | comment | section | entry
//! comment     := '#' .*
//! section     := '[' name ']'
//! entry       := key '=' value        # within the current section
//! ```
//!
//! Values are space-separated tokens; composite entries (clients, faults)
//! use `field:value` tokens. Unknown keys are rejected so typos fail loudly.
//! All times are integer milliseconds.

use crate::actions::{ProtocolConfig, SimTime};
use crate::client::WorkItem;
use crate::kv::{Op, Value};
use crate::sim::faults::{FaultBehavior, Partition};
use crate::sim::{LatencyModel, SimSetup};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::collections::{BTreeMap, BTreeSet};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ScenarioError {
    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("invalid scenario: {0}")]
    Invalid(String),
}

fn perr(line: usize, msg: impl Into<String>) -> ScenarioError {
    ScenarioError::Parse { line, msg: msg.into() }
}

/// Which operation contended commands use. Increments commute, so a hot key
/// driven by increments stays on the fast path.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HotOp {
    Put,
    Inc,
}

#[derive(Debug, Clone)]
pub struct ClientSpec {
    pub home: u32,
    pub region: u32,
    pub requests: u32,
    pub conflict: f64,
    pub start_ms: u64,
}

#[derive(Debug, Clone)]
pub struct FaultSpec {
    pub replica: u32,
    pub behavior: FaultBehavior,
}

/// Parsed scenario. Field defaults are filled during parsing; validation is
/// a separate step so the two error classes stay distinct.
#[derive(Debug, Clone)]
pub struct ScenarioConfig {
    pub name: String,
    pub n: usize,
    pub f: usize,
    pub seed: u64,
    pub time_limit_ms: u64,
    pub checkpoint_interval: u64,
    pub owner_change_quorum: usize,
    pub partial_rollback: bool,
    pub allow_out_of_model: bool,

    pub slow_path_ms: u64,
    pub retransmit_ms: u64,
    pub resend_wait_ms: u64,
    pub rehome_after: u32,
    pub backoff_cap: u32,

    pub latency_ms: Vec<Vec<u64>>,
    pub jitter_ms: u64,

    pub quorums: BTreeMap<u32, BTreeSet<u32>>,

    pub requests_per_client: u32,
    pub keyspace: u32,
    pub conflict: f64,
    pub hot_op: HotOp,

    pub clients: Vec<ClientSpec>,
    pub faults: Vec<FaultSpec>,
    pub partitions: Vec<Partition>,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        ScenarioConfig {
            name: String::new(),
            n: 4,
            f: 1,
            seed: 1,
            time_limit_ms: 60_000,
            checkpoint_interval: 128,
            owner_change_quorum: 3,
            partial_rollback: true,
            allow_out_of_model: false,
            slow_path_ms: 0,
            retransmit_ms: 0,
            resend_wait_ms: 0,
            rehome_after: 2,
            backoff_cap: 4,
            latency_ms: Vec::new(),
            jitter_ms: 0,
            quorums: BTreeMap::new(),
            requests_per_client: 1,
            keyspace: 8,
            conflict: 0.0,
            hot_op: HotOp::Put,
            clients: Vec::new(),
            faults: Vec::new(),
            partitions: Vec::new(),
        }
    }
}

struct RawClient {
    fields: BTreeMap<String, String>,
    line: usize,
}

pub fn parse(name: &str, text: &str) -> Result<ScenarioConfig, ScenarioError> {
    let mut sc = ScenarioConfig { name: name.to_string(), ..ScenarioConfig::default() };
    let mut section = String::new();
    let mut latency_rows: BTreeMap<usize, Vec<u64>> = BTreeMap::new();
    let mut raw_clients: Vec<RawClient> = Vec::new();

    for (idx, raw) in text.lines().enumerate() {
        let lineno = idx + 1;
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        if let Some(rest) = line.strip_prefix('[') {
            let Some(name) = rest.strip_suffix(']') else {
                return Err(perr(lineno, "unterminated section header"));
            };
            section = name.trim().to_string();
            continue;
        }
        let Some((key, value)) = line.split_once('=') else {
            return Err(perr(lineno, "expected key = value"));
        };
        let key = key.trim();
        let value = value.trim();
        match section.as_str() {
            "general" => parse_general(&mut sc, key, value, lineno)?,
            "timers" => parse_timers(&mut sc, key, value, lineno)?,
            "latency_ms" => {
                if key == "jitter_ms" {
                    sc.jitter_ms = num(value, lineno)?;
                } else if let Some(i) = key.strip_prefix("row") {
                    let i: usize = i.parse().map_err(|_| perr(lineno, "bad row index"))?;
                    let row: Result<Vec<u64>, _> =
                        value.split_whitespace().map(|t| num(t, lineno)).collect();
                    latency_rows.insert(i, row?);
                } else {
                    return Err(perr(lineno, format!("unknown latency key '{key}'")));
                }
            }
            "quorums" => {
                let Some(r) = key.strip_prefix('r') else {
                    return Err(perr(lineno, "quorum keys look like r0, r1, ..."));
                };
                let r: u32 = r.parse().map_err(|_| perr(lineno, "bad replica index"))?;
                let members: Result<BTreeSet<u32>, _> = value
                    .split_whitespace()
                    .map(|t| t.parse::<u32>().map_err(|_| perr(lineno, "bad quorum member")))
                    .collect();
                sc.quorums.insert(r, members?);
            }
            "workload" => parse_workload(&mut sc, key, value, lineno)?,
            "clients" => {
                let mut fields = BTreeMap::new();
                for tok in value.split_whitespace() {
                    let Some((fk, fv)) = tok.split_once(':') else {
                        return Err(perr(lineno, format!("client field '{tok}' is not key:value")));
                    };
                    fields.insert(fk.to_string(), fv.to_string());
                }
                raw_clients.push(RawClient { fields, line: lineno });
            }
            "faults" => parse_fault(&mut sc, key, value, lineno)?,
            "" => return Err(perr(lineno, "entry before any [section]")),
            other => return Err(perr(lineno, format!("unknown section '{other}'"))),
        }
    }

    if !latency_rows.is_empty() {
        let rows: Vec<Vec<u64>> = latency_rows.into_values().collect();
        sc.latency_ms = rows;
    }
    for rc in raw_clients {
        sc.clients.push(client_from_fields(&sc, rc)?);
    }
    fill_defaults(&mut sc);
    Ok(sc)
}

fn num<T: std::str::FromStr>(v: &str, line: usize) -> Result<T, ScenarioError> {
    v.parse().map_err(|_| perr(line, format!("bad number '{v}'")))
}

fn parse_general(
    sc: &mut ScenarioConfig,
    key: &str,
    value: &str,
    line: usize,
) -> Result<(), ScenarioError> {
    match key {
        "n" => sc.n = num(value, line)?,
        "f" => sc.f = num(value, line)?,
        "seed" => sc.seed = num(value, line)?,
        "time_limit_ms" => sc.time_limit_ms = num(value, line)?,
        "checkpoint_interval" => sc.checkpoint_interval = num(value, line)?,
        "owner_change_quorum" => sc.owner_change_quorum = num(value, line)?,
        "rollback" => {
            sc.partial_rollback = match value {
                "partial" => true,
                "full" => false,
                _ => return Err(perr(line, "rollback is 'partial' or 'full'")),
            }
        }
        "allow_out_of_model" => sc.allow_out_of_model = value == "true",
        _ => return Err(perr(line, format!("unknown general key '{key}'"))),
    }
    Ok(())
}

fn parse_timers(
    sc: &mut ScenarioConfig,
    key: &str,
    value: &str,
    line: usize,
) -> Result<(), ScenarioError> {
    match key {
        "slow_path_ms" => sc.slow_path_ms = num(value, line)?,
        "retransmit_ms" => sc.retransmit_ms = num(value, line)?,
        "resend_wait_ms" => sc.resend_wait_ms = num(value, line)?,
        "rehome_after" => sc.rehome_after = num(value, line)?,
        "backoff_cap" => sc.backoff_cap = num(value, line)?,
        _ => return Err(perr(line, format!("unknown timer key '{key}'"))),
    }
    Ok(())
}

fn parse_workload(
    sc: &mut ScenarioConfig,
    key: &str,
    value: &str,
    line: usize,
) -> Result<(), ScenarioError> {
    match key {
        "requests_per_client" => sc.requests_per_client = num(value, line)?,
        "keyspace" => sc.keyspace = num(value, line)?,
        "conflict" => sc.conflict = num(value, line)?,
        "hot_op" => {
            sc.hot_op = match value {
                "put" => HotOp::Put,
                "inc" => HotOp::Inc,
                _ => return Err(perr(line, "hot_op is 'put' or 'inc'")),
            }
        }
        _ => return Err(perr(line, format!("unknown workload key '{key}'"))),
    }
    Ok(())
}

fn parse_fault(
    sc: &mut ScenarioConfig,
    key: &str,
    value: &str,
    line: usize,
) -> Result<(), ScenarioError> {
    let mut fields = BTreeMap::new();
    for tok in value.split_whitespace() {
        let Some((fk, fv)) = tok.split_once(':') else {
            return Err(perr(line, format!("fault field '{tok}' is not key:value")));
        };
        fields.insert(fk.to_string(), fv.to_string());
    }
    let get = |k: &str| -> Option<&String> { fields.get(k) };

    if key.starts_with("partition") {
        let groups = get("groups").ok_or_else(|| perr(line, "partition needs groups:a,b|c,d"))?;
        let Some((a, _b)) = groups.split_once('|') else {
            return Err(perr(line, "partition groups need a '|'"));
        };
        let group_a: Result<BTreeSet<u32>, _> = a
            .split(',')
            .map(|t| t.parse::<u32>().map_err(|_| perr(line, "bad group member")))
            .collect();
        let from_ms: u64 = get("from_ms").map(|v| num(v, line)).transpose()?.unwrap_or(0);
        let to_ms: u64 =
            get("to_ms").map(|v| num(v, line)).transpose()?.unwrap_or(sc.time_limit_ms);
        sc.partitions.push(Partition {
            from_us: from_ms * 1000,
            to_us: to_ms * 1000,
            group_a: group_a?,
        });
        return Ok(());
    }

    let replica: u32 = get("replica")
        .ok_or_else(|| perr(line, "fault needs replica:<index>"))
        .and_then(|v| num(v, line))?;
    let kind = get("kind").ok_or_else(|| perr(line, "fault needs kind:..."))?.clone();
    let behavior = match kind.as_str() {
        "crash" => FaultBehavior::Crash {
            at_us: get("at_ms").map(|v| num::<u64>(v, line)).transpose()?.unwrap_or(0) * 1000,
        },
        "mute" => FaultBehavior::Mute {
            from_us: get("from_ms").map(|v| num::<u64>(v, line)).transpose()?.unwrap_or(0) * 1000,
            to_us: get("to_ms")
                .map(|v| num::<u64>(v, line))
                .transpose()?
                .unwrap_or(sc.time_limit_ms)
                * 1000,
        },
        "equivocate" => FaultBehavior::EquivocateInstance,
        "lie_deps" => FaultBehavior::LieDeps,
        "delay" => FaultBehavior::Delay {
            extra_us: get("extra_ms").map(|v| num::<u64>(v, line)).transpose()?.unwrap_or(0) * 1000,
        },
        "drop" => FaultBehavior::Drop {
            probability: get("p").map(|v| num::<f64>(v, line)).transpose()?.unwrap_or(0.0),
        },
        other => return Err(perr(line, format!("unknown fault kind '{other}'"))),
    };
    sc.faults.push(FaultSpec { replica, behavior });
    Ok(())
}

fn client_from_fields(sc: &ScenarioConfig, rc: RawClient) -> Result<ClientSpec, ScenarioError> {
    let idx = sc.clients.len() as u32;
    let mut spec = ClientSpec {
        home: idx % sc.n as u32,
        region: 0,
        requests: sc.requests_per_client,
        conflict: sc.conflict,
        start_ms: 0,
    };
    let mut region_set = false;
    for (k, v) in &rc.fields {
        match k.as_str() {
            "home" => spec.home = num(v, rc.line)?,
            "region" => {
                spec.region = num(v, rc.line)?;
                region_set = true;
            }
            "requests" => spec.requests = num(v, rc.line)?,
            "conflict" => spec.conflict = num(v, rc.line)?,
            "start_ms" => spec.start_ms = num(v, rc.line)?,
            other => return Err(perr(rc.line, format!("unknown client field '{other}'"))),
        }
    }
    if !region_set {
        spec.region = spec.home;
    }
    Ok(spec)
}

fn fill_defaults(sc: &mut ScenarioConfig) {
    if sc.latency_ms.is_empty() {
        sc.latency_ms = vec![vec![0; sc.n]; sc.n];
    }
    let max_delay = sc.latency_ms.iter().flatten().copied().max().unwrap_or(0).max(1);
    // One extra tick past the slowest possible fast path, so the fast path
    // wins whenever it can.
    if sc.slow_path_ms == 0 {
        sc.slow_path_ms = 2 * max_delay + 1;
    }
    if sc.retransmit_ms == 0 {
        sc.retransmit_ms = 6 * max_delay + 1;
    }
    if sc.resend_wait_ms == 0 {
        sc.resend_wait_ms = sc.retransmit_ms;
    }
    if sc.quorums.is_empty() {
        sc.quorums = ProtocolConfig::default_quorums(sc.n, sc.f);
    }
    if sc.clients.is_empty() {
        sc.clients.push(ClientSpec {
            home: 0,
            region: 0,
            requests: sc.requests_per_client,
            conflict: sc.conflict,
            start_ms: 0,
        });
    }
}

/// Structural validation, after parsing succeeded.
pub fn validate(sc: &ScenarioConfig) -> Result<(), ScenarioError> {
    if sc.n != 3 * sc.f + 1 {
        return Err(ScenarioError::Invalid(format!("n={} must equal 3f+1={}", sc.n, 3 * sc.f + 1)));
    }
    if sc.latency_ms.len() != sc.n || sc.latency_ms.iter().any(|r| r.len() != sc.n) {
        return Err(ScenarioError::Invalid(format!("latency matrix must be {0}x{0}", sc.n)));
    }
    if !(0.0..=1.0).contains(&sc.conflict)
        || sc.clients.iter().any(|c| !(0.0..=1.0).contains(&c.conflict))
    {
        return Err(ScenarioError::Invalid("conflict rate must be within [0,1]".into()));
    }
    for c in &sc.clients {
        if c.home as usize >= sc.n || c.region as usize >= sc.n {
            return Err(ScenarioError::Invalid("client home/region out of range".into()));
        }
    }
    for (leader, q) in &sc.quorums {
        if *leader as usize >= sc.n {
            return Err(ScenarioError::Invalid("quorum leader out of range".into()));
        }
        if q.len() != 2 * sc.f + 1 || q.iter().any(|m| *m as usize >= sc.n) {
            return Err(ScenarioError::Invalid(format!(
                "quorum of r{leader} must have exactly 2f+1 in-range members"
            )));
        }
    }
    if sc.quorums.len() != sc.n {
        return Err(ScenarioError::Invalid("every leader needs a designated quorum".into()));
    }
    let mut seen = BTreeSet::new();
    for fs in &sc.faults {
        if fs.replica as usize >= sc.n {
            return Err(ScenarioError::Invalid("fault target out of range".into()));
        }
        if !seen.insert(fs.replica) {
            return Err(ScenarioError::Invalid("at most one fault per replica".into()));
        }
    }
    let severe = sc.faults.iter().filter(|f| f.behavior.is_byzantine_or_crash()).count();
    if severe > sc.f && !sc.allow_out_of_model {
        return Err(ScenarioError::Invalid(format!(
            "{severe} byzantine/crashed replicas exceed f={} (set allow_out_of_model)",
            sc.f
        )));
    }
    for p in &sc.partitions {
        if p.group_a.iter().any(|m| *m as usize >= sc.n) {
            return Err(ScenarioError::Invalid("partition group member out of range".into()));
        }
    }
    if sc.owner_change_quorum == 0 || sc.owner_change_quorum > sc.n {
        return Err(ScenarioError::Invalid("owner_change_quorum out of range".into()));
    }
    Ok(())
}

/// Deterministic per-client workload. Hot-key membership is decided by a
/// per-command uniform draw that does not depend on the conflict rate, so
/// sweeps over the rate nest: raising it only adds hot commands.
pub fn build_work(sc: &ScenarioConfig, client_idx: u32) -> Vec<WorkItem> {
    let spec = &sc.clients[client_idx as usize];
    let mut rng = ChaCha8Rng::seed_from_u64(sc.seed ^ (0x776f_726b << 8) ^ client_idx as u64);
    let mut items = Vec::with_capacity(spec.requests as usize);
    for i in 0..spec.requests {
        let u: f64 = rng.gen();
        let hot = u < spec.conflict;
        if hot {
            let op = match sc.hot_op {
                HotOp::Put => Op::Put(Value::Int((client_idx as i64) * 1_000_000 + i as i64)),
                HotOp::Inc => Op::Inc(1),
            };
            items.push(WorkItem { key: b"hot".to_vec(), op });
        } else {
            let key = format!("c{}-k{}", client_idx, i % sc.keyspace.max(1));
            items.push(WorkItem {
                key: key.into_bytes(),
                op: Op::Put(Value::Int((client_idx as i64) * 1_000_000 + i as i64)),
            });
        }
    }
    items
}

/// Assemble the simulator inputs for a parsed, validated scenario.
pub fn build_setup(sc: &ScenarioConfig) -> SimSetup {
    let mut key_seed = [0u8; 32];
    key_seed[..8].copy_from_slice(&sc.seed.to_be_bytes());
    key_seed[8..16].copy_from_slice(&(sc.n as u64).to_be_bytes());

    let keys = crate::sim::build_key_table(sc.n, sc.clients.len(), &key_seed);
    let cfg = ProtocolConfig {
        n: sc.n,
        f: sc.f,
        keys,
        slow_quorums: sc.quorums.clone(),
        slow_timer_us: sc.slow_path_ms * 1000,
        retransmit_timer_us: sc.retransmit_ms * 1000,
        resend_wait_us: sc.resend_wait_ms * 1000,
        buffer_timeout_us: sc.retransmit_ms * 1000,
        buffer_cap: 1024,
        checkpoint_interval: sc.checkpoint_interval,
        owner_change_quorum: sc.owner_change_quorum,
        rehome_after: sc.rehome_after.max(1),
        backoff_cap: sc.backoff_cap,
        partial_rollback: sc.partial_rollback,
    };
    let latency = LatencyModel {
        delays_us: sc
            .latency_ms
            .iter()
            .map(|row| row.iter().map(|ms| ms * 1000).collect())
            .collect(),
        client_region: sc.clients.iter().map(|c| c.region).collect(),
        jitter_us: sc.jitter_ms * 1000,
    };
    let client_work: Vec<(u32, Vec<WorkItem>, SimTime)> = sc
        .clients
        .iter()
        .enumerate()
        .map(|(i, spec)| (spec.home, build_work(sc, i as u32), spec.start_ms * 1000))
        .collect();
    let faults: BTreeMap<u32, FaultBehavior> =
        sc.faults.iter().map(|fs| (fs.replica, fs.behavior.clone())).collect();

    SimSetup {
        label: sc.name.clone(),
        cfg,
        latency,
        seed: sc.seed,
        key_seed,
        client_work,
        faults,
        partitions: sc.partitions.clone(),
        time_limit: sc.time_limit_ms * 1000,
    }
}
