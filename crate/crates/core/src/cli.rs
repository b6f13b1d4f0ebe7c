//! Command-line front end: `launch`, `scale`, `size`, `simulate`, `report`.
//!
//! Commands return their output as a string so they can be tested without a
//! process; the binary only prints it and maps errors to exit codes.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Duration;

use clap::{Parser, Subcommand, ValueEnum};
use parking_lot::Mutex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::clock::{as_ms, from_ms};
use crate::discovery::{DiscoveryConfig, LocalDiscovery};
use crate::envelope::{derive_service_identity, ReplicaId, ServiceIdentity};
use crate::latency::{LatencyModel, LatencySampler};
use crate::pool::{
    Change, InstanceKind, LifecycleEvent, Placement, PoolConfig, PoolManager, ReplicaState,
    ScaleDirection,
};
use crate::proxy::{flatten_topology, forwarding_links, LinkState, TopologyNode};
use crate::sim::{self, Scenario, SimError};
use crate::sizing::{self, VmFailureParams};

pub const SEED_ENV: &str = "FTPROXY_SEED";
pub const DEFAULT_STATE_FILE: &str = "ftproxy-cluster.json";

/// Scenarios shipped with the crate, addressable by name.
pub const BUNDLED_SCENARIOS: &[(&str, &str)] = &[
    (
        "stochastic-planner",
        include_str!("../scenarios/stochastic-planner.toml"),
    ),
    (
        "regional-slowdown",
        include_str!("../scenarios/regional-slowdown.toml"),
    ),
    ("contention", include_str!("../scenarios/contention.toml")),
    (
        "preemption-timeline",
        include_str!("../scenarios/preemption-timeline.toml"),
    ),
];

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("invalid configuration:\n  {}", .0.join("\n  "))]
    Validation(Vec<String>),
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error("{path}: {message}")]
    Io { path: String, message: String },
    #[error("{0}")]
    Failed(String),
}

fn io_err(path: &Path, e: impl std::fmt::Display) -> CliError {
    CliError::Io {
        path: path.display().to_string(),
        message: e.to_string(),
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, ValueEnum)]
pub enum Format {
    #[default]
    Text,
    Csv,
}

#[derive(Debug, Parser)]
#[command(name = "ftproxy", version, about = "Replicated request fan-out: cluster, sizing and simulation tools")]
pub struct Cli {
    /// Output style; csv has a header row and a stable column order.
    #[arg(long, value_enum, global = true, default_value = "text")]
    pub format: Format,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum ScaleArg {
    Up,
    Down,
}

impl From<ScaleArg> for ScaleDirection {
    fn from(a: ScaleArg) -> Self {
        match a {
            ScaleArg::Up => ScaleDirection::Up,
            ScaleArg::Down => ScaleDirection::Down,
        }
    }
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Bring up a cluster from a spec file and print its readiness table.
    Launch {
        config: PathBuf,
        /// Where simulated cluster state is kept for later `scale` calls.
        #[arg(long, default_value = DEFAULT_STATE_FILE)]
        state: PathBuf,
        /// Wall-clock mode only: keep the cluster up this long before exiting.
        #[arg(long, default_value_t = 0)]
        hold_secs: u64,
    },
    /// Grow or shrink a service's replica set.
    Scale {
        direction: ScaleArg,
        count: usize,
        #[arg(long, default_value = DEFAULT_STATE_FILE)]
        state: PathBuf,
        /// Service to scale; required when the cluster has several.
        #[arg(long)]
        service: Option<String>,
    },
    /// Failure probability, replica count and cost arithmetic.
    Size {
        /// Mean time between preemptions.
        #[arg(long)]
        uptime: Option<f64>,
        /// Mean downtime per preemption, same unit as --uptime.
        #[arg(long)]
        recovery: Option<f64>,
        /// Acceptable probability that every replica is down at once.
        #[arg(long)]
        target: Option<f64>,
        /// Replica count to evaluate when no --target is given.
        #[arg(long)]
        replicas: Option<u64>,
        /// Hourly prices: the first is the single-machine plan, the rest the
        /// replicated plan.
        #[arg(long = "price")]
        prices: Vec<f64>,
    },
    /// Run a scenario file (or a bundled scenario by name) and write reports.
    Simulate {
        scenario: String,
        #[arg(long, default_value = "ftproxy-out")]
        out: PathBuf,
        /// Overrides the scenario seed (takes precedence over FTPROXY_SEED).
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Summarize a directory written by `simulate`.
    Report { dir: PathBuf },
    /// List bundled scenarios.
    Scenarios,
}

/// Parses arguments and runs one command.
pub fn run_from_args<I, T>(args: I) -> Result<String, CliError>
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    match Cli::try_parse_from(args) {
        Ok(cli) => run(cli),
        Err(e) => match e.kind() {
            clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion => {
                Ok(e.to_string())
            }
            _ => Err(CliError::Usage(e.to_string())),
        },
    }
}

pub fn run(cli: Cli) -> Result<String, CliError> {
    let fmt = cli.format;
    match cli.command {
        Command::Launch {
            config,
            state,
            hold_secs,
        } => cmd_launch(&config, &state, hold_secs, fmt),
        Command::Scale {
            direction,
            count,
            state,
            service,
        } => cmd_scale(direction.into(), count, &state, service.as_deref(), fmt),
        Command::Size {
            uptime,
            recovery,
            target,
            replicas,
            prices,
        } => cmd_size(uptime, recovery, target, replicas, &prices, fmt),
        Command::Simulate {
            scenario,
            out,
            seed,
        } => {
            let env_seed = match std::env::var(SEED_ENV) {
                Ok(v) => Some(v.trim().parse::<u64>().map_err(|_| {
                    CliError::Usage(format!("{SEED_ENV}={v:?} is not an unsigned integer"))
                })?),
                Err(_) => None,
            };
            cmd_simulate(&scenario, &out, seed.or(env_seed), fmt)
        }
        Command::Report { dir } => cmd_report(&dir, fmt),
        Command::Scenarios => Ok(BUNDLED_SCENARIOS
            .iter()
            .map(|(n, _)| format!("{n}\n"))
            .collect()),
    }
}

// ---------------------------------------------------------------- cluster

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TopologyKind {
    #[default]
    Direct,
    /// The robot dials one gateway per service, which fans out to replicas.
    Gateway,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Mode {
    #[default]
    Sim,
    WallClock,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClusterSpec {
    pub schema_version: u32,
    #[serde(default)]
    pub mode: Mode,
    #[serde(default)]
    pub topology: TopologyKind,
    /// Wall-clock mode: address the discovery server binds to.
    #[serde(default = "default_discovery")]
    pub discovery: String,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_relaunch_ms")]
    pub relaunch_delay_ms: f64,
    #[serde(default = "default_monitor_ms")]
    pub monitor_interval_ms: f64,
    pub services: Vec<ServiceEntry>,
}

fn default_discovery() -> String {
    "127.0.0.1:0".into()
}

fn default_relaunch_ms() -> f64 {
    20.0 * 60.0 * 1000.0
}

fn default_monitor_ms() -> f64 {
    1000.0
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ServiceEntry {
    pub name: String,
    #[serde(default = "default_service_latency")]
    pub latency: LatencyModel,
    /// Two spot replicas in different regions when empty.
    #[serde(default)]
    pub replicas: Vec<Placement>,
}

fn default_service_latency() -> LatencyModel {
    LatencyModel::Fixed { ms: 10.0 }
}

impl ClusterSpec {
    pub fn from_toml(text: &str) -> Result<Self, CliError> {
        let spec: ClusterSpec =
            toml::from_str(text).map_err(|e| CliError::Validation(vec![e.to_string()]))?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let mut errs = Vec::new();
        if self.schema_version != 1 {
            errs.push(format!(
                "schema_version: unsupported version {} (expected 1)",
                self.schema_version
            ));
        }
        if self.services.is_empty() {
            errs.push("services: at least one service is required".into());
        }
        let mut names = std::collections::BTreeSet::new();
        for (i, s) in self.services.iter().enumerate() {
            if s.name.is_empty() {
                errs.push(format!("services[{i}].name: must not be empty"));
            }
            if !names.insert(&s.name) {
                errs.push(format!("services[{i}].name: duplicate {:?}", s.name));
            }
            if let Err(e) = s.latency.validate() {
                errs.push(format!("services[{i}].latency: {e}"));
            }
            for (j, p) in s.replicas.iter().enumerate() {
                if !(p.hourly_cost.is_finite() && p.hourly_cost >= 0.0) {
                    errs.push(format!("services[{i}].replicas[{j}].hourly_cost: must be non-negative"));
                }
            }
        }
        if !(self.relaunch_delay_ms.is_finite() && self.relaunch_delay_ms >= 0.0) {
            errs.push("relaunch_delay_ms: must be non-negative".into());
        }
        if !(self.monitor_interval_ms.is_finite() && self.monitor_interval_ms > 0.0) {
            errs.push("monitor_interval_ms: must be positive".into());
        }
        if errs.is_empty() {
            Ok(())
        } else {
            Err(CliError::Validation(errs))
        }
    }

    pub fn placements(entry: &ServiceEntry) -> Vec<Placement> {
        if entry.replicas.is_empty() {
            PoolConfig::default().placements
        } else {
            entry.replicas.clone()
        }
    }

    pub fn service_identity(entry: &ServiceEntry) -> ServiceIdentity {
        derive_service_identity(&entry.name, &[0; 32], 1).expect("validated name")
    }

    fn pool_config(&self, entry: &ServiceEntry) -> PoolConfig {
        let placements = Self::placements(entry);
        PoolConfig {
            desired_replicas: placements.len(),
            placements,
            relaunch_delay: LatencyModel::Fixed {
                ms: self.relaunch_delay_ms,
            },
            provision_delay: LatencyModel::zero(),
            monitor_interval: from_ms(self.monitor_interval_ms),
            heartbeat_interval: PoolConfig::default().heartbeat_interval,
        }
    }
}

/// A simulated cluster persisted between CLI invocations.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ClusterState {
    pub spec: ClusterSpec,
    pub now: Duration,
    pub services: Vec<ServiceState>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ServiceState {
    pub name: String,
    pub pool: PoolManager,
}

/// One row of a readiness table.
#[derive(Clone, Debug, PartialEq)]
pub struct ReadinessRow {
    pub service: String,
    pub node: String,
    pub state: String,
    pub link: String,
    pub region: String,
    pub endpoint: String,
}

fn topology_for(spec: &ClusterSpec, name: &str, pool: &PoolManager) -> TopologyNode {
    let replicas: Vec<TopologyNode> = pool
        .active()
        .map(|r| TopologyNode::replica(r.replica_id.0, r.endpoint.as_str()))
        .collect();
    match spec.topology {
        TopologyKind::Direct => TopologyNode::robot(replicas),
        TopologyKind::Gateway => TopologyNode::robot(vec![TopologyNode::gateway(
            1_000_000,
            &format!("sim://gateway/{name}"),
            replicas,
        )]),
    }
}

/// Readiness rows for one simulated service.
pub fn readiness(spec: &ClusterSpec, name: &str, pool: &PoolManager) -> Vec<ReadinessRow> {
    let sid = pool.service_id();
    let state_of = |rid: ReplicaId| {
        pool.replica(rid)
            .map(|r| (r.state, r.region.clone(), r.is_registered()))
    };
    let link_for = |state: ReplicaState, registered: bool| {
        if state == ReplicaState::Running && registered {
            LinkState::Up
        } else if state == ReplicaState::Running || state == ReplicaState::Provisioning {
            LinkState::Connecting
        } else {
            LinkState::Down
        }
    };
    let mut rows = Vec::new();
    let topo = topology_for(spec, name, pool);
    let direct = if topo.children.is_empty() {
        Vec::new()
    } else {
        flatten_topology(&topo, sid).unwrap_or_default()
    };
    for link in &direct {
        match state_of(link.replica_id) {
            Some((state, region, registered)) => rows.push(ReadinessRow {
                service: name.into(),
                node: link.replica_id.to_string(),
                state: state.to_string(),
                link: link_for(state, registered).as_str().into(),
                region,
                endpoint: link.endpoint.to_string(),
            }),
            None => rows.push(ReadinessRow {
                service: name.into(),
                node: "gateway".into(),
                state: "RUNNING".into(),
                link: LinkState::Up.as_str().into(),
                region: String::new(),
                endpoint: link.endpoint.to_string(),
            }),
        }
    }
    if !topo.children.is_empty() {
        for (gw, children) in forwarding_links(&topo, sid).unwrap_or_default() {
            for child in children {
                if let Some((state, region, registered)) = state_of(child.replica_id) {
                    rows.push(ReadinessRow {
                        service: name.into(),
                        node: child.replica_id.to_string(),
                        state: state.to_string(),
                        link: format!("{} via {gw}", link_for(state, registered).as_str()),
                        region,
                        endpoint: child.endpoint.to_string(),
                    });
                }
            }
        }
    }
    // Replicas no longer in the topology (retired, or preempted and waiting).
    for r in pool.replicas() {
        if !rows.iter().any(|row| row.node == r.replica_id.to_string()) {
            rows.push(ReadinessRow {
                service: name.into(),
                node: r.replica_id.to_string(),
                state: r.state.to_string(),
                link: LinkState::Down.as_str().into(),
                region: r.region.clone(),
                endpoint: r.endpoint.to_string(),
            });
        }
    }
    rows
}

fn render_rows(rows: &[ReadinessRow], fmt: Format) -> String {
    let mut out = String::new();
    match fmt {
        Format::Csv => {
            out.push_str("service,node,state,link,region,endpoint\n");
            for r in rows {
                let _ = writeln!(
                    out,
                    "{},{},{},{},{},{}",
                    r.service, r.node, r.state, r.link, r.region, r.endpoint
                );
            }
        }
        Format::Text => {
            let _ = writeln!(
                out,
                "{:<12} {:<8} {:<13} {:<28} {:<12} ENDPOINT",
                "SERVICE", "NODE", "STATE", "LINK", "REGION"
            );
            for r in rows {
                let _ = writeln!(
                    out,
                    "{:<12} {:<8} {:<13} {:<28} {:<12} {}",
                    r.service, r.node, r.state, r.link, r.region, r.endpoint
                );
            }
        }
    }
    out
}

fn read_text(path: &Path) -> Result<String, CliError> {
    fs::read_to_string(path).map_err(|e| io_err(path, e))
}

pub fn cmd_launch(config: &Path, state_path: &Path, hold_secs: u64, fmt: Format) -> Result<String, CliError> {
    let spec = ClusterSpec::from_toml(&read_text(config)?)?;
    match spec.mode {
        Mode::Sim => {
            let state = launch_sim(spec)?;
            save_state(&state, state_path)?;
            let rows: Vec<ReadinessRow> = state
                .services
                .iter()
                .flat_map(|s| readiness(&state.spec, &s.name, &s.pool))
                .collect();
            Ok(render_rows(&rows, fmt))
        }
        Mode::WallClock => launch_wall_clock(&spec, hold_secs, fmt),
    }
}

/// Provisions every service's pool in a fresh simulated cluster and
/// registers the replicas with discovery.
pub fn launch_sim(spec: ClusterSpec) -> Result<ClusterState, CliError> {
    let mut discovery = LocalDiscovery::new(DiscoveryConfig::default());
    let mut services = Vec::new();
    for (i, entry) in spec.services.iter().enumerate() {
        let sid = ClusterSpec::service_identity(entry);
        let mut pool = PoolManager::new(sid, spec.pool_config(entry), spec.seed.wrapping_add(i as u64))
            .map_err(|e| CliError::Validation(vec![format!("services[{i}]: {e}")]))?;
        pool.launch(Duration::ZERO);
        pool.monitor_tick(Duration::ZERO, &mut discovery);
        services.push(ServiceState {
            name: entry.name.clone(),
            pool,
        });
    }
    Ok(ClusterState {
        spec,
        now: Duration::ZERO,
        services,
    })
}

fn save_state(state: &ClusterState, path: &Path) -> Result<(), CliError> {
    let json = serde_json::to_string_pretty(state).map_err(|e| io_err(path, e))?;
    fs::write(path, json).map_err(|e| io_err(path, e))
}

fn load_state(path: &Path) -> Result<ClusterState, CliError> {
    let text = read_text(path).map_err(|_| {
        CliError::Failed(format!(
            "no cluster state at {} (run `ftproxy launch` first)",
            path.display()
        ))
    })?;
    serde_json::from_str(&text).map_err(|e| io_err(path, e))
}

pub fn cmd_scale(
    direction: ScaleDirection,
    count: usize,
    state_path: &Path,
    service: Option<&str>,
    fmt: Format,
) -> Result<String, CliError> {
    let mut state = load_state(state_path)?;
    let idx = match service {
        Some(name) => state
            .services
            .iter()
            .position(|s| s.name == name)
            .ok_or_else(|| CliError::Usage(format!("no service named {name:?}")))?,
        None if state.services.len() == 1 => 0,
        None => {
            return Err(CliError::Usage(
                "cluster has several services; pass --service".into(),
            ))
        }
    };
    let mut discovery = LocalDiscovery::new(DiscoveryConfig::default());
    let now = state.now;
    let svc = &mut state.services[idx];
    svc.pool
        .scale(direction, count, now, &mut discovery)
        .map_err(|e| CliError::Failed(e.to_string()))?;
    let rows = readiness(&state.spec, &svc.name, &svc.pool);
    let desired = svc.pool.desired_replicas();
    save_state(&state, state_path)?;
    let mut out = render_rows(&rows, fmt);
    if fmt == Format::Text {
        let _ = writeln!(out, "desired replicas: {desired}");
    }
    Ok(out)
}

fn launch_wall_clock(spec: &ClusterSpec, hold_secs: u64, fmt: Format) -> Result<String, CliError> {
    use crate::net::{DiscoveryService, ReplicaServer, TcpRegistrar, TcpRobot};
    use crate::proxy::{HeartbeatPolicy, LocalService};
    use crate::discovery::Registrar;

    if spec.topology == TopologyKind::Gateway {
        return Err(CliError::Validation(vec![
            "topology: gateway topologies run in simulation only".into(),
        ]));
    }
    let discovery = DiscoveryService::bind(&spec.discovery, DiscoveryConfig::default())
        .map_err(|e| CliError::Failed(format!("bind {}: {e}", spec.discovery)))?;
    let mut registrar = TcpRegistrar::new(discovery.local_addr());
    let robot = TcpRobot::new(HeartbeatPolicy::default());
    let mut servers = Vec::new();
    let mut rows = Vec::new();
    let mut probes = String::new();
    for (i, entry) in spec.services.iter().enumerate() {
        let sid = ClusterSpec::service_identity(entry);
        for (j, placement) in ClusterSpec::placements(entry).iter().enumerate() {
            let rid = ReplicaId(j as u64 + 1);
            let sampler = Arc::new(Mutex::new(LatencySampler::keyed(
                entry.latency.clone(),
                spec.seed.wrapping_add(i as u64),
                sim::streams::SERVICE,
                rid.0,
            )));
            let service = LocalService::new(sid, move |p: &[u8]| {
                let delay = sampler.lock().sample();
                std::thread::sleep(delay);
                Ok(p.to_vec())
            });
            let server = ReplicaServer::bind("127.0.0.1:0", rid, service, 4)
                .map_err(|e| CliError::Failed(format!("bind replica: {e}")))?;
            registrar
                .register_peer(sid, server.endpoint(), rid, Duration::ZERO)
                .map_err(|e| CliError::Failed(format!("register {}: {e}", entry.name)))?;
            servers.push((entry.name.clone(), placement.region.clone(), server));
        }
        robot
            .refresh(&mut registrar, sid)
            .map_err(|e| CliError::Failed(format!("lookup {}: {e}", entry.name)))?;
        let started = std::time::Instant::now();
        let probe = robot
            .submit_request(b"probe".to_vec(), sid, Duration::from_secs(10))
            .map_err(|e| CliError::Failed(format!("probe {}: {e}", entry.name)))?;
        let _ = writeln!(
            probes,
            "probe {}: {} answered in {:.1} ms",
            entry.name,
            probe.replica_id,
            as_ms(started.elapsed())
        );
    }
    for link in robot.links() {
        let (name, region) = servers
            .iter()
            .find(|(_, _, s)| s.endpoint() == link.endpoint)
            .map(|(n, r, _)| (n.clone(), r.clone()))
            .unwrap_or_default();
        rows.push(ReadinessRow {
            service: name,
            node: link.replica_id.to_string(),
            state: "RUNNING".into(),
            link: link.state.as_str().into(),
            region,
            endpoint: link.endpoint.to_string(),
        });
    }
    let mut out = render_rows(&rows, fmt);
    if fmt == Format::Text {
        let _ = writeln!(out, "discovery: {}", discovery.local_addr());
        out.push_str(&probes);
    }
    if hold_secs > 0 {
        print!("{out}");
        out.clear();
        std::thread::sleep(Duration::from_secs(hold_secs));
    }
    robot.shutdown();
    drop(servers);
    discovery.shutdown();
    Ok(out)
}

// ---------------------------------------------------------------- size

pub fn cmd_size(
    uptime: Option<f64>,
    recovery: Option<f64>,
    target: Option<f64>,
    replicas: Option<u64>,
    prices: &[f64],
    fmt: Format,
) -> Result<String, CliError> {
    let usage = |e: sizing::SizingError| CliError::Usage(e.to_string());
    let mut out = String::new();
    match (uptime, recovery) {
        (Some(u), Some(r)) => {
            let params = VmFailureParams::new(u, r).map_err(usage)?;
            let p_vm = sizing::vm_failure_probability(params).map_err(usage)?;
            let n = match (target, replicas) {
                (Some(t), _) => sizing::required_replicas(p_vm, t).map_err(usage)?,
                (None, Some(n)) if n >= 1 => n,
                (None, Some(_)) => return Err(CliError::Usage("--replicas must be at least 1".into())),
                (None, None) => 2,
            };
            if n > 1_000_000 {
                return Err(CliError::Usage(format!("{n} replicas is not a plan")));
            }
            let p_system = sizing::system_failure_probability(&vec![p_vm; n as usize]).map_err(usage)?;
            match fmt {
                Format::Csv => {
                    let _ = writeln!(out, "p_vm,p_system,replicas,target");
                    let _ = writeln!(
                        out,
                        "{p_vm:.6e},{p_system:.6e},{n},{}",
                        target.map(|t| format!("{t:e}")).unwrap_or_default()
                    );
                }
                Format::Text => {
                    let _ = writeln!(out, "p_vm      {p_vm:.6} ({:.4}%)", p_vm * 100.0);
                    let _ = writeln!(out, "p_system  {p_system:.3e} ({:.4}%)", p_system * 100.0);
                    let _ = writeln!(out, "replicas  {n}");
                    if let Some(t) = target {
                        let _ = writeln!(out, "target    {t:e}");
                    }
                }
            }
        }
        (None, None) => {
            if target.is_some() || replicas.is_some() {
                return Err(CliError::Usage("--target and --replicas need --uptime and --recovery".into()));
            }
        }
        _ => return Err(CliError::Usage("--uptime and --recovery go together".into())),
    }
    if !prices.is_empty() {
        if prices.len() < 2 {
            return Err(CliError::Usage(
                "give one --price for the single machine and at least one for the replicas".into(),
            ));
        }
        let rows = sizing::cost_compare(prices[0], &prices[1..]).map_err(usage)?;
        match fmt {
            Format::Csv => {
                if !out.is_empty() {
                    out.push('\n');
                }
                let _ = writeln!(out, "plan,hourly_total,ratio");
                for r in rows {
                    let _ = writeln!(out, "{},{:.4},{:.4}", r.name, r.hourly_total, r.ratio);
                }
            }
            Format::Text => {
                for r in rows {
                    let _ = writeln!(out, "{:<10} {:>8.2}/h  {:.2}x", r.name, r.hourly_total, r.ratio);
                }
            }
        }
    }
    if out.is_empty() {
        return Err(CliError::Usage(
            "nothing to compute: pass --uptime/--recovery and/or --price".into(),
        ));
    }
    Ok(out)
}

// ---------------------------------------------------------------- simulate

/// Loads a scenario from a path, or a bundled scenario by name.
pub fn load_scenario(name_or_path: &str) -> Result<Scenario, CliError> {
    let path = Path::new(name_or_path);
    if path.exists() {
        return Ok(Scenario::load(path)?);
    }
    let stem = name_or_path.trim_end_matches(".toml");
    match BUNDLED_SCENARIOS.iter().find(|(n, _)| *n == stem) {
        Some((_, text)) => Ok(Scenario::from_toml(text)?),
        None => Err(CliError::Usage(format!(
            "{name_or_path}: no such file or bundled scenario (try `ftproxy scenarios`)"
        ))),
    }
}

pub fn cmd_simulate(name_or_path: &str, out: &Path, seed: Option<u64>, fmt: Format) -> Result<String, CliError> {
    let mut scenario = load_scenario(name_or_path)?;
    if let Some(s) = seed {
        scenario.seed = s;
    }
    let report = sim::run_scenario(&scenario)?;
    sim::emit_report(&report, out)?;
    Ok(match fmt {
        Format::Csv => format!("{}\n{}\n", sim::SUMMARY_HEADER, report.summary_line()),
        Format::Text => {
            let s = &report.summary;
            let ms = |v: Option<f64>| v.map(|x| format!("{x:.1} ms")).unwrap_or_else(|| "-".into());
            format!(
                "{}: {} requests, {} delivered, {} timed out, {} unavailable\n\
                 mean {}  p50 {}  p99 {}  success {:.2}%  cost ${:.4}\n\
                 reports written to {}\n",
                if report.scenario.is_empty() { "scenario" } else { &report.scenario },
                s.submitted,
                s.delivered,
                s.timed_out,
                s.unavailable,
                ms(s.mean_ms),
                ms(s.p50_ms),
                ms(s.p99_ms),
                s.success_rate * 100.0,
                s.cost,
                out.display()
            )
        }
    })
}

// ---------------------------------------------------------------- report

#[derive(Clone, Debug, PartialEq)]
struct CsvRow {
    last_ms: f64,
    latency_ms: Option<f64>,
    winner: Option<u64>,
    status: String,
}

fn parse_requests_csv(path: &Path, text: &str) -> Result<Vec<CsvRow>, CliError> {
    let mut lines = text.lines();
    if lines.next() != Some(sim::REQUESTS_HEADER) {
        return Err(io_err(path, "unexpected header"));
    }
    lines
        .enumerate()
        .map(|(i, line)| {
            let cols: Vec<&str> = line.split(',').collect();
            if cols.len() != 6 {
                return Err(io_err(path, format!("line {}: expected 6 columns", i + 2)));
            }
            let num = |s: &str| -> Result<Option<f64>, CliError> {
                if s.is_empty() {
                    Ok(None)
                } else {
                    s.parse()
                        .map(Some)
                        .map_err(|_| io_err(path, format!("line {}: bad number {s:?}", i + 2)))
                }
            };
            let last_ms = num(cols[2])?.or(num(cols[1])?).unwrap_or(0.0);
            Ok(CsvRow {
                last_ms,
                latency_ms: num(cols[3])?,
                winner: num(cols[4])?.map(|w| w as u64),
                status: cols[5].to_string(),
            })
        })
        .collect()
}

/// Per-replica state intervals reconstructed from a lifecycle log.
pub fn timeline(events: &[LifecycleEvent], end: Duration) -> BTreeMap<ReplicaId, Vec<(Duration, Duration, ReplicaState)>> {
    let mut open: BTreeMap<ReplicaId, (Duration, ReplicaState)> = BTreeMap::new();
    let mut out: BTreeMap<ReplicaId, Vec<(Duration, Duration, ReplicaState)>> = BTreeMap::new();
    for e in events {
        if let Change::State { to, .. } = e.change {
            if let Some((since, state)) = open.insert(e.replica_id, (e.at, to)) {
                if e.at > since {
                    out.entry(e.replica_id).or_default().push((since, e.at, state));
                }
            }
        }
    }
    for (rid, (since, state)) in open {
        if end > since {
            out.entry(rid).or_default().push((since, end, state));
        }
    }
    out
}

pub fn cmd_report(dir: &Path, fmt: Format) -> Result<String, CliError> {
    let req_path = dir.join("requests.csv");
    let rows = parse_requests_csv(&req_path, &read_text(&req_path)?)?;
    let log_path = dir.join("lifecycle.log");
    let events: Vec<LifecycleEvent> = match fs::read_to_string(&log_path) {
        Ok(text) => text
            .lines()
            .filter(|l| !l.trim().is_empty())
            .map(|l| {
                LifecycleEvent::parse_log_line(l)
                    .ok_or_else(|| io_err(&log_path, format!("bad line {l:?}")))
            })
            .collect::<Result<_, _>>()?,
        Err(_) => Vec::new(),
    };
    let latencies: Vec<f64> = rows
        .iter()
        .filter(|r| r.status == "ok" || r.status == "service_error")
        .filter_map(|r| r.latency_ms)
        .collect();
    let n = rows.len();
    let delivered = latencies.len();
    let mean = (!latencies.is_empty()).then(|| latencies.iter().sum::<f64>() / delivered as f64);
    let p50 = sim::percentile(&latencies, 0.5).ok();
    let p99 = sim::percentile(&latencies, 0.99).ok();
    let mut wins: BTreeMap<u64, usize> = BTreeMap::new();
    for r in &rows {
        if let Some(w) = r.winner {
            *wins.entry(w).or_default() += 1;
        }
    }
    let count = |s: &str| rows.iter().filter(|r| r.status == s).count();
    let success = if n == 0 { 0.0 } else { delivered as f64 / n as f64 };
    let last_request = rows.iter().map(|r| r.last_ms).fold(0.0, f64::max);
    let end = events
        .iter()
        .map(|e| e.at)
        .max()
        .unwrap_or_default()
        .max(from_ms(last_request));
    let tl = timeline(&events, end);
    let fmt_opt = |v: Option<f64>| v.map(|x| format!("{x:.3}")).unwrap_or_default();

    let mut out = String::new();
    match fmt {
        Format::Csv => {
            let _ = writeln!(out, "submitted,delivered,timed_out,unavailable,mean_ms,p50_ms,p99_ms,success_rate");
            let _ = writeln!(
                out,
                "{n},{delivered},{},{},{},{},{},{success:.6}",
                count("timeout"),
                count("unavailable"),
                fmt_opt(mean),
                fmt_opt(p50),
                fmt_opt(p99)
            );
            let _ = writeln!(out, "\nreplica,wins");
            for (w, c) in &wins {
                let _ = writeln!(out, "{w},{c}");
            }
            let _ = writeln!(out, "\nreplica,start_ms,end_ms,state");
            for (rid, spans) in &tl {
                for (a, b, s) in spans {
                    let _ = writeln!(out, "{},{},{},{}", rid.0, a.as_millis(), b.as_millis(), s);
                }
            }
        }
        Format::Text => {
            let _ = writeln!(
                out,
                "requests {n}  delivered {delivered}  timed out {}  unavailable {}",
                count("timeout"),
                count("unavailable")
            );
            let _ = writeln!(
                out,
                "mean {} ms  p50 {} ms  p99 {} ms  success {:.2}%",
                fmt_opt(mean),
                fmt_opt(p50),
                fmt_opt(p99),
                success * 100.0
            );
            if !wins.is_empty() {
                let _ = writeln!(out, "\nwins by replica");
                for (w, c) in &wins {
                    let share = *c as f64 / delivered.max(1) as f64;
                    let _ = writeln!(out, "  r{w:<4} {c:>7}  {:>6.2}%  {}", share * 100.0, "#".repeat((share * 40.0).round() as usize));
                }
            }
            if !tl.is_empty() {
                let _ = writeln!(out, "\nlifecycle");
                for (rid, spans) in &tl {
                    for (a, b, s) in spans {
                        let _ = writeln!(
                            out,
                            "  {rid:<5} {:>10.1}s .. {:>10.1}s  {s}",
                            a.as_secs_f64(),
                            b.as_secs_f64()
                        );
                    }
                }
            }
        }
    }
    Ok(out)
}

/// A default two-replica cluster spec, handy for docs and tests.
pub fn default_cluster_toml() -> String {
    let spec = ClusterSpec {
        schema_version: 1,
        mode: Mode::Sim,
        topology: TopologyKind::Direct,
        discovery: default_discovery(),
        seed: 1,
        relaunch_delay_ms: default_relaunch_ms(),
        monitor_interval_ms: default_monitor_ms(),
        services: vec![ServiceEntry {
            name: "yolo".into(),
            latency: default_service_latency(),
            replicas: vec![
                Placement::new("aws", "us-west-1", InstanceKind::Spot, 0.17),
                Placement::new("aws", "us-west-2", InstanceKind::Spot, 0.17),
            ],
        }],
    };
    toml::to_string_pretty(&spec).expect("spec serializes")
}
