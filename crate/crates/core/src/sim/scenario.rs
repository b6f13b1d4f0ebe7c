//! Scenario files: deployment, latency models, faults and workload.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;
use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::clock::from_ms;
use crate::envelope::{derive_service_identity, Endpoint, ReplicaId, ServiceIdentity};
use crate::latency::LatencyModel;
use crate::pool::{InstanceKind, Placement, PoolConfig, ScaleDirection};
use crate::proxy::TopologyNode;

use super::SimError;

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    pub schema_version: u32,
    #[serde(default)]
    pub name: String,
    pub seed: u64,
    pub service: ServiceSpec,
    pub workload: Workload,
    #[serde(default)]
    pub pool: PoolSection,
    pub replicas: Vec<ReplicaSpec>,
    #[serde(default)]
    pub gateways: Vec<GatewaySpec>,
    #[serde(default)]
    pub faults: FaultSpec,
    #[serde(default)]
    pub events: Vec<ScaleEvent>,
    /// Models for replicas added by scale-up events.
    #[serde(default)]
    pub scale_template: Option<ReplicaTemplate>,
    /// Record every frame hop in the report.
    #[serde(default)]
    pub trace: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ServiceSpec {
    pub name: String,
    #[serde(default = "one")]
    pub protocol_version: u32,
    /// 64 hex digits; all zeros when absent.
    #[serde(default)]
    pub fingerprint: Option<String>,
}

fn one() -> u32 {
    1
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Workload {
    pub requests: u64,
    pub inter_arrival_ms: f64,
    pub timeout_ms: u64,
    #[serde(default = "default_payload")]
    pub payload_bytes: usize,
}

fn default_payload() -> usize {
    64
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PoolSection {
    pub relaunch_delay: LatencyModel,
    pub provision_delay: LatencyModel,
    pub monitor_interval_ms: f64,
    pub heartbeat_interval_ms: f64,
}

impl Default for PoolSection {
    fn default() -> Self {
        let cfg = PoolConfig::default();
        Self {
            relaunch_delay: cfg.relaunch_delay,
            provision_delay: cfg.provision_delay,
            monitor_interval_ms: cfg.monitor_interval.as_secs_f64() * 1000.0,
            heartbeat_interval_ms: cfg.heartbeat_interval.as_secs_f64() * 1000.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReplicaSpec {
    /// Defaults to the 1-based position in the list.
    #[serde(default)]
    pub id: Option<u64>,
    #[serde(default = "default_provider")]
    pub provider: String,
    pub region: String,
    #[serde(default = "default_kind")]
    pub kind: InstanceKind,
    #[serde(default)]
    pub hourly_cost: f64,
    pub service: LatencyModel,
    /// One-way latency of the link from this replica's parent.
    #[serde(default = "LatencyModel::zero")]
    pub network: LatencyModel,
    /// Parent: a gateway name or `r<id>` of a forwarding replica. The robot
    /// when absent.
    #[serde(default)]
    pub via: Option<String>,
}

fn default_provider() -> String {
    "aws".into()
}

fn default_kind() -> InstanceKind {
    InstanceKind::Spot
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GatewaySpec {
    pub name: String,
    #[serde(default)]
    pub region: String,
    #[serde(default = "LatencyModel::zero")]
    pub network: LatencyModel,
    #[serde(default)]
    pub via: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReplicaTemplate {
    pub service: LatencyModel,
    #[serde(default = "LatencyModel::zero")]
    pub network: LatencyModel,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FaultSpec {
    pub regional_slowdown: Vec<RegionalSlowdown>,
    pub contention: Vec<Contention>,
    pub preemption: Vec<Preemption>,
    /// The replica process dies; its VM stays up as far as the pool knows.
    pub crash: Vec<Crash>,
    pub discovery_outage: Vec<Window>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RegionalSlowdown {
    pub region: String,
    pub added_latency_ms: f64,
    #[serde(default)]
    pub start_ms: f64,
    #[serde(default)]
    pub end_ms: Option<f64>,
}

/// A competing client that sends one job of `service_ms` every `period_ms`
/// to a single replica, which then serves all work first come first served.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Contention {
    pub replica: u64,
    pub period_ms: f64,
    pub service_ms: f64,
    #[serde(default)]
    pub start_ms: f64,
    #[serde(default)]
    pub end_ms: Option<f64>,
}

/// Either a scripted time or a renewal process with exponential gaps.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Preemption {
    pub replica: u64,
    #[serde(default)]
    pub at_ms: Option<f64>,
    #[serde(default)]
    pub mean_interval_ms: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Crash {
    pub replica: u64,
    pub at_ms: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Window {
    pub start_ms: f64,
    pub end_ms: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScaleEvent {
    pub at_ms: f64,
    pub scale: ScaleDirection,
    pub count: usize,
}

impl Scenario {
    pub fn from_toml(text: &str) -> Result<Self, SimError> {
        let s: Scenario = toml::from_str(text).map_err(|e| SimError::Parse(e.to_string()))?;
        s.validate()?;
        Ok(s)
    }

    pub fn load(path: &Path) -> Result<Self, SimError> {
        let text = std::fs::read_to_string(path).map_err(|e| SimError::Io {
            path: path.display().to_string(),
            message: e.to_string(),
        })?;
        Self::from_toml(&text).map_err(|e| match e {
            SimError::Parse(m) => SimError::Parse(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("scenario serializes")
    }

    pub fn service_identity(&self) -> Result<ServiceIdentity, SimError> {
        let fp = match &self.service.fingerprint {
            None => [0u8; 32],
            Some(hex) => ServiceIdentity::from_hex(hex)
                .ok_or_else(|| SimError::Validation(vec![format!(
                    "service.fingerprint: expected 64 hex digits, got {hex:?}"
                )]))?
                .0,
        };
        derive_service_identity(&self.service.name, &fp, self.service.protocol_version)
            .map_err(|e| SimError::Validation(vec![format!("service.name: {e}")]))
    }

    /// Replica ids in list order.
    pub fn replica_ids(&self) -> Vec<ReplicaId> {
        self.replicas
            .iter()
            .enumerate()
            .map(|(i, r)| ReplicaId(r.id.unwrap_or(i as u64 + 1)))
            .collect()
    }

    pub fn placement(spec: &ReplicaSpec) -> Placement {
        Placement::new(&spec.provider, &spec.region, spec.kind, spec.hourly_cost)
    }

    pub fn pool_config(&self) -> PoolConfig {
        PoolConfig {
            desired_replicas: self.replicas.len().max(1),
            placements: self.replicas.iter().map(Self::placement).collect(),
            relaunch_delay: self.pool.relaunch_delay.clone(),
            provision_delay: self.pool.provision_delay.clone(),
            monitor_interval: from_ms(self.pool.monitor_interval_ms),
            heartbeat_interval: from_ms(self.pool.heartbeat_interval_ms),
        }
    }

    pub fn timeout(&self) -> Duration {
        Duration::from_millis(self.workload.timeout_ms)
    }

    /// The deployment tree. Replica endpoints are their initial pool
    /// endpoints; gateways get `sim://gateway/<name>`.
    pub fn topology(&self) -> Result<TopologyNode, SimError> {
        self.validate()?;
        let ids = self.replica_ids();
        let mut children: BTreeMap<Option<String>, Vec<(usize, TopologyNode)>> = BTreeMap::new();
        let key_of = |via: &Option<String>| via.clone();
        for (i, g) in self.gateways.iter().enumerate() {
            let node = TopologyNode::gateway(gateway_tag(i), gateway_endpoint(&g.name).as_str(), vec![]);
            children.entry(key_of(&g.via)).or_default().push((i, node));
        }
        let offset = self.gateways.len();
        for (i, r) in self.replicas.iter().enumerate() {
            let endpoint = initial_endpoint(&Self::placement(r), ids[i]);
            let node = TopologyNode::replica(ids[i].0, endpoint.as_str());
            children.entry(key_of(&r.via)).or_default().push((offset + i, node));
        }
        fn attach(
            name: Option<String>,
            node: TopologyNode,
            children: &mut BTreeMap<Option<String>, Vec<(usize, TopologyNode)>>,
        ) -> TopologyNode {
            let kids = children.remove(&name).unwrap_or_default();
            let mut kids: Vec<_> = kids
                .into_iter()
                .map(|(order, n)| {
                    let key = node_key(&n);
                    (order, attach(Some(key), n, children))
                })
                .collect();
            kids.sort_by_key(|(order, _)| *order);
            node.with_children(kids.into_iter().map(|(_, n)| n).collect())
        }
        let root = attach(None, TopologyNode::robot(vec![]), &mut children);
        root.validate()
            .map_err(|e| SimError::Validation(vec![format!("topology: {e}")]))?;
        Ok(root)
    }

    /// Checks every field and returns all problems at once.
    pub fn validate(&self) -> Result<(), SimError> {
        let mut errs = Vec::new();
        if self.schema_version != SCHEMA_VERSION {
            errs.push(format!(
                "schema_version: unsupported version {} (expected {SCHEMA_VERSION})",
                self.schema_version
            ));
        }
        if self.service.name.is_empty() {
            errs.push("service.name: must not be empty".into());
        }
        if let Some(fp) = &self.service.fingerprint {
            if ServiceIdentity::from_hex(fp).is_none() {
                errs.push(format!("service.fingerprint: expected 64 hex digits, got {fp:?}"));
            }
        }
        let w = &self.workload;
        if w.requests == 0 {
            errs.push("workload.requests: must be positive".into());
        }
        if !(w.inter_arrival_ms.is_finite() && w.inter_arrival_ms >= 0.0) {
            errs.push("workload.inter_arrival_ms: must be finite and non-negative".into());
        }
        if w.timeout_ms == 0 || w.timeout_ms > u32::MAX as u64 {
            errs.push("workload.timeout_ms: must be in 1..=4294967295".into());
        }
        for (field, m) in [
            ("pool.relaunch_delay", &self.pool.relaunch_delay),
            ("pool.provision_delay", &self.pool.provision_delay),
        ] {
            if let Err(e) = m.validate() {
                errs.push(format!("{field}: {e}"));
            }
        }
        if !(self.pool.monitor_interval_ms.is_finite() && self.pool.monitor_interval_ms > 0.0) {
            errs.push("pool.monitor_interval_ms: must be positive".into());
        }
        if !(self.pool.heartbeat_interval_ms.is_finite() && self.pool.heartbeat_interval_ms > 0.0) {
            errs.push("pool.heartbeat_interval_ms: must be positive".into());
        }
        if self.replicas.is_empty() {
            errs.push("replicas: at least one replica is required".into());
        }
        let ids = self.replica_ids();
        let mut seen = BTreeSet::new();
        for (i, (r, id)) in self.replicas.iter().zip(&ids).enumerate() {
            if *id == ReplicaId::LOCAL {
                errs.push(format!("replicas[{i}].id: 0 is reserved"));
            }
            if !seen.insert(*id) {
                errs.push(format!("replicas[{i}].id: duplicate id {}", id.0));
            }
            if !(r.hourly_cost.is_finite() && r.hourly_cost >= 0.0) {
                errs.push(format!("replicas[{i}].hourly_cost: must be non-negative"));
            }
            for (field, m) in [("service", &r.service), ("network", &r.network)] {
                if let Err(e) = m.validate() {
                    errs.push(format!("replicas[{i}].{field}: {e}"));
                }
            }
        }
        let mut names = BTreeSet::new();
        for (i, g) in self.gateways.iter().enumerate() {
            if g.name.is_empty() || g.name.starts_with('r') && g.name[1..].parse::<u64>().is_ok() {
                errs.push(format!("gateways[{i}].name: {:?} is empty or looks like a replica ref", g.name));
            }
            if !names.insert(g.name.clone()) {
                errs.push(format!("gateways[{i}].name: duplicate {:?}", g.name));
            }
            if let Err(e) = g.network.validate() {
                errs.push(format!("gateways[{i}].network: {e}"));
            }
        }
        let known_parent = |via: &str| {
            names.contains(via)
                || via
                    .strip_prefix('r')
                    .and_then(|n| n.parse::<u64>().ok())
                    .is_some_and(|n| seen.contains(&ReplicaId(n)))
        };
        for (i, r) in self.replicas.iter().enumerate() {
            if let Some(via) = &r.via {
                if !known_parent(via) {
                    errs.push(format!("replicas[{i}].via: unknown parent {via:?}"));
                }
            }
        }
        for (i, g) in self.gateways.iter().enumerate() {
            if let Some(via) = &g.via {
                if !known_parent(via) {
                    errs.push(format!("gateways[{i}].via: unknown parent {via:?}"));
                }
            }
        }
        if let Some(t) = &self.scale_template {
            for (field, m) in [("service", &t.service), ("network", &t.network)] {
                if let Err(e) = m.validate() {
                    errs.push(format!("scale_template.{field}: {e}"));
                }
            }
        }
        let known = |id: u64| seen.contains(&ReplicaId(id));
        let window_ok = |start: f64, end: Option<f64>| {
            start.is_finite() && start >= 0.0 && end.is_none_or(|e| e.is_finite() && e > start)
        };
        for (i, f) in self.faults.regional_slowdown.iter().enumerate() {
            if !window_ok(f.start_ms, f.end_ms) {
                errs.push(format!("faults.regional_slowdown[{i}]: window must satisfy 0 <= start < end"));
            }
            if !(f.added_latency_ms.is_finite() && f.added_latency_ms >= 0.0) {
                errs.push(format!("faults.regional_slowdown[{i}].added_latency_ms: must be non-negative"));
            }
        }
        for (i, f) in self.faults.contention.iter().enumerate() {
            if !known(f.replica) {
                errs.push(format!("faults.contention[{i}].replica: unknown replica {}", f.replica));
            }
            if !(f.period_ms.is_finite() && f.period_ms > 0.0) {
                errs.push(format!("faults.contention[{i}].period_ms: must be positive"));
            }
            if !(f.service_ms.is_finite() && f.service_ms >= 0.0) {
                errs.push(format!("faults.contention[{i}].service_ms: must be non-negative"));
            }
            if !window_ok(f.start_ms, f.end_ms) {
                errs.push(format!("faults.contention[{i}]: window must satisfy 0 <= start < end"));
            }
        }
        let mut contended = BTreeSet::new();
        for (i, f) in self.faults.contention.iter().enumerate() {
            if !contended.insert(f.replica) {
                errs.push(format!("faults.contention[{i}].replica: replica {} listed twice", f.replica));
            }
        }
        for (i, f) in self.faults.preemption.iter().enumerate() {
            if !known(f.replica) {
                errs.push(format!("faults.preemption[{i}].replica: unknown replica {}", f.replica));
            }
            match (f.at_ms, f.mean_interval_ms) {
                (Some(t), None) if t.is_finite() && t >= 0.0 => {}
                (None, Some(m)) if m.is_finite() && m > 0.0 => {}
                _ => errs.push(format!(
                    "faults.preemption[{i}]: set exactly one of at_ms (>= 0) or mean_interval_ms (> 0)"
                )),
            }
        }
        for (i, f) in self.faults.crash.iter().enumerate() {
            if !known(f.replica) {
                errs.push(format!("faults.crash[{i}].replica: unknown replica {}", f.replica));
            }
            if !(f.at_ms.is_finite() && f.at_ms >= 0.0) {
                errs.push(format!("faults.crash[{i}].at_ms: must be non-negative"));
            }
        }
        for (i, f) in self.faults.discovery_outage.iter().enumerate() {
            if !window_ok(f.start_ms, Some(f.end_ms)) {
                errs.push(format!("faults.discovery_outage[{i}]: window must satisfy 0 <= start < end"));
            }
        }
        for (i, e) in self.events.iter().enumerate() {
            if !(e.at_ms.is_finite() && e.at_ms >= 0.0) {
                errs.push(format!("events[{i}].at_ms: must be non-negative"));
            }
            if e.count == 0 {
                errs.push(format!("events[{i}].count: must be positive"));
            }
        }
        if errs.is_empty() {
            Ok(())
        } else {
            Err(SimError::Validation(errs))
        }
    }
}

pub(crate) fn gateway_tag(index: usize) -> u64 {
    1_000_000 + index as u64
}

pub(crate) fn gateway_endpoint(name: &str) -> Endpoint {
    Endpoint::new(format!("sim://gateway/{name}"))
}

/// Endpoint the pool assigns to a replica at generation 0.
pub(crate) fn initial_endpoint(p: &Placement, id: ReplicaId) -> Endpoint {
    Endpoint::new(format!("sim://{}/{}/{}/g0", p.provider, p.region, id))
}

/// Name other nodes use in `via` to refer to this node.
fn node_key(node: &TopologyNode) -> String {
    match node.kind {
        crate::proxy::NodeKind::Gateway => node
            .endpoint
            .as_str()
            .trim_start_matches("sim://gateway/")
            .to_string(),
        _ => node.replica_id.to_string(),
    }
}
