//! Replica pool manager.
//!
//! Keeps the desired number of replicas running across placements, relaunches
//! preempted spot replicas at fresh endpoints under the same service identity,
//! and handles scale up/down. Faults come from outside ([`PoolManager::preempt`]);
//! the manager only reacts on [`PoolManager::monitor_tick`].

use std::fmt;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::discovery::Registrar;
use crate::envelope::{Endpoint, ReplicaId, ServiceIdentity};
use crate::latency::{stream_rng, LatencyModel};

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum PoolError {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("unknown replica {0}")]
    UnknownReplica(ReplicaId),
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InstanceKind {
    #[default]
    Spot,
    OnDemand,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReplicaState {
    Provisioning,
    Running,
    Preempted,
    Relaunching,
    /// Removed by scale-down or manual termination. Terminal.
    Retired,
}

impl ReplicaState {
    pub fn as_str(&self) -> &'static str {
        match self {
            ReplicaState::Provisioning => "PROVISIONING",
            ReplicaState::Running => "RUNNING",
            ReplicaState::Preempted => "PREEMPTED",
            ReplicaState::Relaunching => "RELAUNCHING",
            ReplicaState::Retired => "RETIRED",
        }
    }

    fn billable(&self) -> bool {
        matches!(self, ReplicaState::Provisioning | ReplicaState::Running)
    }
}

impl fmt::Display for ReplicaState {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Placement {
    #[serde(default = "default_provider")]
    pub provider: String,
    pub region: String,
    #[serde(default)]
    pub kind: InstanceKind,
    #[serde(default)]
    pub hourly_cost: f64,
}

fn default_provider() -> String {
    "aws".into()
}

impl Placement {
    pub fn new(provider: &str, region: &str, kind: InstanceKind, hourly_cost: f64) -> Self {
        Self {
            provider: provider.into(),
            region: region.into(),
            kind,
            hourly_cost,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReplicaRecord {
    pub replica_id: ReplicaId,
    pub service_id: ServiceIdentity,
    pub provider: String,
    pub region: String,
    pub kind: InstanceKind,
    pub state: ReplicaState,
    pub endpoint: Endpoint,
    pub hourly_cost: f64,
    pub state_since: Duration,
    pub created_at: Duration,
    /// Incremented on every relaunch; part of the endpoint.
    pub generation: u32,
    /// Billable time accumulated in closed intervals.
    billed: Duration,
    ready_at: Option<Duration>,
    registered: bool,
    last_heartbeat: Duration,
}

impl ReplicaRecord {
    pub fn is_active(&self) -> bool {
        self.state != ReplicaState::Retired
    }

    pub fn is_registered(&self) -> bool {
        self.registered
    }

    fn billed_until(&self, now: Duration) -> Duration {
        if self.state.billable() {
            self.billed + now.saturating_sub(self.state_since)
        } else {
            self.billed
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PoolConfig {
    pub desired_replicas: usize,
    pub placements: Vec<Placement>,
    pub relaunch_delay: LatencyModel,
    pub provision_delay: LatencyModel,
    pub monitor_interval: Duration,
    pub heartbeat_interval: Duration,
}

impl Default for PoolConfig {
    /// Two spot replicas in different regions, relaunching after 20 minutes.
    fn default() -> Self {
        Self {
            desired_replicas: 2,
            placements: vec![
                Placement::new("aws", "us-west-1", InstanceKind::Spot, 0.17),
                Placement::new("aws", "us-west-2", InstanceKind::Spot, 0.17),
            ],
            relaunch_delay: LatencyModel::Fixed {
                ms: 20.0 * 60.0 * 1000.0,
            },
            provision_delay: LatencyModel::zero(),
            monitor_interval: Duration::from_secs(1),
            heartbeat_interval: Duration::from_secs(2),
        }
    }
}

impl PoolConfig {
    pub fn validate(&self) -> Result<(), PoolError> {
        if self.desired_replicas < 1 {
            return Err(PoolError::InvalidArgument(
                "desired_replicas must be at least 1".into(),
            ));
        }
        if self.placements.is_empty() {
            return Err(PoolError::InvalidArgument("no placements configured".into()));
        }
        if let Some(p) = self
            .placements
            .iter()
            .find(|p| !(p.hourly_cost.is_finite() && p.hourly_cost >= 0.0))
        {
            return Err(PoolError::InvalidArgument(format!(
                "placement {}/{} has invalid cost {}",
                p.provider, p.region, p.hourly_cost
            )));
        }
        for m in [&self.relaunch_delay, &self.provision_delay] {
            m.validate().map_err(PoolError::InvalidArgument)?;
        }
        if self.monitor_interval.is_zero() {
            return Err(PoolError::InvalidArgument(
                "monitor_interval must be positive".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Change {
    State {
        from: Option<ReplicaState>,
        to: ReplicaState,
    },
    /// Discovery accepted the replica's current endpoint.
    Registered,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LifecycleEvent {
    pub at: Duration,
    pub replica_id: ReplicaId,
    pub change: Change,
    pub endpoint: Endpoint,
}

impl LifecycleEvent {
    /// One log line: `time_ms replica old->new endpoint`.
    pub fn log_line(&self) -> String {
        let t = self.at.as_millis();
        match &self.change {
            Change::State { from, to } => format!(
                "{t} {} {}->{} {}",
                self.replica_id,
                from.map(|s| s.as_str()).unwrap_or("NEW"),
                to,
                self.endpoint
            ),
            Change::Registered => format!(
                "{t} {} REGISTERED {}",
                self.replica_id, self.endpoint
            ),
        }
    }

    /// Parses a line written by [`LifecycleEvent::log_line`].
    pub fn parse_log_line(line: &str) -> Option<LifecycleEvent> {
        let mut parts = line.split_whitespace();
        let at = Duration::from_millis(parts.next()?.parse().ok()?);
        let replica_id = ReplicaId(parts.next()?.strip_prefix('r')?.parse().ok()?);
        let change_raw = parts.next()?;
        let endpoint = Endpoint::new(parts.next()?);
        let change = if change_raw == "REGISTERED" {
            Change::Registered
        } else {
            let (from, to) = change_raw.split_once("->")?;
            Change::State {
                from: if from == "NEW" { None } else { Some(parse_state(from)?) },
                to: parse_state(to)?,
            }
        };
        Some(LifecycleEvent {
            at,
            replica_id,
            change,
            endpoint,
        })
    }
}

fn parse_state(s: &str) -> Option<ReplicaState> {
    Some(match s {
        "PROVISIONING" => ReplicaState::Provisioning,
        "RUNNING" => ReplicaState::Running,
        "PREEMPTED" => ReplicaState::Preempted,
        "RELAUNCHING" => ReplicaState::Relaunching,
        "RETIRED" => ReplicaState::Retired,
        _ => return None,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScaleDirection {
    Up,
    Down,
}

/// Single-writer control loop over the replica set.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct PoolManager {
    service_id: ServiceIdentity,
    config: PoolConfig,
    replicas: Vec<ReplicaRecord>,
    next_replica_id: u64,
    seed: u64,
    draws: u64,
    pending_disconnects: Vec<ReplicaId>,
    log: Vec<LifecycleEvent>,
}

impl PoolManager {
    pub fn new(service_id: ServiceIdentity, config: PoolConfig, seed: u64) -> Result<Self, PoolError> {
        config.validate()?;
        Ok(Self {
            service_id,
            config,
            replicas: Vec::new(),
            next_replica_id: 1,
            seed,
            draws: 0,
            pending_disconnects: Vec::new(),
            log: Vec::new(),
        })
    }

    pub fn service_id(&self) -> ServiceIdentity {
        self.service_id
    }

    pub fn config(&self) -> &PoolConfig {
        &self.config
    }

    pub fn desired_replicas(&self) -> usize {
        self.config.desired_replicas
    }

    pub fn replicas(&self) -> &[ReplicaRecord] {
        &self.replicas
    }

    pub fn replica(&self, id: ReplicaId) -> Option<&ReplicaRecord> {
        self.replicas.iter().find(|r| r.replica_id == id)
    }

    pub fn active(&self) -> impl Iterator<Item = &ReplicaRecord> {
        self.replicas.iter().filter(|r| r.is_active())
    }

    pub fn running_count(&self) -> usize {
        self.replicas
            .iter()
            .filter(|r| r.state == ReplicaState::Running)
            .count()
    }

    /// Every event emitted so far, in order.
    pub fn log(&self) -> &[LifecycleEvent] {
        &self.log
    }

    /// Provisions the initial `desired_replicas`.
    pub fn launch(&mut self, now: Duration) -> Vec<LifecycleEvent> {
        let mut events = Vec::new();
        while self.active().count() < self.config.desired_replicas {
            events.push(self.provision(now));
        }
        events
    }

    /// Provisions replicas with caller-chosen ids and placements, raising the
    /// desired count to cover them.
    pub fn launch_with(
        &mut self,
        now: Duration,
        replicas: Vec<(ReplicaId, Placement)>,
    ) -> Result<Vec<LifecycleEvent>, PoolError> {
        let mut events = Vec::new();
        for (id, placement) in replicas {
            if id == ReplicaId::LOCAL || self.replica(id).is_some() {
                return Err(PoolError::InvalidArgument(format!(
                    "replica id {id} is reserved or already in use"
                )));
            }
            let saved = self.next_replica_id;
            self.next_replica_id = id.0;
            events.push(self.provision_at(now, placement));
            self.next_replica_id = saved.max(id.0 + 1);
        }
        self.config.desired_replicas = self.config.desired_replicas.max(self.active().count());
        Ok(events)
    }

    fn sample_delay(&mut self, model: &LatencyModel) -> Duration {
        let mut rng = stream_rng(self.seed, "pool-delay", self.draws);
        self.draws += 1;
        crate::clock::from_ms(model.sample_ms(&mut rng))
    }

    fn emit(&mut self, event: LifecycleEvent) -> LifecycleEvent {
        self.log.push(event.clone());
        event
    }

    fn placement_for_new(&self) -> Placement {
        // Fill the least-used placement first so replicas spread out.
        let usage = |p: &Placement| {
            self.active()
                .filter(|r| r.provider == p.provider && r.region == p.region && r.kind == p.kind)
                .count()
        };
        self.config
            .placements
            .iter()
            .min_by_key(|p| usage(p))
            .cloned()
            .expect("validated non-empty")
    }

    fn endpoint_for(record: &ReplicaRecord) -> Endpoint {
        Endpoint::new(format!(
            "sim://{}/{}/{}/g{}",
            record.provider, record.region, record.replica_id, record.generation
        ))
    }

    fn provision(&mut self, now: Duration) -> LifecycleEvent {
        let placement = self.placement_for_new();
        self.provision_at(now, placement)
    }

    fn provision_at(&mut self, now: Duration, placement: Placement) -> LifecycleEvent {
        let delay = self.sample_delay(&self.config.provision_delay.clone());
        let replica_id = ReplicaId(self.next_replica_id);
        self.next_replica_id += 1;
        let mut record = ReplicaRecord {
            replica_id,
            service_id: self.service_id,
            provider: placement.provider,
            region: placement.region,
            kind: placement.kind,
            state: ReplicaState::Provisioning,
            endpoint: Endpoint::new(""),
            hourly_cost: placement.hourly_cost,
            state_since: now,
            created_at: now,
            generation: 0,
            billed: Duration::ZERO,
            ready_at: Some(now + delay),
            registered: false,
            last_heartbeat: now,
        };
        record.endpoint = Self::endpoint_for(&record);
        let event = LifecycleEvent {
            at: now,
            replica_id,
            change: Change::State {
                from: None,
                to: ReplicaState::Provisioning,
            },
            endpoint: record.endpoint.clone(),
        };
        self.replicas.push(record);
        self.emit(event)
    }

    fn transition(&mut self, idx: usize, to: ReplicaState, now: Duration) -> LifecycleEvent {
        let r = &mut self.replicas[idx];
        r.billed = r.billed_until(now);
        let from = r.state;
        r.state = to;
        r.state_since = now;
        let event = LifecycleEvent {
            at: now,
            replica_id: r.replica_id,
            change: Change::State {
                from: Some(from),
                to,
            },
            endpoint: r.endpoint.clone(),
        };
        self.emit(event)
    }

    fn index_of(&self, id: ReplicaId) -> Result<usize, PoolError> {
        self.replicas
            .iter()
            .position(|r| r.replica_id == id)
            .ok_or(PoolError::UnknownReplica(id))
    }

    /// Records a provider preemption. Only running or provisioning spot
    /// replicas can be preempted; anything else is ignored.
    pub fn preempt(&mut self, id: ReplicaId, now: Duration) -> Result<Option<LifecycleEvent>, PoolError> {
        let idx = self.index_of(id)?;
        let r = &self.replicas[idx];
        if r.kind != InstanceKind::Spot
            || !matches!(r.state, ReplicaState::Running | ReplicaState::Provisioning)
        {
            return Ok(None);
        }
        self.replicas[idx].registered = false;
        self.replicas[idx].ready_at = None;
        Ok(Some(self.transition(idx, ReplicaState::Preempted, now)))
    }

    /// Manual termination of any replica. The pool replaces it on the next
    /// tick if that leaves it under the desired count.
    pub fn terminate(&mut self, id: ReplicaId, now: Duration) -> Result<Option<LifecycleEvent>, PoolError> {
        let idx = self.index_of(id)?;
        if !self.replicas[idx].is_active() {
            return Ok(None);
        }
        self.replicas[idx].registered = false;
        self.pending_disconnects.push(id);
        Ok(Some(self.transition(idx, ReplicaState::Retired, now)))
    }

    /// Advances every replica's lifecycle to `now` and syncs with discovery.
    ///
    /// Preempted replicas start relaunching; relaunching or provisioning
    /// replicas whose delay has elapsed come up at a new endpoint and are
    /// registered. Registration that fails (discovery unreachable) is retried
    /// on later ticks.
    pub fn monitor_tick(&mut self, now: Duration, registrar: &mut dyn Registrar) -> Vec<LifecycleEvent> {
        let mut events = Vec::new();

        for idx in 0..self.replicas.len() {
            if self.replicas[idx].state == ReplicaState::Preempted {
                let preempted_at = self.replicas[idx].state_since;
                let delay = self.sample_delay(&self.config.relaunch_delay.clone());
                self.replicas[idx].ready_at = Some(preempted_at + delay);
                events.push(self.transition(idx, ReplicaState::Relaunching, now));
            }
        }

        while self.active().count() < self.config.desired_replicas {
            events.push(self.provision(now));
        }

        for idx in 0..self.replicas.len() {
            let r = &self.replicas[idx];
            let due = r.ready_at.is_some_and(|t| t <= now);
            match r.state {
                ReplicaState::Relaunching if due => {
                    let r = &mut self.replicas[idx];
                    r.generation += 1;
                    r.endpoint = Self::endpoint_for(r);
                    r.ready_at = None;
                    r.registered = false;
                    events.push(self.transition(idx, ReplicaState::Running, now));
                }
                ReplicaState::Provisioning if due => {
                    self.replicas[idx].ready_at = None;
                    events.push(self.transition(idx, ReplicaState::Running, now));
                }
                _ => {}
            }
        }

        let heartbeat_every = self.config.heartbeat_interval;
        for idx in 0..self.replicas.len() {
            if self.replicas[idx].state != ReplicaState::Running {
                continue;
            }
            let (rid, endpoint) = {
                let r = &self.replicas[idx];
                (r.replica_id, r.endpoint.clone())
            };
            if self.replicas[idx].registered
                && now.saturating_sub(self.replicas[idx].last_heartbeat) >= heartbeat_every
            {
                match registrar.heartbeat(self.service_id, rid, now) {
                    Ok(true) => self.replicas[idx].last_heartbeat = now,
                    Ok(false) => self.replicas[idx].registered = false,
                    Err(_) => {}
                }
            }
            if !self.replicas[idx].registered
                && registrar
                    .register_peer(self.service_id, endpoint.clone(), rid, now)
                    .is_ok()
            {
                let r = &mut self.replicas[idx];
                r.registered = true;
                r.last_heartbeat = now;
                events.push(self.emit(LifecycleEvent {
                    at: now,
                    replica_id: rid,
                    change: Change::Registered,
                    endpoint,
                }));
            }
        }

        let service_id = self.service_id;
        self.pending_disconnects
            .retain(|id| registrar.report_disconnect(service_id, *id).is_err());

        events
    }

    /// Changes the desired replica count. Scaling up provisions new replicas;
    /// scaling down retires the most expensive active replicas, youngest first
    /// among equals, and reports them to discovery.
    pub fn scale(
        &mut self,
        direction: ScaleDirection,
        count: usize,
        now: Duration,
        registrar: &mut dyn Registrar,
    ) -> Result<usize, PoolError> {
        if count == 0 {
            return Err(PoolError::InvalidArgument("scale count must be positive".into()));
        }
        match direction {
            ScaleDirection::Up => {
                self.config.desired_replicas += count;
                for _ in 0..count {
                    self.provision(now);
                }
            }
            ScaleDirection::Down => {
                if count >= self.config.desired_replicas {
                    return Err(PoolError::InvalidArgument(format!(
                        "cannot scale down by {count}: at least one replica must remain (desired {})",
                        self.config.desired_replicas
                    )));
                }
                self.config.desired_replicas -= count;
                let mut victims: Vec<&ReplicaRecord> = self.active().collect();
                victims.sort_by(|a, b| {
                    b.hourly_cost
                        .total_cmp(&a.hourly_cost)
                        .then(b.created_at.cmp(&a.created_at))
                        .then(b.replica_id.cmp(&a.replica_id))
                });
                let excess = self
                    .active()
                    .count()
                    .saturating_sub(self.config.desired_replicas);
                let ids: Vec<ReplicaId> =
                    victims.iter().take(excess).map(|r| r.replica_id).collect();
                for id in ids {
                    self.terminate(id, now)?;
                }
                let service_id = self.service_id;
                self.pending_disconnects
                    .retain(|id| registrar.report_disconnect(service_id, *id).is_err());
            }
        }
        Ok(self.config.desired_replicas)
    }

    /// Total spend up to `now`: each replica's hourly cost over its
    /// provisioning and running time.
    pub fn accrue_cost(&self, now: Duration) -> f64 {
        self.replicas
            .iter()
            .map(|r| r.hourly_cost * r.billed_until(now).as_secs_f64() / 3600.0)
            .sum()
    }
}
