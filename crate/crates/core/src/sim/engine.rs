//! The virtual-time event loop.

use std::cmp::Ordering;
use std::collections::{BTreeMap, BTreeSet, BinaryHeap, HashMap};
use std::sync::Arc;
use std::time::Duration;

use parking_lot::Mutex;
use rand::RngCore;

use crate::clock::{from_ms, ManualClock};
use crate::discovery::{DiscoveryConfig, DiscoveryError, LocalDiscovery, Registrar};
use crate::envelope::{
    decode_frame, Endpoint, MsgType, ReplicaId, RequestId, ResponseEnvelope, ResponseStatus,
    ServiceIdentity,
};
use crate::latency::{stream_rng, LatencyModel, LatencySampler};
use crate::pool::{Change, LifecycleEvent, PoolManager, ReplicaState, ScaleDirection};
use crate::proxy::{
    LinkId, LinkState, LocalService, NodeKind, NodeOutput, Origin, PeerLink, ProxyError,
    RobotProxy, ServiceNode,
};
use crate::registry::Registry;

use super::report::{Hop, RequestRecord, RequestStatus, RunCounters, RunReport, Summary};
use super::scenario::{gateway_tag, Scenario};
use super::{streams, SimError};

/// A single work-conserving server that serves jobs in arrival order,
/// optionally shared with a periodic competing client.
#[derive(Clone, Debug)]
pub struct FifoServer {
    busy_until: Duration,
    next_competing: Option<Duration>,
    period: Duration,
    work: Duration,
    end: Option<Duration>,
}

impl FifoServer {
    pub fn idle() -> Self {
        Self {
            busy_until: Duration::ZERO,
            next_competing: None,
            period: Duration::ZERO,
            work: Duration::ZERO,
            end: None,
        }
    }

    /// A competitor submits `work` at `start`, `start + period`, ... until
    /// `end` (exclusive).
    pub fn with_competitor(
        period: Duration,
        work: Duration,
        start: Duration,
        end: Option<Duration>,
    ) -> Self {
        assert!(!period.is_zero(), "competitor period must be positive");
        Self {
            busy_until: Duration::ZERO,
            next_competing: Some(start),
            period,
            work,
            end,
        }
    }

    /// Queues a job arriving at `arrival` and returns its completion time.
    /// A competing job arriving at the same instant is served first.
    pub fn admit(&mut self, arrival: Duration, work: Duration) -> Duration {
        self.absorb_competitor(arrival);
        let finish = arrival.max(self.busy_until) + work;
        self.busy_until = finish;
        finish
    }

    fn absorb_competitor(&mut self, upto: Duration) {
        while let Some(t) = self.next_competing {
            if t > upto {
                break;
            }
            if self.end.is_some_and(|e| t >= e) {
                self.next_competing = None;
                break;
            }
            self.busy_until = self.busy_until.max(t) + self.work;
            self.next_competing = Some(t + self.period);
        }
    }

    /// Fresh machine at `now`: queued work is lost, the competitor keeps its
    /// schedule.
    pub fn restart(&mut self, now: Duration) {
        self.busy_until = now;
        while let Some(t) = self.next_competing {
            if t >= now {
                break;
            }
            self.next_competing = Some(t + self.period);
        }
    }
}

enum Event {
    Submit(u64),
    ToNode {
        node: usize,
        origin: Origin,
        bytes: Vec<u8>,
        generation: u32,
    },
    ToRobot {
        link: LinkId,
        bytes: Vec<u8>,
    },
    ServiceDone {
        node: usize,
        bytes: Vec<u8>,
        generation: u32,
    },
    Expire,
    Tick,
    Preempt(ReplicaId),
    Crash(ReplicaId),
    DiscoveryDown,
    DiscoveryUp,
    Scale(ScaleDirection, usize),
}

struct Scheduled {
    at: Duration,
    seq: u64,
    event: Event,
}

impl PartialEq for Scheduled {
    fn eq(&self, other: &Self) -> bool {
        (self.at, self.seq) == (other.at, other.seq)
    }
}

impl Eq for Scheduled {}

impl PartialOrd for Scheduled {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Scheduled {
    // Reversed: BinaryHeap is a max-heap and we want the earliest, then the
    // first inserted.
    fn cmp(&self, other: &Self) -> Ordering {
        (other.at, other.seq).cmp(&(self.at, self.seq))
    }
}

struct Node {
    label: String,
    region: String,
    /// `None` means the robot.
    parent: Option<usize>,
    link_at_parent: LinkId,
    proxy: ServiceNode,
    children: Vec<usize>,
    net_out: LatencySampler,
    net_back: LatencySampler,
    service: Option<LatencySampler>,
    server: Option<FifoServer>,
    alive: bool,
    generation: u32,
}

/// Registrar seen by the pool: a crashed replica process cannot register or
/// heartbeat even though its VM is still up.
struct SimRegistrar<'a> {
    discovery: &'a mut LocalDiscovery,
    crashed: &'a BTreeSet<ReplicaId>,
}

impl Registrar for SimRegistrar<'_> {
    fn register_peer(
        &mut self,
        service_id: ServiceIdentity,
        endpoint: Endpoint,
        replica_id: ReplicaId,
        now: Duration,
    ) -> Result<(), DiscoveryError> {
        if self.crashed.contains(&replica_id) {
            return Err(DiscoveryError::Unreachable);
        }
        self.discovery
            .register_peer(service_id, endpoint, replica_id, now)
    }

    fn heartbeat(
        &mut self,
        service_id: ServiceIdentity,
        replica_id: ReplicaId,
        now: Duration,
    ) -> Result<bool, DiscoveryError> {
        if self.crashed.contains(&replica_id) {
            return Err(DiscoveryError::Unreachable);
        }
        self.discovery.heartbeat(service_id, replica_id, now)
    }

    fn report_disconnect(
        &mut self,
        service_id: ServiceIdentity,
        replica_id: ReplicaId,
    ) -> Result<(), DiscoveryError> {
        self.discovery.report_disconnect(service_id, replica_id)
    }

    fn lookup(
        &mut self,
        service_id: ServiceIdentity,
        now: Duration,
    ) -> Result<Vec<(Endpoint, ReplicaId)>, DiscoveryError> {
        self.discovery.lookup(service_id, now)
    }
}

struct Slowdown {
    region: String,
    added: Duration,
    start: Duration,
    end: Option<Duration>,
}

type Outcomes = Arc<Mutex<Vec<(Duration, ResponseEnvelope)>>>;

struct Sim<'a> {
    scenario: &'a Scenario,
    sid: ServiceIdentity,
    clock: ManualClock,
    robot: RobotProxy,
    nodes: Vec<Node>,
    by_replica: BTreeMap<ReplicaId, usize>,
    pool: PoolManager,
    discovery: LocalDiscovery,
    crashed: BTreeSet<ReplicaId>,
    heap: BinaryHeap<Scheduled>,
    seq: u64,
    now: Duration,
    horizon: Duration,
    submitted: Vec<(RequestId, Duration)>,
    unavailable: BTreeSet<usize>,
    outcomes: Outcomes,
    counters: RunCounters,
    trace: Option<Vec<Hop>>,
    slowdowns: Vec<Slowdown>,
}

fn echo_service(sid: ServiceIdentity) -> LocalService {
    LocalService::new(sid, |payload: &[u8]| {
        Ok(payload.iter().rev().copied().collect())
    })
}

fn payload_for(index: u64, len: usize) -> Vec<u8> {
    let mut p = index.to_be_bytes().to_vec();
    p.resize(len.max(8), 0x5a);
    p
}

/// Runs a scenario to completion in virtual time.
pub fn run_scenario(scenario: &Scenario) -> Result<RunReport, SimError> {
    scenario.validate()?;
    let mut sim = Sim::build(scenario)?;
    sim.run();
    Ok(sim.finish())
}

impl<'a> Sim<'a> {
    fn build(scenario: &'a Scenario) -> Result<Self, SimError> {
        let sid = scenario.service_identity()?;
        let seed = scenario.seed;
        let topology = scenario.topology()?;
        let clock = ManualClock::new();
        let registry = Arc::new(Registry::new(Arc::new(clock.clone())));
        let guid = stream_rng(seed, streams::CLIENT, 0).next_u64();
        let robot = RobotProxy::new(guid, registry);

        let pool_cfg = scenario.pool_config();
        let mut pool = PoolManager::new(sid, pool_cfg, seed)
            .map_err(|e| SimError::Validation(vec![format!("pool: {e}")]))?;
        let ids = scenario.replica_ids();
        pool.launch_with(
            Duration::ZERO,
            ids.iter()
                .zip(&scenario.replicas)
                .map(|(id, r)| (*id, Scenario::placement(r)))
                .collect(),
        )
        .map_err(|e| SimError::Validation(vec![format!("replicas: {e}")]))?;

        let w = &scenario.workload;
        let last_submit = from_ms(w.inter_arrival_ms * (w.requests - 1) as f64);
        let horizon = last_submit + scenario.timeout() + from_ms(scenario.pool.monitor_interval_ms);

        let mut sim = Sim {
            scenario,
            sid,
            clock,
            robot,
            nodes: Vec::new(),
            by_replica: BTreeMap::new(),
            pool,
            discovery: LocalDiscovery::new(DiscoveryConfig::default()),
            crashed: BTreeSet::new(),
            heap: BinaryHeap::new(),
            seq: 0,
            now: Duration::ZERO,
            horizon,
            submitted: Vec::with_capacity(w.requests as usize),
            unavailable: BTreeSet::new(),
            outcomes: Arc::new(Mutex::new(Vec::new())),
            counters: RunCounters::default(),
            trace: scenario.trace.then(Vec::new),
            slowdowns: scenario
                .faults
                .regional_slowdown
                .iter()
                .map(|f| Slowdown {
                    region: f.region.clone(),
                    added: from_ms(f.added_latency_ms),
                    start: from_ms(f.start_ms),
                    end: f.end_ms.map(from_ms),
                })
                .collect(),
        };

        let walk = topology.walk();
        for (parent_walk, tnode) in walk.iter().skip(1) {
            let parent = parent_walk.and_then(|p| p.checked_sub(1));
            let (label, region, service, network, is_replica) = match tnode.kind {
                NodeKind::Replica => {
                    let i = ids
                        .iter()
                        .position(|id| *id == tnode.replica_id)
                        .expect("topology built from the replica list");
                    let r = &scenario.replicas[i];
                    (
                        tnode.replica_id.to_string(),
                        r.region.clone(),
                        Some(r.service.clone()),
                        r.network.clone(),
                        true,
                    )
                }
                _ => {
                    let g = scenario
                        .gateways
                        .iter()
                        .enumerate()
                        .find(|(i, _)| ReplicaId(gateway_tag(*i)) == tnode.replica_id)
                        .map(|(_, g)| g)
                        .expect("topology built from the gateway list");
                    (g.name.clone(), g.region.clone(), None, g.network.clone(), false)
                }
            };
            sim.add_node(
                label,
                region,
                tnode.replica_id,
                is_replica,
                parent,
                tnode.endpoint.clone(),
                service,
                network,
                LinkState::Up,
            );
        }
        Ok(sim)
    }

    #[allow(clippy::too_many_arguments)]
    fn add_node(
        &mut self,
        label: String,
        region: String,
        replica_id: ReplicaId,
        is_replica: bool,
        parent: Option<usize>,
        endpoint: Endpoint,
        service: Option<LatencyModel>,
        network: LatencyModel,
        link_state: LinkState,
    ) -> usize {
        let seed = self.scenario.seed;
        let idx = self.nodes.len();
        let mut link = PeerLink::new(self.sid, endpoint, replica_id);
        link.state = link_state;
        let link_at_parent = match parent {
            None => self.robot.add_link(link),
            Some(p) => {
                self.nodes[p].children.push(idx);
                self.nodes[p].proxy.add_child(link)
            }
        };
        let proxy = if is_replica {
            ServiceNode::replica(replica_id, echo_service(self.sid))
        } else {
            ServiceNode::gateway(replica_id)
        };
        // Only contended replicas queue; the rest serve requests in parallel.
        let server = self
            .scenario
            .faults
            .contention
            .iter()
            .find(|c| is_replica && ReplicaId(c.replica) == replica_id)
            .map(|c| {
                FifoServer::with_competitor(
                    from_ms(c.period_ms),
                    from_ms(c.service_ms),
                    from_ms(c.start_ms),
                    c.end_ms.map(from_ms),
                )
            });
        self.nodes.push(Node {
            label,
            region,
            parent,
            link_at_parent,
            proxy,
            children: Vec::new(),
            net_out: LatencySampler::keyed(network.clone(), seed, streams::NET_OUT, replica_id.0),
            net_back: LatencySampler::keyed(network, seed, streams::NET_BACK, replica_id.0),
            service: service
                .map(|m| LatencySampler::keyed(m, seed, streams::SERVICE, replica_id.0)),
            server,
            alive: link_state == LinkState::Up,
            generation: 0,
        });
        if is_replica {
            self.by_replica.insert(replica_id, idx);
        }
        idx
    }

    fn schedule(&mut self, at: Duration, event: Event) {
        self.seq += 1;
        self.heap.push(Scheduled {
            at,
            seq: self.seq,
            event,
        });
    }

    fn run(&mut self) {
        let s = self.scenario;
        let events = self.tick_pool();
        self.apply(events);

        self.schedule(Duration::ZERO, Event::Submit(0));
        self.schedule(from_ms(s.pool.monitor_interval_ms), Event::Tick);
        for p in &s.faults.preemption {
            let rid = ReplicaId(p.replica);
            if let Some(at) = p.at_ms {
                self.schedule(from_ms(at), Event::Preempt(rid));
            } else if let Some(mean_ms) = p.mean_interval_ms {
                let mut gaps = LatencySampler::keyed(
                    LatencyModel::Exponential { mean_ms },
                    s.seed,
                    streams::PREEMPT,
                    p.replica,
                );
                let mut t = Duration::ZERO;
                loop {
                    t += gaps.sample();
                    if t > self.horizon {
                        break;
                    }
                    self.schedule(t, Event::Preempt(rid));
                }
            }
        }
        for c in &s.faults.crash {
            self.schedule(from_ms(c.at_ms), Event::Crash(ReplicaId(c.replica)));
        }
        for o in &s.faults.discovery_outage {
            self.schedule(from_ms(o.start_ms), Event::DiscoveryDown);
            self.schedule(from_ms(o.end_ms), Event::DiscoveryUp);
        }
        for e in &s.events {
            self.schedule(from_ms(e.at_ms), Event::Scale(e.scale, e.count));
        }

        while let Some(Scheduled { at, event, .. }) = self.heap.pop() {
            self.now = at;
            self.clock.set(at);
            self.handle(event);
        }
    }

    fn handle(&mut self, event: Event) {
        match event {
            Event::Submit(i) => self.submit(i),
            Event::ToNode {
                node,
                origin,
                bytes,
                generation,
            } => self.node_inbound(node, origin, bytes, generation),
            Event::ToRobot { link, bytes } => {
                self.robot.handle_inbound(link, &bytes);
            }
            Event::ServiceDone {
                node,
                bytes,
                generation,
            } => {
                let n = &self.nodes[node];
                if n.alive && n.generation == generation {
                    self.send_up(node, bytes);
                } else {
                    self.counters.dropped_in_flight += 1;
                }
            }
            Event::Expire => {
                self.robot.expire(self.now);
            }
            Event::Tick => {
                let events = self.tick_pool();
                self.apply(events);
                let next = self.now + from_ms(self.scenario.pool.monitor_interval_ms);
                if next <= self.horizon {
                    self.schedule(next, Event::Tick);
                }
            }
            Event::Preempt(rid) => {
                if let Ok(Some(_)) = self.pool.preempt(rid, self.now) {
                    self.fail(rid, true);
                }
            }
            Event::Crash(rid) => {
                self.crashed.insert(rid);
                self.fail(rid, true);
            }
            Event::DiscoveryDown => self.discovery.kill(),
            Event::DiscoveryUp => self.discovery.restart(),
            Event::Scale(direction, count) => {
                let mut reg = SimRegistrar {
                    discovery: &mut self.discovery,
                    crashed: &self.crashed,
                };
                let _ = self.pool.scale(direction, count, self.now, &mut reg);
                self.sync_nodes();
                let retired: Vec<ReplicaId> = self
                    .pool
                    .replicas()
                    .iter()
                    .filter(|r| r.state == ReplicaState::Retired)
                    .map(|r| r.replica_id)
                    .collect();
                for rid in retired {
                    self.fail(rid, false);
                }
            }
        }
    }

    fn tick_pool(&mut self) -> Vec<LifecycleEvent> {
        let mut reg = SimRegistrar {
            discovery: &mut self.discovery,
            crashed: &self.crashed,
        };
        self.pool.monitor_tick(self.now, &mut reg)
    }

    fn submit(&mut self, i: u64) {
        let w = &self.scenario.workload;
        if i + 1 < w.requests {
            let next = from_ms(w.inter_arrival_ms * (i + 1) as f64);
            self.schedule(next, Event::Submit(i + 1));
        }
        let payload = payload_for(i, w.payload_bytes);
        let sink = self.outcomes.clone();
        let clock = self.clock.clone();
        let on_response = Box::new(move |resp: ResponseEnvelope| {
            use crate::clock::Clock;
            sink.lock().push((clock.now(), resp));
        });
        let sink = self.outcomes.clone();
        let clock = self.clock.clone();
        let on_timeout = Box::new(move |resp: ResponseEnvelope| {
            use crate::clock::Clock;
            sink.lock().push((clock.now(), resp));
        });
        let timeout = self.scenario.timeout();
        match self
            .robot
            .submit(payload, self.sid, timeout, on_response, on_timeout)
        {
            Ok((id, outbound)) => {
                self.submitted.push((id, self.now));
                self.schedule(self.now + timeout, Event::Expire);
                let links: Vec<(usize, Vec<u8>)> = outbound
                    .into_iter()
                    .map(|o| (self.robot_link_node(o.link), o.bytes))
                    .collect();
                for (node, bytes) in links {
                    self.send_down(None, node, bytes);
                }
            }
            Err(ProxyError::Unavailable(_)) => {
                let id = RequestId::new(self.robot.client_guid(), i + 1);
                self.unavailable.insert(self.submitted.len());
                self.submitted.push((id, self.now));
            }
            Err(e) => panic!("simulated submit failed: {e}"),
        }
    }

    fn robot_link_node(&self, link: LinkId) -> usize {
        self.nodes
            .iter()
            .position(|n| n.parent.is_none() && n.link_at_parent == link)
            .expect("every robot link belongs to a node")
    }

    fn slowdown(&self, region: &str) -> Duration {
        self.slowdowns
            .iter()
            .filter(|s| {
                s.region == region && s.start <= self.now && s.end.is_none_or(|e| self.now < e)
            })
            .map(|s| s.added)
            .sum()
    }

    fn record_hop(&mut self, from: String, to: String, arrive_at: Duration, bytes: &[u8]) {
        self.counters.frames_sent += 1;
        if let Some(trace) = &mut self.trace {
            let mut input = bytes;
            let msg_type = decode_frame(&mut input)
                .map(|f| f.msg_type)
                .unwrap_or(MsgType::Request);
            trace.push(Hop {
                sent_at: self.now,
                arrive_at,
                from,
                to,
                msg_type,
                bytes: bytes.to_vec(),
            });
        }
    }

    fn send_down(&mut self, from: Option<usize>, target: usize, bytes: Vec<u8>) {
        let region = self.nodes[target].region.clone();
        let delay = self.nodes[target].net_out.sample() + self.slowdown(&region);
        let at = self.now + delay;
        let from_label = from
            .map(|f| self.nodes[f].label.clone())
            .unwrap_or_else(|| "robot".into());
        let to_label = self.nodes[target].label.clone();
        self.record_hop(from_label, to_label, at, &bytes);
        let generation = self.nodes[target].generation;
        self.schedule(
            at,
            Event::ToNode {
                node: target,
                origin: Origin::Parent,
                bytes,
                generation,
            },
        );
    }

    fn send_up(&mut self, from: usize, bytes: Vec<u8>) {
        let delay = self.nodes[from].net_back.sample();
        let at = self.now + delay;
        let (parent, link) = (self.nodes[from].parent, self.nodes[from].link_at_parent);
        let to_label = parent
            .map(|p| self.nodes[p].label.clone())
            .unwrap_or_else(|| "robot".into());
        self.record_hop(self.nodes[from].label.clone(), to_label, at, &bytes);
        match parent {
            None => self.schedule(at, Event::ToRobot { link, bytes }),
            Some(p) => {
                let generation = self.nodes[p].generation;
                self.schedule(
                    at,
                    Event::ToNode {
                        node: p,
                        origin: Origin::Child(link),
                        bytes,
                        generation,
                    },
                )
            }
        }
    }

    fn node_inbound(&mut self, idx: usize, origin: Origin, bytes: Vec<u8>, generation: u32) {
        let node = &self.nodes[idx];
        if !node.alive || node.generation != generation {
            self.counters.dropped_in_flight += 1;
            return;
        }
        let outputs = node.proxy.handle_inbound(&bytes, origin);
        for out in outputs {
            match out {
                NodeOutput::Reply(reply) => {
                    let node = &mut self.nodes[idx];
                    let work = node
                        .service
                        .as_mut()
                        .map(|s| s.sample())
                        .unwrap_or_default();
                    let done = match &mut node.server {
                        Some(server) => server.admit(self.now, work),
                        None => self.now + work,
                    };
                    let generation = node.generation;
                    self.schedule(
                        done,
                        Event::ServiceDone {
                            node: idx,
                            bytes: reply,
                            generation,
                        },
                    );
                }
                NodeOutput::Forward { child, bytes } => {
                    let target = self.nodes[idx].children[child];
                    self.send_down(Some(idx), target, bytes);
                }
                NodeOutput::Relay(bytes) => self.send_up(idx, bytes),
            }
        }
    }

    fn set_parent_link(&self, idx: usize, state: LinkState, endpoint: Option<Endpoint>) {
        let node = &self.nodes[idx];
        match (node.parent, endpoint) {
            (None, Some(ep)) => self.robot.reconnect(node.link_at_parent, ep),
            (None, None) => self.robot.set_link_state(node.link_at_parent, state),
            (Some(p), Some(ep)) => self.nodes[p].proxy.reconnect_child(node.link_at_parent, ep),
            (Some(p), None) => self.nodes[p]
                .proxy
                .set_child_state(node.link_at_parent, state),
        }
    }

    fn current_endpoint(&self, idx: usize) -> Option<PeerLink> {
        let node = &self.nodes[idx];
        match node.parent {
            None => self.robot.link(node.link_at_parent),
            Some(p) => self.nodes[p].proxy.children().get(node.link_at_parent).cloned(),
        }
    }

    /// The replica's process is gone: its link resets and the parent tells
    /// discovery.
    fn fail(&mut self, rid: ReplicaId, report: bool) {
        let Some(&idx) = self.by_replica.get(&rid) else {
            return;
        };
        if self.nodes[idx].alive {
            let node = &mut self.nodes[idx];
            node.alive = false;
            node.generation += 1;
            self.set_parent_link(idx, LinkState::Down, None);
        }
        if report {
            let _ = self.discovery.report_disconnect(self.sid, rid);
        }
    }

    fn revive(&mut self, rid: ReplicaId) {
        self.crashed.remove(&rid);
        if let Some(&idx) = self.by_replica.get(&rid) {
            let now = self.now;
            let node = &mut self.nodes[idx];
            node.alive = true;
            if let Some(server) = &mut node.server {
                server.restart(now);
            }
        }
    }

    /// Pool push: the parent of a newly registered replica looks it up and
    /// reconnects if the endpoint is new or the link is not UP.
    fn notify_registered(&mut self, rid: ReplicaId) {
        let Some(&idx) = self.by_replica.get(&rid) else {
            return;
        };
        let Ok(peers) = self.discovery.lookup(self.sid, self.now) else {
            return;
        };
        let Some((endpoint, _)) = peers.into_iter().find(|(_, r)| *r == rid) else {
            return;
        };
        let current = self.current_endpoint(idx);
        if current.is_some_and(|l| l.endpoint == endpoint && l.state == LinkState::Up) {
            return;
        }
        self.set_parent_link(idx, LinkState::Up, Some(endpoint));
    }

    /// Creates nodes for replicas the pool added (scale-up or refill).
    fn sync_nodes(&mut self) {
        let fresh: Vec<(ReplicaId, String, Endpoint)> = self
            .pool
            .replicas()
            .iter()
            .filter(|r| !self.by_replica.contains_key(&r.replica_id))
            .map(|r| (r.replica_id, r.region.clone(), r.endpoint.clone()))
            .collect();
        for (rid, region, endpoint) in fresh {
            let (service, network) = match &self.scenario.scale_template {
                Some(t) => (t.service.clone(), t.network.clone()),
                None => {
                    let first = &self.scenario.replicas[0];
                    (first.service.clone(), first.network.clone())
                }
            };
            self.add_node(
                rid.to_string(),
                region,
                rid,
                true,
                None,
                endpoint,
                Some(service),
                network,
                LinkState::Connecting,
            );
        }
    }

    fn apply(&mut self, events: Vec<LifecycleEvent>) {
        self.sync_nodes();
        for e in events {
            match e.change {
                Change::State {
                    to: ReplicaState::Running,
                    ..
                } => self.revive(e.replica_id),
                Change::State {
                    to: ReplicaState::Retired,
                    ..
                } => self.fail(e.replica_id, false),
                Change::Registered => self.notify_registered(e.replica_id),
                Change::State { .. } => {}
            }
        }
    }

    fn finish(self) -> RunReport {
        let index: HashMap<RequestId, usize> = self
            .submitted
            .iter()
            .enumerate()
            .map(|(i, (id, _))| (*id, i))
            .collect();
        let mut records: Vec<RequestRecord> = self
            .submitted
            .iter()
            .enumerate()
            .map(|(i, (id, submit))| RequestRecord {
                request_id: *id,
                submit: *submit,
                deliver: None,
                winner: None,
                status: if self.unavailable.contains(&i) {
                    RequestStatus::Unavailable
                } else {
                    RequestStatus::Timeout
                },
            })
            .collect();
        for (at, resp) in self.outcomes.lock().iter() {
            let Some(&i) = index.get(&resp.request_id) else {
                continue;
            };
            let rec = &mut records[i];
            rec.deliver = Some(*at);
            match resp.status {
                ResponseStatus::TimeoutSynthetic => rec.status = RequestStatus::Timeout,
                s => {
                    rec.winner = Some(resp.replica_id);
                    rec.status = if s == ResponseStatus::Ok {
                        RequestStatus::Ok
                    } else {
                        RequestStatus::ServiceError
                    };
                }
            }
        }
        let cost = self.pool.accrue_cost(self.horizon);
        let summary = Summary::from_records(&records, cost);
        let rc = self.robot.counters();
        use std::sync::atomic::Ordering::Relaxed;
        let mut counters = self.counters;
        counters.duplicates = rc.duplicates.load(Relaxed);
        counters.unknown = rc.unknown.load(Relaxed);
        counters.dropped_no_child = self
            .nodes
            .iter()
            .map(|n| n.proxy.counters().dropped_no_child.load(Relaxed))
            .sum();
        RunReport {
            scenario: self.scenario.name.clone(),
            seed: self.scenario.seed,
            records,
            summary,
            lifecycle: self.pool.log().to_vec(),
            counters,
            trace: self.trace.unwrap_or_default(),
        }
    }
}
