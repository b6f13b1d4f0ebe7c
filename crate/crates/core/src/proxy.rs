//! Proxy roles: the robot-side fan-out proxy, the service-side adapter and the
//! gateway forwarder.
//!
//! All three are transport-free state machines. They consume frames and return
//! the frames to send; the simulation harness moves those bytes through virtual
//! links and [`crate::net`] moves them over TCP.

use std::collections::HashSet;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;
use std::time::Duration;

use parking_lot::RwLock;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::envelope::{
    Endpoint, Message, ReplicaId, RequestEnvelope, RequestId, RequestIdGenerator,
    ResponseEnvelope, ResponseStatus, ServiceIdentity, WireError, DEFAULT_MAX_FRAME,
};
use crate::registry::{Completion, Registry, RegistryError, ResponseAction};

#[derive(Debug, Error)]
pub enum ProxyError {
    #[error("no live replica link for service {0}")]
    Unavailable(ServiceIdentity),
    #[error(transparent)]
    Wire(#[from] WireError),
    #[error("invalid topology: {0}")]
    InvalidTopology(String),
    #[error(transparent)]
    Registry(#[from] RegistryError),
    #[error("transport error: {0}")]
    Transport(String),
}

pub type LinkId = usize;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum LinkState {
    Connecting,
    Up,
    Down,
}

impl LinkState {
    pub fn as_str(&self) -> &'static str {
        match self {
            LinkState::Connecting => "CONNECTING",
            LinkState::Up => "UP",
            LinkState::Down => "DOWN",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PeerLink {
    pub service_id: ServiceIdentity,
    pub endpoint: Endpoint,
    pub replica_id: ReplicaId,
    pub state: LinkState,
    /// Set when an undecodable frame arrived on this link.
    pub suspect: bool,
}

impl PeerLink {
    pub fn new(service_id: ServiceIdentity, endpoint: Endpoint, replica_id: ReplicaId) -> Self {
        Self {
            service_id,
            endpoint,
            replica_id,
            state: LinkState::Connecting,
            suspect: false,
        }
    }

    pub fn up(mut self) -> Self {
        self.state = LinkState::Up;
        self
    }
}

/// Bytes to be written to one link.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Outbound {
    pub link: LinkId,
    pub bytes: Vec<u8>,
}

/// Declares when a link should be considered dead after heartbeats stop.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct HeartbeatPolicy {
    pub interval: Duration,
    pub misses: u32,
}

impl Default for HeartbeatPolicy {
    fn default() -> Self {
        Self {
            interval: Duration::from_secs(1),
            misses: 3,
        }
    }
}

/// Tracks liveness of one link from observed heartbeats.
#[derive(Clone, Debug)]
pub struct HeartbeatMonitor {
    policy: HeartbeatPolicy,
    last_seen: Duration,
    reset: bool,
}

impl HeartbeatMonitor {
    pub fn new(policy: HeartbeatPolicy, now: Duration) -> Self {
        Self {
            policy,
            last_seen: now,
            reset: false,
        }
    }

    pub fn observe(&mut self, now: Duration) {
        self.last_seen = self.last_seen.max(now);
        self.reset = false;
    }

    /// A connection reset marks the link down immediately.
    pub fn connection_reset(&mut self) {
        self.reset = true;
    }

    pub fn state(&self, now: Duration) -> LinkState {
        let window = self.policy.interval * self.policy.misses;
        if self.reset || now.saturating_sub(self.last_seen) > window {
            LinkState::Down
        } else {
            LinkState::Up
        }
    }
}

#[derive(Debug, Default)]
pub struct ProxyCounters {
    pub requests_sent: AtomicU64,
    pub frames_sent: AtomicU64,
    pub delivered: AtomicU64,
    pub duplicates: AtomicU64,
    pub unknown: AtomicU64,
    pub decode_errors: AtomicU64,
    pub dropped_no_route: AtomicU64,
}

/// What the robot proxy did with an inbound frame.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum RobotInbound {
    Response(RequestId, Completion),
    Heartbeat,
    /// The frame could not be decoded; the link is now suspect.
    Malformed(WireError),
    /// A well-formed frame the robot has no use for.
    Ignored,
}

/// The robot-side proxy: registers each request, fans it out to every UP link
/// for the service and hands only the first response to the caller.
pub struct RobotProxy {
    links: RwLock<Vec<PeerLink>>,
    registry: Arc<Registry>,
    ids: RequestIdGenerator,
    max_frame: usize,
    counters: ProxyCounters,
}

impl RobotProxy {
    pub fn new(client_guid: u64, registry: Arc<Registry>) -> Self {
        Self::with_max_frame(client_guid, registry, DEFAULT_MAX_FRAME)
    }

    pub fn with_max_frame(client_guid: u64, registry: Arc<Registry>, max_frame: usize) -> Self {
        Self {
            links: RwLock::new(Vec::new()),
            registry,
            ids: RequestIdGenerator::new(client_guid),
            max_frame,
            counters: ProxyCounters::default(),
        }
    }

    pub fn registry(&self) -> &Arc<Registry> {
        &self.registry
    }

    pub fn counters(&self) -> &ProxyCounters {
        &self.counters
    }

    pub fn client_guid(&self) -> u64 {
        self.ids.client_guid()
    }

    pub fn add_link(&self, link: PeerLink) -> LinkId {
        let mut links = self.links.write();
        links.push(link);
        links.len() - 1
    }

    pub fn links(&self) -> Vec<PeerLink> {
        self.links.read().clone()
    }

    pub fn link(&self, id: LinkId) -> Option<PeerLink> {
        self.links.read().get(id).cloned()
    }

    pub fn find_link(&self, service_id: ServiceIdentity, replica_id: ReplicaId) -> Option<LinkId> {
        self.links
            .read()
            .iter()
            .position(|l| l.service_id == service_id && l.replica_id == replica_id)
    }

    pub fn set_link_state(&self, id: LinkId, state: LinkState) {
        if let Some(link) = self.links.write().get_mut(id) {
            link.state = state;
        }
    }

    /// Points a link at a replica's new endpoint (after relaunch) and marks it UP.
    pub fn reconnect(&self, id: LinkId, endpoint: Endpoint) {
        if let Some(link) = self.links.write().get_mut(id) {
            link.endpoint = endpoint;
            link.state = LinkState::Up;
            link.suspect = false;
        }
    }

    /// Starts one logical request: registers it and returns one frame per UP
    /// link carrying the same request id. Fails fast when no link is UP; the
    /// refused request still consumes a sequence number.
    pub fn submit(
        &self,
        payload: Vec<u8>,
        service_id: ServiceIdentity,
        timeout: Duration,
        on_response: ResponseAction,
        on_timeout: ResponseAction,
    ) -> Result<(RequestId, Vec<Outbound>), ProxyError> {
        let targets: Vec<LinkId> = self
            .links
            .read()
            .iter()
            .enumerate()
            .filter(|(_, l)| l.service_id == service_id && l.state == LinkState::Up)
            .map(|(i, _)| i)
            .collect();
        let request_id = self.ids.next_id();
        if targets.is_empty() {
            return Err(ProxyError::Unavailable(service_id));
        }
        let deadline_ms = timeout.as_millis().min(u32::MAX as u128) as u32;
        let bytes = Message::Request(RequestEnvelope {
            request_id,
            service_id,
            deadline_ms,
            payload,
        })
        .to_frame(self.max_frame)?;
        let deadline_at = self.registry.now().saturating_add(timeout);
        self.registry
            .register(request_id, deadline_at, on_response, on_timeout)?;
        self.counters.requests_sent.fetch_add(1, Ordering::Relaxed);
        self.counters
            .frames_sent
            .fetch_add(targets.len() as u64, Ordering::Relaxed);
        let out = targets
            .into_iter()
            .map(|link| Outbound {
                link,
                bytes: bytes.clone(),
            })
            .collect();
        Ok((request_id, out))
    }

    pub fn handle_inbound(&self, link: LinkId, frame: &[u8]) -> RobotInbound {
        let mut input = frame;
        let msg = match Message::decode_from(&mut input, self.max_frame) {
            Ok(msg) => msg,
            Err(e) => {
                self.counters.decode_errors.fetch_add(1, Ordering::Relaxed);
                if let Some(l) = self.links.write().get_mut(link) {
                    l.suspect = true;
                }
                return RobotInbound::Malformed(e);
            }
        };
        match msg {
            Message::Response(resp) => {
                let id = resp.request_id;
                let outcome = self.registry.complete(resp);
                let counter = match outcome {
                    Completion::Delivered => &self.counters.delivered,
                    Completion::Duplicate => &self.counters.duplicates,
                    Completion::Unknown => &self.counters.unknown,
                };
                counter.fetch_add(1, Ordering::Relaxed);
                RobotInbound::Response(id, outcome)
            }
            Message::Heartbeat { .. } => RobotInbound::Heartbeat,
            _ => RobotInbound::Ignored,
        }
    }

    pub fn expire(&self, now: Duration) -> Vec<RequestId> {
        self.registry.expire(now)
    }
}

/// Handler type of a local service: request payload in, response payload out.
pub type Handler = Arc<dyn Fn(&[u8]) -> Result<Vec<u8>, String> + Send + Sync>;

/// A stateless service hosted next to a replica proxy.
#[derive(Clone)]
pub struct LocalService {
    pub service_id: ServiceIdentity,
    pub handler: Handler,
}

impl LocalService {
    pub fn new<F>(service_id: ServiceIdentity, handler: F) -> Self
    where
        F: Fn(&[u8]) -> Result<Vec<u8>, String> + Send + Sync + 'static,
    {
        Self {
            service_id,
            handler: Arc::new(handler),
        }
    }

    /// Runs the handler and wraps the outcome in a response envelope.
    pub fn invoke(&self, request: &RequestEnvelope, replica_id: ReplicaId) -> ResponseEnvelope {
        let (status, payload) = if request.service_id != self.service_id {
            (
                ResponseStatus::ServiceError,
                b"service identity mismatch".to_vec(),
            )
        } else {
            match (self.handler)(&request.payload) {
                Ok(payload) => (ResponseStatus::Ok, payload),
                Err(msg) => (ResponseStatus::ServiceError, msg.into_bytes()),
            }
        };
        ResponseEnvelope {
            request_id: request.request_id,
            replica_id,
            status,
            payload,
        }
    }
}

impl std::fmt::Debug for LocalService {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("LocalService")
            .field("service_id", &self.service_id)
            .finish_non_exhaustive()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Direction {
    Downstream,
    Upstream,
}

/// Where an inbound frame entered a service node.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Origin {
    Parent,
    Child(LinkId),
}

/// Frames a service node wants sent.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum NodeOutput {
    /// Response produced by this node's own service.
    Reply(Vec<u8>),
    /// Response from a child, relayed unchanged toward the robot.
    Relay(Vec<u8>),
    /// Request copy for one child.
    Forward { child: LinkId, bytes: Vec<u8> },
}

#[derive(Debug, Default)]
pub struct NodeCounters {
    pub served: AtomicU64,
    pub forwarded: AtomicU64,
    pub relayed: AtomicU64,
    pub decode_errors: AtomicU64,
    pub dropped_no_child: AtomicU64,
}

/// A cloud-side proxy. With a local service it is a replica adapter; with
/// children it also forwards requests downstream (a gateway when it has no
/// service of its own). Gateways never deduplicate.
pub struct ServiceNode {
    replica_id: ReplicaId,
    service: Option<LocalService>,
    children: RwLock<Vec<PeerLink>>,
    max_frame: usize,
    counters: NodeCounters,
}

impl ServiceNode {
    pub fn replica(replica_id: ReplicaId, service: LocalService) -> Self {
        Self::new(replica_id, Some(service))
    }

    pub fn gateway(tag: ReplicaId) -> Self {
        Self::new(tag, None)
    }

    pub fn new(replica_id: ReplicaId, service: Option<LocalService>) -> Self {
        Self {
            replica_id,
            service,
            children: RwLock::new(Vec::new()),
            max_frame: DEFAULT_MAX_FRAME,
            counters: NodeCounters::default(),
        }
    }

    pub fn replica_id(&self) -> ReplicaId {
        self.replica_id
    }

    pub fn is_gateway(&self) -> bool {
        self.service.is_none()
    }

    pub fn counters(&self) -> &NodeCounters {
        &self.counters
    }

    pub fn add_child(&self, link: PeerLink) -> LinkId {
        let mut children = self.children.write();
        children.push(link);
        children.len() - 1
    }

    pub fn children(&self) -> Vec<PeerLink> {
        self.children.read().clone()
    }

    pub fn set_child_state(&self, id: LinkId, state: LinkState) {
        if let Some(link) = self.children.write().get_mut(id) {
            link.state = state;
        }
    }

    pub fn reconnect_child(&self, id: LinkId, endpoint: Endpoint) {
        if let Some(link) = self.children.write().get_mut(id) {
            link.endpoint = endpoint;
            link.state = LinkState::Up;
        }
    }

    /// Processes one inbound frame: requests from the parent are served
    /// locally and/or forwarded to children, responses from children are
    /// relayed upstream.
    pub fn handle_inbound(&self, frame: &[u8], origin: Origin) -> Vec<NodeOutput> {
        let mut input = frame;
        let msg = match Message::decode_from(&mut input, self.max_frame) {
            Ok(m) => m,
            Err(_) => {
                self.counters.decode_errors.fetch_add(1, Ordering::Relaxed);
                if let Origin::Child(id) = origin {
                    if let Some(l) = self.children.write().get_mut(id) {
                        l.suspect = true;
                    }
                }
                return Vec::new();
            }
        };
        match (msg, origin) {
            (Message::Request(req), Origin::Parent) => {
                let mut out = Vec::new();
                if let Some(service) = &self.service {
                    let resp = service.invoke(&req, self.replica_id);
                    self.counters.served.fetch_add(1, Ordering::Relaxed);
                    match Message::Response(resp).to_frame(self.max_frame) {
                        Ok(bytes) => out.push(NodeOutput::Reply(bytes)),
                        Err(_) => {
                            let resp = ResponseEnvelope {
                                request_id: req.request_id,
                                replica_id: self.replica_id,
                                status: ResponseStatus::ServiceError,
                                payload: b"response too large".to_vec(),
                            };
                            if let Ok(bytes) = Message::Response(resp).to_frame(self.max_frame) {
                                out.push(NodeOutput::Reply(bytes));
                            }
                        }
                    }
                }
                if !self.children.read().is_empty() {
                    out.extend(self.gateway_forward(frame, Direction::Downstream));
                }
                out
            }
            (Message::Response(_), Origin::Child(_)) => {
                self.gateway_forward(frame, Direction::Upstream)
            }
            (Message::Heartbeat { .. }, Origin::Parent) => {
                let hb = Message::Heartbeat {
                    service_id: self
                        .service
                        .as_ref()
                        .map(|s| s.service_id)
                        .unwrap_or(ServiceIdentity([0; 32])),
                    replica_id: self.replica_id,
                };
                hb.to_frame(self.max_frame)
                    .map(|b| vec![NodeOutput::Reply(b)])
                    .unwrap_or_default()
            }
            _ => Vec::new(),
        }
    }

    /// Downstream: one copy of the frame per UP child. Upstream: the frame
    /// unchanged for the parent. Drops (and counts) requests with no UP child.
    pub fn gateway_forward(&self, frame: &[u8], direction: Direction) -> Vec<NodeOutput> {
        match direction {
            Direction::Downstream => {
                let out: Vec<NodeOutput> = self
                    .children
                    .read()
                    .iter()
                    .enumerate()
                    .filter(|(_, l)| l.state == LinkState::Up)
                    .map(|(child, _)| NodeOutput::Forward {
                        child,
                        bytes: frame.to_vec(),
                    })
                    .collect();
                if out.is_empty() {
                    self.counters
                        .dropped_no_child
                        .fetch_add(1, Ordering::Relaxed);
                } else {
                    self.counters
                        .forwarded
                        .fetch_add(out.len() as u64, Ordering::Relaxed);
                }
                out
            }
            Direction::Upstream => {
                self.counters.relayed.fetch_add(1, Ordering::Relaxed);
                vec![NodeOutput::Relay(frame.to_vec())]
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NodeKind {
    Robot,
    Gateway,
    Replica,
}

/// Deployment tree rooted at the robot.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TopologyNode {
    pub kind: NodeKind,
    pub endpoint: Endpoint,
    #[serde(default)]
    pub replica_id: ReplicaId,
    #[serde(default)]
    pub children: Vec<TopologyNode>,
}

impl TopologyNode {
    pub fn robot(children: Vec<TopologyNode>) -> Self {
        Self {
            kind: NodeKind::Robot,
            endpoint: Endpoint::new("robot"),
            replica_id: ReplicaId::LOCAL,
            children,
        }
    }

    pub fn replica(replica_id: u64, endpoint: &str) -> Self {
        Self {
            kind: NodeKind::Replica,
            endpoint: Endpoint::new(endpoint),
            replica_id: ReplicaId(replica_id),
            children: Vec::new(),
        }
    }

    pub fn gateway(tag: u64, endpoint: &str, children: Vec<TopologyNode>) -> Self {
        Self {
            kind: NodeKind::Gateway,
            endpoint: Endpoint::new(endpoint),
            replica_id: ReplicaId(tag),
            children,
        }
    }

    pub fn with_children(mut self, children: Vec<TopologyNode>) -> Self {
        self.children = children;
        self
    }

    /// All nodes in depth-first pre-order, paired with their parent index.
    pub fn walk(&self) -> Vec<(Option<usize>, &TopologyNode)> {
        fn go<'a>(
            node: &'a TopologyNode,
            parent: Option<usize>,
            out: &mut Vec<(Option<usize>, &'a TopologyNode)>,
        ) {
            let me = out.len();
            out.push((parent, node));
            for c in &node.children {
                go(c, Some(me), out);
            }
        }
        let mut out = Vec::new();
        go(self, None, &mut out);
        out
    }

    /// Checks the tree shape: a single robot at the root, every leaf a
    /// replica, and no endpoint appearing twice (a repeat is a cycle or a
    /// shared subtree).
    pub fn validate(&self) -> Result<(), ProxyError> {
        if self.kind != NodeKind::Robot {
            return Err(ProxyError::InvalidTopology("root must be the robot".into()));
        }
        let mut seen = HashSet::new();
        for (parent, node) in self.walk() {
            if parent.is_some() && node.kind == NodeKind::Robot {
                return Err(ProxyError::InvalidTopology(format!(
                    "second robot node at {}",
                    node.endpoint
                )));
            }
            if parent.is_some() && node.children.is_empty() && node.kind != NodeKind::Replica {
                return Err(ProxyError::InvalidTopology(format!(
                    "leaf {} is not a replica",
                    node.endpoint
                )));
            }
            if !seen.insert(&node.endpoint) {
                return Err(ProxyError::InvalidTopology(format!(
                    "endpoint {} appears more than once (cycle or shared subtree)",
                    node.endpoint
                )));
            }
        }
        if self.children.is_empty() {
            return Err(ProxyError::InvalidTopology("robot has no peers".into()));
        }
        Ok(())
    }
}

/// The robot's direct-dial peer set: one UP link per child of the root.
/// Gateways appear as a single link; their subtrees are reached through
/// [`forwarding_links`].
pub fn flatten_topology(
    root: &TopologyNode,
    service_id: ServiceIdentity,
) -> Result<Vec<PeerLink>, ProxyError> {
    root.validate()?;
    Ok(root
        .children
        .iter()
        .map(|c| PeerLink::new(service_id, c.endpoint.clone(), c.replica_id).up())
        .collect())
}

/// Child links held by every non-robot node that forwards, keyed by the
/// forwarding node's endpoint.
pub fn forwarding_links(
    root: &TopologyNode,
    service_id: ServiceIdentity,
) -> Result<Vec<(Endpoint, Vec<PeerLink>)>, ProxyError> {
    root.validate()?;
    Ok(root
        .walk()
        .into_iter()
        .filter(|(parent, node)| parent.is_some() && !node.children.is_empty())
        .map(|(_, node)| {
            let links = node
                .children
                .iter()
                .map(|c| PeerLink::new(service_id, c.endpoint.clone(), c.replica_id).up())
                .collect();
            (node.endpoint.clone(), links)
        })
        .collect())
}
