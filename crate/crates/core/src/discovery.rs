//! Metadata server: maps a service identity to the live endpoints of its
//! replicas. It only brokers connectivity; request and response frames are
//! refused outright so no application data can ever pass through it.

use std::collections::BTreeMap;
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::Arc;
use std::time::Duration;

use parking_lot::RwLock;
use thiserror::Error;

use crate::envelope::{
    AckStatus, Endpoint, Message, MsgType, ReplicaId, ServiceIdentity, DEFAULT_MAX_FRAME,
};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct DiscoveryConfig {
    pub heartbeat_interval: Duration,
    pub expiry: Duration,
}

impl Default for DiscoveryConfig {
    fn default() -> Self {
        Self {
            heartbeat_interval: Duration::from_secs(2),
            expiry: Duration::from_secs(10),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PeerRecord {
    pub service_id: ServiceIdentity,
    pub endpoint: Endpoint,
    pub replica_id: ReplicaId,
    pub registered_at: Duration,
    pub last_heartbeat: Duration,
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum DiscoveryError {
    #[error("discovery server unreachable")]
    Unreachable,
    #[error("protocol error: {0}")]
    Protocol(String),
}

/// The directory itself. Writers are serialised; readers run concurrently.
#[derive(Debug, Default)]
pub struct Directory {
    records: RwLock<BTreeMap<ServiceIdentity, Vec<PeerRecord>>>,
    config: DiscoveryConfig,
}

impl Directory {
    pub fn new(config: DiscoveryConfig) -> Self {
        Self {
            records: RwLock::new(BTreeMap::new()),
            config,
        }
    }

    pub fn config(&self) -> DiscoveryConfig {
        self.config
    }

    /// Stores or refreshes a record. A replica re-registering from a new
    /// endpoint replaces its old one.
    pub fn register_peer(
        &self,
        service_id: ServiceIdentity,
        endpoint: Endpoint,
        replica_id: ReplicaId,
        now: Duration,
    ) {
        let mut records = self.records.write();
        let list = records.entry(service_id).or_default();
        match list.iter_mut().find(|r| r.replica_id == replica_id) {
            Some(rec) => {
                if rec.endpoint != endpoint {
                    rec.endpoint = endpoint;
                    rec.registered_at = now;
                }
                rec.last_heartbeat = now;
            }
            None => list.push(PeerRecord {
                service_id,
                endpoint,
                replica_id,
                registered_at: now,
                last_heartbeat: now,
            }),
        }
    }

    /// Refreshes liveness. Returns false when the replica is not known or has
    /// already gone stale, in which case the caller should register again.
    pub fn heartbeat(&self, service_id: ServiceIdentity, replica_id: ReplicaId, now: Duration) -> bool {
        let mut records = self.records.write();
        let Some(list) = records.get_mut(&service_id) else {
            return false;
        };
        let Some(idx) = list.iter().position(|r| r.replica_id == replica_id) else {
            return false;
        };
        if self.is_stale(&list[idx], now) {
            list.remove(idx);
            if list.is_empty() {
                records.remove(&service_id);
            }
            return false;
        }
        let rec = &mut list[idx];
        rec.last_heartbeat = rec.last_heartbeat.max(now);
        true
    }

    /// Live peers of a service, ordered by replica id.
    pub fn lookup(&self, service_id: ServiceIdentity, now: Duration) -> Vec<(Endpoint, ReplicaId)> {
        let records = self.records.read();
        let mut out: Vec<(Endpoint, ReplicaId)> = records
            .get(&service_id)
            .map(|l| {
                l.iter()
                    .filter(|r| !self.is_stale(r, now))
                    .map(|r| (r.endpoint.clone(), r.replica_id))
                    .collect()
            })
            .unwrap_or_default();
        out.sort_by_key(|(_, id)| *id);
        out
    }

    /// Removes a record if present. Idempotent.
    pub fn report_disconnect(&self, service_id: ServiceIdentity, replica_id: ReplicaId) -> bool {
        let mut records = self.records.write();
        let Some(list) = records.get_mut(&service_id) else {
            return false;
        };
        let before = list.len();
        list.retain(|r| r.replica_id != replica_id);
        let removed = list.len() != before;
        if list.is_empty() {
            records.remove(&service_id);
        }
        removed
    }

    /// Drops every record whose last heartbeat is older than the expiry window.
    pub fn evict_stale(&self, now: Duration) -> Vec<(ServiceIdentity, ReplicaId)> {
        let mut evicted = Vec::new();
        let mut records = self.records.write();
        for (sid, list) in records.iter_mut() {
            list.retain(|r| {
                let stale = self.is_stale(r, now);
                if stale {
                    evicted.push((*sid, r.replica_id));
                }
                !stale
            });
        }
        records.retain(|_, l| !l.is_empty());
        evicted
    }

    pub fn records(&self) -> Vec<PeerRecord> {
        self.records.read().values().flatten().cloned().collect()
    }

    pub fn clear(&self) {
        self.records.write().clear();
    }

    fn is_stale(&self, r: &PeerRecord, now: Duration) -> bool {
        now.saturating_sub(r.last_heartbeat) > self.config.expiry
    }
}

/// What the server does with one inbound frame.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum ServerReply {
    Send(Vec<u8>),
    /// Close the connection without replying.
    Reject(String),
}

/// Frame-level front end of the directory.
#[derive(Debug, Default)]
pub struct DiscoveryServer {
    directory: Arc<Directory>,
    rejected_data_frames: AtomicU64,
    protocol_errors: AtomicU64,
}

impl DiscoveryServer {
    pub fn new(directory: Arc<Directory>) -> Self {
        Self {
            directory,
            rejected_data_frames: AtomicU64::new(0),
            protocol_errors: AtomicU64::new(0),
        }
    }

    pub fn directory(&self) -> &Arc<Directory> {
        &self.directory
    }

    pub fn rejected_data_frames(&self) -> u64 {
        self.rejected_data_frames.load(Ordering::Relaxed)
    }

    pub fn protocol_errors(&self) -> u64 {
        self.protocol_errors.load(Ordering::Relaxed)
    }

    pub fn handle_frame(&self, bytes: &[u8], now: Duration) -> ServerReply {
        let mut input = bytes;
        let frame = match crate::envelope::decode_frame_limited(&mut input, DEFAULT_MAX_FRAME) {
            Ok(f) => f,
            Err(e) => {
                self.protocol_errors.fetch_add(1, Ordering::Relaxed);
                return ServerReply::Reject(e.to_string());
            }
        };
        if matches!(frame.msg_type, MsgType::Request | MsgType::Response) {
            self.rejected_data_frames.fetch_add(1, Ordering::Relaxed);
            return ServerReply::Reject("data-path frames are not accepted".into());
        }
        let msg = match Message::decode(&frame) {
            Ok(m) => m,
            Err(_) => {
                self.protocol_errors.fetch_add(1, Ordering::Relaxed);
                return ack(frame.msg_type, AckStatus::ProtocolError);
            }
        };
        match msg {
            Message::Register {
                service_id,
                replica_id,
                endpoint,
            } => {
                self.directory
                    .register_peer(service_id, endpoint, replica_id, now);
                ack(MsgType::Register, AckStatus::Ok)
            }
            Message::Heartbeat {
                service_id,
                replica_id,
            } => {
                let known = self.directory.heartbeat(service_id, replica_id, now);
                ack(
                    MsgType::Heartbeat,
                    if known { AckStatus::Ok } else { AckStatus::Rejected },
                )
            }
            Message::PeerQuery { service_id } => {
                let peers = self.directory.lookup(service_id, now);
                match (Message::PeerList { service_id, peers }).to_frame(DEFAULT_MAX_FRAME) {
                    Ok(b) => ServerReply::Send(b),
                    Err(e) => ServerReply::Reject(e.to_string()),
                }
            }
            Message::DisconnectReport {
                service_id,
                replica_id,
            } => {
                self.directory.report_disconnect(service_id, replica_id);
                ack(MsgType::DisconnectReport, AckStatus::Ok)
            }
            other => {
                self.protocol_errors.fetch_add(1, Ordering::Relaxed);
                ack(other.msg_type(), AckStatus::ProtocolError)
            }
        }
    }
}

fn ack(msg_type: MsgType, status: AckStatus) -> ServerReply {
    match (Message::Ack { msg_type, status }).to_frame(DEFAULT_MAX_FRAME) {
        Ok(b) => ServerReply::Send(b),
        Err(e) => ServerReply::Reject(e.to_string()),
    }
}

/// Control-plane operations the pool manager and proxies need from discovery.
pub trait Registrar {
    fn register_peer(
        &mut self,
        service_id: ServiceIdentity,
        endpoint: Endpoint,
        replica_id: ReplicaId,
        now: Duration,
    ) -> Result<(), DiscoveryError>;

    /// `Ok(false)` means the server does not know the replica.
    fn heartbeat(
        &mut self,
        service_id: ServiceIdentity,
        replica_id: ReplicaId,
        now: Duration,
    ) -> Result<bool, DiscoveryError>;

    fn report_disconnect(
        &mut self,
        service_id: ServiceIdentity,
        replica_id: ReplicaId,
    ) -> Result<(), DiscoveryError>;

    fn lookup(
        &mut self,
        service_id: ServiceIdentity,
        now: Duration,
    ) -> Result<Vec<(Endpoint, ReplicaId)>, DiscoveryError>;
}

/// In-process discovery that can be killed and restarted. A kill loses the
/// directory contents, as a crashed server would; peers re-register on their
/// next heartbeat.
#[derive(Debug, Clone)]
pub struct LocalDiscovery {
    server: Arc<DiscoveryServer>,
    online: Arc<AtomicBool>,
}

impl LocalDiscovery {
    pub fn new(config: DiscoveryConfig) -> Self {
        Self {
            server: Arc::new(DiscoveryServer::new(Arc::new(Directory::new(config)))),
            online: Arc::new(AtomicBool::new(true)),
        }
    }

    pub fn server(&self) -> &Arc<DiscoveryServer> {
        &self.server
    }

    pub fn directory(&self) -> &Arc<Directory> {
        self.server.directory()
    }

    pub fn is_online(&self) -> bool {
        self.online.load(Ordering::SeqCst)
    }

    pub fn kill(&self) {
        self.online.store(false, Ordering::SeqCst);
        self.server.directory().clear();
    }

    pub fn restart(&self) {
        self.online.store(true, Ordering::SeqCst);
    }

    /// Sends one frame through the server, as a remote peer would.
    fn round_trip(&self, msg: Message, now: Duration) -> Result<Message, DiscoveryError> {
        if !self.is_online() {
            return Err(DiscoveryError::Unreachable);
        }
        let bytes = msg
            .to_frame(DEFAULT_MAX_FRAME)
            .map_err(|e| DiscoveryError::Protocol(e.to_string()))?;
        match self.server.handle_frame(&bytes, now) {
            ServerReply::Send(reply) => {
                let mut input: &[u8] = &reply;
                Message::decode_from(&mut input, DEFAULT_MAX_FRAME)
                    .map_err(|e| DiscoveryError::Protocol(e.to_string()))
            }
            ServerReply::Reject(reason) => Err(DiscoveryError::Protocol(reason)),
        }
    }
}

impl Default for LocalDiscovery {
    fn default() -> Self {
        Self::new(DiscoveryConfig::default())
    }
}

fn expect_ack(reply: Message, want: MsgType) -> Result<AckStatus, DiscoveryError> {
    match reply {
        Message::Ack { msg_type, status } if msg_type == want => Ok(status),
        other => Err(DiscoveryError::Protocol(format!("unexpected reply {other:?}"))),
    }
}

impl Registrar for LocalDiscovery {
    fn register_peer(
        &mut self,
        service_id: ServiceIdentity,
        endpoint: Endpoint,
        replica_id: ReplicaId,
        now: Duration,
    ) -> Result<(), DiscoveryError> {
        let reply = self.round_trip(
            Message::Register {
                service_id,
                replica_id,
                endpoint,
            },
            now,
        )?;
        match expect_ack(reply, MsgType::Register)? {
            AckStatus::Ok => Ok(()),
            s => Err(DiscoveryError::Protocol(format!("register refused: {s:?}"))),
        }
    }

    fn heartbeat(
        &mut self,
        service_id: ServiceIdentity,
        replica_id: ReplicaId,
        now: Duration,
    ) -> Result<bool, DiscoveryError> {
        let reply = self.round_trip(
            Message::Heartbeat {
                service_id,
                replica_id,
            },
            now,
        )?;
        Ok(expect_ack(reply, MsgType::Heartbeat)? == AckStatus::Ok)
    }

    fn report_disconnect(
        &mut self,
        service_id: ServiceIdentity,
        replica_id: ReplicaId,
    ) -> Result<(), DiscoveryError> {
        let reply = self.round_trip(
            Message::DisconnectReport {
                service_id,
                replica_id,
            },
            Duration::ZERO,
        )?;
        expect_ack(reply, MsgType::DisconnectReport).map(|_| ())
    }

    fn lookup(
        &mut self,
        service_id: ServiceIdentity,
        now: Duration,
    ) -> Result<Vec<(Endpoint, ReplicaId)>, DiscoveryError> {
        match self.round_trip(Message::PeerQuery { service_id }, now)? {
            Message::PeerList { peers, .. } => Ok(peers),
            other => Err(DiscoveryError::Protocol(format!("unexpected reply {other:?}"))),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::envelope::{derive_service_identity, RequestEnvelope, RequestId};

    fn sid(name: &str) -> ServiceIdentity {
        derive_service_identity(name, &[0; 32], 1).unwrap()
    }

    fn secs(s: u64) -> Duration {
        Duration::from_secs(s)
    }

    #[test]
    fn register_and_lookup() {
        let dir = Directory::default();
        dir.register_peer(sid("a"), Endpoint::new("e1"), ReplicaId(1), secs(0));
        assert_eq!(
            dir.lookup(sid("a"), secs(1)),
            vec![(Endpoint::new("e1"), ReplicaId(1))]
        );
        assert!(dir.lookup(sid("unknown"), secs(1)).is_empty());
    }

    #[test]
    fn re_register_replaces_endpoint() {
        let dir = Directory::default();
        dir.register_peer(sid("a"), Endpoint::new("e1"), ReplicaId(1), secs(0));
        dir.register_peer(sid("a"), Endpoint::new("e2"), ReplicaId(1), secs(5));
        assert_eq!(
            dir.lookup(sid("a"), secs(5)),
            vec![(Endpoint::new("e2"), ReplicaId(1))]
        );
    }

    #[test]
    fn siblings_are_independent() {
        let dir = Directory::default();
        dir.register_peer(sid("a"), Endpoint::new("e1"), ReplicaId(1), secs(0));
        dir.register_peer(sid("a"), Endpoint::new("e2"), ReplicaId(2), secs(0));
        assert_eq!(dir.lookup(sid("a"), secs(0)).len(), 2);
        assert!(dir.report_disconnect(sid("a"), ReplicaId(1)));
        assert!(!dir.report_disconnect(sid("a"), ReplicaId(1)));
        assert_eq!(
            dir.lookup(sid("a"), secs(0)),
            vec![(Endpoint::new("e2"), ReplicaId(2))]
        );
    }

    #[test]
    fn heartbeat_expiry() {
        let dir = Directory::default();
        dir.register_peer(sid("a"), Endpoint::new("e1"), ReplicaId(1), secs(0));
        dir.register_peer(sid("a"), Endpoint::new("e2"), ReplicaId(2), secs(0));
        assert!(dir.heartbeat(sid("a"), ReplicaId(2), secs(8)));
        assert_eq!(dir.lookup(sid("a"), secs(10)).len(), 2);
        // Replica 1 last heard at 0: gone once more than 10 s elapsed.
        assert_eq!(
            dir.lookup(sid("a"), Duration::from_millis(10_001)),
            vec![(Endpoint::new("e2"), ReplicaId(2))]
        );
        assert_eq!(
            dir.evict_stale(secs(11)),
            vec![(sid("a"), ReplicaId(1))]
        );
        assert_eq!(dir.records().len(), 1);
        assert!(!dir.heartbeat(sid("a"), ReplicaId(1), secs(11)));
    }

    #[test]
    fn server_refuses_data_frames() {
        let server = DiscoveryServer::new(Arc::new(Directory::default()));
        let req = Message::Request(RequestEnvelope {
            request_id: RequestId::new(1, 1),
            service_id: sid("a"),
            deadline_ms: 0,
            payload: b"secret".to_vec(),
        })
        .to_frame(DEFAULT_MAX_FRAME)
        .unwrap();
        assert!(matches!(
            server.handle_frame(&req, secs(0)),
            ServerReply::Reject(_)
        ));
        assert_eq!(server.rejected_data_frames(), 1);
    }

    #[test]
    fn malformed_register_gets_protocol_error_ack() {
        let server = DiscoveryServer::new(Arc::new(Directory::default()));
        let frame = crate::envelope::encode_frame(MsgType::Register, &[1, 2, 3]).unwrap();
        let ServerReply::Send(reply) = server.handle_frame(&frame, secs(0)) else {
            panic!()
        };
        let mut input: &[u8] = &reply;
        assert_eq!(
            Message::decode_from(&mut input, DEFAULT_MAX_FRAME).unwrap(),
            Message::Ack {
                msg_type: MsgType::Register,
                status: AckStatus::ProtocolError
            }
        );
    }

    #[test]
    fn local_discovery_kill_and_restart() {
        let mut disc = LocalDiscovery::default();
        disc.register_peer(sid("a"), Endpoint::new("e1"), ReplicaId(1), secs(0))
            .unwrap();
        assert_eq!(disc.lookup(sid("a"), secs(0)).unwrap().len(), 1);
        disc.kill();
        assert_eq!(
            disc.register_peer(sid("a"), Endpoint::new("e2"), ReplicaId(2), secs(1)),
            Err(DiscoveryError::Unreachable)
        );
        disc.restart();
        assert!(disc.lookup(sid("a"), secs(2)).unwrap().is_empty());
        assert!(!disc.heartbeat(sid("a"), ReplicaId(1), secs(2)).unwrap());
        disc.register_peer(sid("a"), Endpoint::new("e2"), ReplicaId(2), secs(2))
            .unwrap();
        assert_eq!(
            disc.lookup(sid("a"), secs(2)).unwrap(),
            vec![(Endpoint::new("e2"), ReplicaId(2))]
        );
        disc.report_disconnect(sid("a"), ReplicaId(2)).unwrap();
        disc.report_disconnect(sid("a"), ReplicaId(2)).unwrap();
        assert!(disc.lookup(sid("a"), secs(2)).unwrap().is_empty());
    }
}
