//! Message identities and the framed wire format.
//!
//! Every message travels inside a [`Frame`]:
//!
//! ```text
//!  0      1      2         3          4                8
//!  +------+------+---------+----------+----------------+-----------------+
//!  | 0xF6 | 0x2F | version | msg_type | body_len (BE)  | body ...        |
//!  +------+------+---------+----------+----------------+-----------------+
//! ```
//!
//! Body layouts for each message type are described in `docs/WIRE_FORMAT.md`.

use std::fmt;
use std::io::Read;
use std::sync::atomic::{AtomicU64, Ordering};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

pub const MAGIC: [u8; 2] = [0xF6, 0x2F];
pub const WIRE_VERSION: u8 = 0x01;
pub const HEADER_LEN: usize = 8;
/// Default ceiling on a frame body (16 MiB).
pub const DEFAULT_MAX_FRAME: usize = 16 * 1024 * 1024;

/// Errors raised by the codec and by identity derivation.
#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum WireError {
    #[error("frame body of {len} bytes exceeds the limit of {max} bytes")]
    FrameTooLarge { len: usize, max: usize },
    #[error("protocol error: {0}")]
    Protocol(String),
    #[error("unsupported wire version {0:#04x}")]
    VersionMismatch(u8),
    /// The input ended inside a frame; retry once more bytes have arrived.
    #[error("need {needed} more bytes")]
    NeedMoreBytes { needed: usize },
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
}

impl WireError {
    /// True for errors that only mean "wait for more input".
    pub fn is_resumable(&self) -> bool {
        matches!(self, WireError::NeedMoreBytes { .. })
    }
}

/// Deterministic 256-bit identifier shared by every replica of one logical service.
#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct ServiceIdentity(pub [u8; 32]);

impl ServiceIdentity {
    pub fn as_bytes(&self) -> &[u8; 32] {
        &self.0
    }

    pub fn to_hex(&self) -> String {
        self.0.iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn from_hex(s: &str) -> Option<Self> {
        if s.len() != 64 || !s.is_ascii() {
            return None;
        }
        let mut out = [0u8; 32];
        for (i, chunk) in s.as_bytes().chunks(2).enumerate() {
            let pair = std::str::from_utf8(chunk).ok()?;
            out[i] = u8::from_str_radix(pair, 16).ok()?;
        }
        Some(Self(out))
    }
}

impl fmt::Debug for ServiceIdentity {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "ServiceIdentity({}…)", &self.to_hex()[..12])
    }
}

impl fmt::Display for ServiceIdentity {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.to_hex())
    }
}

/// Derives the identity of a service from its name, credential fingerprint
/// and protocol version.
///
/// The hash input is each field as a 4-byte big-endian length followed by
/// the field bytes: the UTF-8 name, the 32-byte fingerprint, then the
/// version as a 4-byte big-endian integer. Relaunched replicas recompute the
/// same value, which is what lets them rejoin without reconfiguration.
pub fn derive_service_identity(
    service_name: &str,
    credential_fingerprint: &[u8; 32],
    protocol_version: u32,
) -> Result<ServiceIdentity, WireError> {
    if service_name.is_empty() {
        return Err(WireError::InvalidArgument(
            "service name must not be empty".into(),
        ));
    }
    let mut hasher = Sha256::new();
    let version = protocol_version.to_be_bytes();
    for field in [
        service_name.as_bytes(),
        credential_fingerprint.as_slice(),
        version.as_slice(),
    ] {
        hasher.update((field.len() as u32).to_be_bytes());
        hasher.update(field);
    }
    Ok(ServiceIdentity(hasher.finalize().into()))
}

/// Identity of one logical request: a per-proxy random GUID plus a counter.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct RequestId {
    pub client_guid: u64,
    pub sequence: u64,
}

impl RequestId {
    pub fn new(client_guid: u64, sequence: u64) -> Self {
        Self {
            client_guid,
            sequence,
        }
    }
}

impl fmt::Display for RequestId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:016x}:{}", self.client_guid, self.sequence)
    }
}

/// Hands out request ids for one proxy instance. Safe to share across threads.
#[derive(Debug)]
pub struct RequestIdGenerator {
    client_guid: u64,
    next: AtomicU64,
}

impl RequestIdGenerator {
    pub fn new(client_guid: u64) -> Self {
        Self {
            client_guid,
            next: AtomicU64::new(1),
        }
    }

    /// Generator with a GUID drawn from the thread RNG.
    pub fn random() -> Self {
        Self::new(rand::random())
    }

    pub fn client_guid(&self) -> u64 {
        self.client_guid
    }

    pub fn next_id(&self) -> RequestId {
        let sequence = self.next.fetch_add(1, Ordering::Relaxed);
        RequestId::new(self.client_guid, sequence)
    }
}

/// Tag identifying one replica of a service. `ReplicaId(0)` is reserved for
/// responses fabricated locally by the robot proxy.
#[derive(
    Clone, Copy, Debug, Default, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize,
)]
pub struct ReplicaId(pub u64);

impl ReplicaId {
    pub const LOCAL: ReplicaId = ReplicaId(0);
}

impl fmt::Display for ReplicaId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "r{}", self.0)
    }
}

/// Network address of a proxy: `host:port` for TCP, `sim://...` in simulation.
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Endpoint(pub String);

impl Endpoint {
    pub fn new(s: impl Into<String>) -> Self {
        Self(s.into())
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl fmt::Display for Endpoint {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[repr(u8)]
pub enum MsgType {
    Request = 1,
    Response = 2,
    Heartbeat = 3,
    Register = 4,
    PeerList = 5,
    DisconnectReport = 6,
}

impl MsgType {
    pub fn from_u8(v: u8) -> Option<Self> {
        Some(match v {
            1 => MsgType::Request,
            2 => MsgType::Response,
            3 => MsgType::Heartbeat,
            4 => MsgType::Register,
            5 => MsgType::PeerList,
            6 => MsgType::DisconnectReport,
            _ => return None,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Frame {
    pub msg_type: MsgType,
    pub body: Vec<u8>,
}

/// Encodes one frame. The body must fit in the 4-byte length field.
pub fn encode_frame(msg_type: MsgType, body: &[u8]) -> Result<Vec<u8>, WireError> {
    if body.len() > u32::MAX as usize {
        return Err(WireError::FrameTooLarge {
            len: body.len(),
            max: u32::MAX as usize,
        });
    }
    let mut out = Vec::with_capacity(HEADER_LEN + body.len());
    out.extend_from_slice(&MAGIC);
    out.push(WIRE_VERSION);
    out.push(msg_type as u8);
    out.extend_from_slice(&(body.len() as u32).to_be_bytes());
    out.extend_from_slice(body);
    Ok(out)
}

/// Decodes one frame from the front of `input`, advancing it past the frame.
///
/// On any error `input` is left untouched, so a [`WireError::NeedMoreBytes`]
/// can be retried after appending data.
pub fn decode_frame(input: &mut &[u8]) -> Result<Frame, WireError> {
    decode_frame_limited(input, u32::MAX as usize)
}

/// [`decode_frame`] with a ceiling on the announced body length.
pub fn decode_frame_limited(input: &mut &[u8], max_body: usize) -> Result<Frame, WireError> {
    let buf = *input;
    for (i, want) in MAGIC.iter().enumerate() {
        match buf.get(i) {
            Some(b) if b == want => {}
            Some(b) => return Err(WireError::Protocol(format!("bad magic byte {b:#04x}"))),
            None => {
                return Err(WireError::NeedMoreBytes {
                    needed: HEADER_LEN - buf.len(),
                })
            }
        }
    }
    if buf.len() < HEADER_LEN {
        // Report a bad version as early as possible.
        if let Some(&v) = buf.get(2) {
            if v != WIRE_VERSION {
                return Err(WireError::VersionMismatch(v));
            }
        }
        return Err(WireError::NeedMoreBytes {
            needed: HEADER_LEN - buf.len(),
        });
    }
    if buf[2] != WIRE_VERSION {
        return Err(WireError::VersionMismatch(buf[2]));
    }
    let msg_type = MsgType::from_u8(buf[3])
        .ok_or_else(|| WireError::Protocol(format!("unknown msg_type {}", buf[3])))?;
    let body_len = u32::from_be_bytes([buf[4], buf[5], buf[6], buf[7]]) as usize;
    if body_len > max_body {
        return Err(WireError::FrameTooLarge {
            len: body_len,
            max: max_body,
        });
    }
    let total = HEADER_LEN + body_len;
    if buf.len() < total {
        return Err(WireError::NeedMoreBytes {
            needed: total - buf.len(),
        });
    }
    let frame = Frame {
        msg_type,
        body: buf[HEADER_LEN..total].to_vec(),
    };
    *input = &buf[total..];
    Ok(frame)
}

/// Reads exactly one frame from a blocking reader.
pub fn read_frame<R: Read>(reader: &mut R, max_body: usize) -> std::io::Result<Frame> {
    let mut header = [0u8; HEADER_LEN];
    reader.read_exact(&mut header)?;
    let mut slice: &[u8] = &header;
    let body_len = match decode_frame_limited(&mut slice, max_body) {
        Ok(frame) => return Ok(frame),
        Err(WireError::NeedMoreBytes { needed }) => needed,
        Err(e) => return Err(std::io::Error::new(std::io::ErrorKind::InvalidData, e)),
    };
    let mut full = header.to_vec();
    full.resize(HEADER_LEN + body_len, 0);
    reader.read_exact(&mut full[HEADER_LEN..])?;
    let mut slice: &[u8] = &full;
    decode_frame_limited(&mut slice, max_body)
        .map_err(|e| std::io::Error::new(std::io::ErrorKind::InvalidData, e))
}

/// Incremental decoder for byte streams that arrive in arbitrary chunks.
#[derive(Debug)]
pub struct FrameDecoder {
    buf: Vec<u8>,
    max_body: usize,
}

impl FrameDecoder {
    pub fn new(max_body: usize) -> Self {
        Self {
            buf: Vec::new(),
            max_body,
        }
    }

    pub fn push(&mut self, bytes: &[u8]) {
        self.buf.extend_from_slice(bytes);
    }

    pub fn buffered(&self) -> usize {
        self.buf.len()
    }

    /// Next complete frame, `Ok(None)` if more bytes are needed.
    pub fn next_frame(&mut self) -> Result<Option<Frame>, WireError> {
        let mut slice: &[u8] = &self.buf;
        match decode_frame_limited(&mut slice, self.max_body) {
            Ok(frame) => {
                let consumed = self.buf.len() - slice.len();
                self.buf.drain(..consumed);
                Ok(Some(frame))
            }
            Err(e) if e.is_resumable() => Ok(None),
            Err(e) => Err(e),
        }
    }
}

impl Default for FrameDecoder {
    fn default() -> Self {
        Self::new(DEFAULT_MAX_FRAME)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ResponseStatus {
    Ok,
    ServiceError,
    /// Fabricated by the robot proxy when a request times out. Never encoded.
    TimeoutSynthetic,
}

impl ResponseStatus {
    pub fn as_str(&self) -> &'static str {
        match self {
            ResponseStatus::Ok => "ok",
            ResponseStatus::ServiceError => "service_error",
            ResponseStatus::TimeoutSynthetic => "timeout",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RequestEnvelope {
    pub request_id: RequestId,
    pub service_id: ServiceIdentity,
    /// Relative to send time; 0 means no deadline.
    pub deadline_ms: u32,
    pub payload: Vec<u8>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ResponseEnvelope {
    pub request_id: RequestId,
    pub replica_id: ReplicaId,
    pub status: ResponseStatus,
    pub payload: Vec<u8>,
}

impl ResponseEnvelope {
    /// The empty response handed to the caller when a request times out.
    pub fn timeout(request_id: RequestId) -> Self {
        Self {
            request_id,
            replica_id: ReplicaId::LOCAL,
            status: ResponseStatus::TimeoutSynthetic,
            payload: Vec::new(),
        }
    }
}

/// Status byte carried in acknowledgement bodies.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[repr(u8)]
pub enum AckStatus {
    Ok = 0,
    ProtocolError = 1,
    Rejected = 2,
}

/// Decoded form of every body layout the proxies and the discovery server exchange.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Message {
    Request(RequestEnvelope),
    Response(ResponseEnvelope),
    Heartbeat {
        service_id: ServiceIdentity,
        replica_id: ReplicaId,
    },
    Register {
        service_id: ServiceIdentity,
        replica_id: ReplicaId,
        endpoint: Endpoint,
    },
    /// Client to server: "who serves this id?"
    PeerQuery { service_id: ServiceIdentity },
    PeerList {
        service_id: ServiceIdentity,
        peers: Vec<(Endpoint, ReplicaId)>,
    },
    DisconnectReport {
        service_id: ServiceIdentity,
        replica_id: ReplicaId,
    },
    /// Reply to REGISTER, HEARTBEAT and DISCONNECT_REPORT.
    Ack { msg_type: MsgType, status: AckStatus },
}

const REQUEST_HEADER: usize = 8 + 8 + 32 + 4;
const RESPONSE_HEADER: usize = 8 + 8 + 8 + 1;

struct Cursor<'a> {
    buf: &'a [u8],
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], WireError> {
        if self.buf.len() < n {
            return Err(WireError::Protocol("truncated message body".into()));
        }
        let (head, tail) = self.buf.split_at(n);
        self.buf = tail;
        Ok(head)
    }

    fn u8(&mut self) -> Result<u8, WireError> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16, WireError> {
        let b = self.take(2)?;
        Ok(u16::from_be_bytes([b[0], b[1]]))
    }

    fn u32(&mut self) -> Result<u32, WireError> {
        Ok(u32::from_be_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64, WireError> {
        Ok(u64::from_be_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn service_id(&mut self) -> Result<ServiceIdentity, WireError> {
        Ok(ServiceIdentity(self.take(32)?.try_into().unwrap()))
    }

    fn endpoint(&mut self) -> Result<Endpoint, WireError> {
        let len = self.u16()? as usize;
        let raw = self.take(len)?;
        let s = std::str::from_utf8(raw)
            .map_err(|_| WireError::Protocol("endpoint is not UTF-8".into()))?;
        Ok(Endpoint::new(s))
    }

    fn finish(self) -> Result<(), WireError> {
        if self.buf.is_empty() {
            Ok(())
        } else {
            Err(WireError::Protocol(format!(
                "{} trailing bytes in message body",
                self.buf.len()
            )))
        }
    }
}

fn put_endpoint(out: &mut Vec<u8>, endpoint: &Endpoint) -> Result<(), WireError> {
    let raw = endpoint.0.as_bytes();
    if raw.len() > u16::MAX as usize {
        return Err(WireError::InvalidArgument("endpoint longer than 65535 bytes".into()));
    }
    out.extend_from_slice(&(raw.len() as u16).to_be_bytes());
    out.extend_from_slice(raw);
    Ok(())
}

impl Message {
    pub fn msg_type(&self) -> MsgType {
        match self {
            Message::Request(_) => MsgType::Request,
            Message::Response(_) => MsgType::Response,
            Message::Heartbeat { .. } => MsgType::Heartbeat,
            Message::Register { .. } => MsgType::Register,
            Message::PeerQuery { .. } | Message::PeerList { .. } => MsgType::PeerList,
            Message::DisconnectReport { .. } => MsgType::DisconnectReport,
            Message::Ack { msg_type, .. } => *msg_type,
        }
    }

    pub fn encode_body(&self) -> Result<Vec<u8>, WireError> {
        let mut out = Vec::new();
        match self {
            Message::Request(req) => {
                out.reserve(REQUEST_HEADER + req.payload.len());
                out.extend_from_slice(&req.request_id.client_guid.to_be_bytes());
                out.extend_from_slice(&req.request_id.sequence.to_be_bytes());
                out.extend_from_slice(req.service_id.as_bytes());
                out.extend_from_slice(&req.deadline_ms.to_be_bytes());
                out.extend_from_slice(&req.payload);
            }
            Message::Response(resp) => {
                let status = match resp.status {
                    ResponseStatus::Ok => 0u8,
                    ResponseStatus::ServiceError => 1u8,
                    ResponseStatus::TimeoutSynthetic => {
                        return Err(WireError::InvalidArgument(
                            "synthetic timeout responses are local only".into(),
                        ))
                    }
                };
                out.reserve(RESPONSE_HEADER + resp.payload.len());
                out.extend_from_slice(&resp.request_id.client_guid.to_be_bytes());
                out.extend_from_slice(&resp.request_id.sequence.to_be_bytes());
                out.extend_from_slice(&resp.replica_id.0.to_be_bytes());
                out.push(status);
                out.extend_from_slice(&resp.payload);
            }
            Message::Heartbeat {
                service_id,
                replica_id,
            }
            | Message::DisconnectReport {
                service_id,
                replica_id,
            } => {
                out.extend_from_slice(service_id.as_bytes());
                out.extend_from_slice(&replica_id.0.to_be_bytes());
            }
            Message::Register {
                service_id,
                replica_id,
                endpoint,
            } => {
                out.extend_from_slice(service_id.as_bytes());
                out.extend_from_slice(&replica_id.0.to_be_bytes());
                put_endpoint(&mut out, endpoint)?;
            }
            Message::PeerQuery { service_id } => out.extend_from_slice(service_id.as_bytes()),
            Message::PeerList { service_id, peers } => {
                if peers.len() > u16::MAX as usize {
                    return Err(WireError::InvalidArgument("too many peers".into()));
                }
                out.extend_from_slice(service_id.as_bytes());
                out.extend_from_slice(&(peers.len() as u16).to_be_bytes());
                for (endpoint, replica_id) in peers {
                    out.extend_from_slice(&replica_id.0.to_be_bytes());
                    put_endpoint(&mut out, endpoint)?;
                }
            }
            Message::Ack { status, .. } => out.push(*status as u8),
        }
        Ok(out)
    }

    /// Encodes the message as a complete frame, enforcing `max_body`.
    pub fn to_frame(&self, max_body: usize) -> Result<Vec<u8>, WireError> {
        let body = self.encode_body()?;
        if body.len() > max_body {
            return Err(WireError::FrameTooLarge {
                len: body.len(),
                max: max_body,
            });
        }
        encode_frame(self.msg_type(), &body)
    }

    pub fn decode(frame: &Frame) -> Result<Message, WireError> {
        let mut c = Cursor { buf: &frame.body };
        let body_len = frame.body.len();
        let msg = match frame.msg_type {
            MsgType::Request => {
                let client_guid = c.u64()?;
                let sequence = c.u64()?;
                let service_id = c.service_id()?;
                let deadline_ms = c.u32()?;
                let payload = c.buf.to_vec();
                c.buf = &[];
                Message::Request(RequestEnvelope {
                    request_id: RequestId::new(client_guid, sequence),
                    service_id,
                    deadline_ms,
                    payload,
                })
            }
            MsgType::Response => {
                let client_guid = c.u64()?;
                let sequence = c.u64()?;
                let replica_id = ReplicaId(c.u64()?);
                let status = match c.u8()? {
                    0 => ResponseStatus::Ok,
                    1 => ResponseStatus::ServiceError,
                    other => {
                        return Err(WireError::Protocol(format!(
                            "response status {other} is not valid on the wire"
                        )))
                    }
                };
                let payload = c.buf.to_vec();
                c.buf = &[];
                Message::Response(ResponseEnvelope {
                    request_id: RequestId::new(client_guid, sequence),
                    replica_id,
                    status,
                    payload,
                })
            }
            t @ (MsgType::Heartbeat | MsgType::Register | MsgType::DisconnectReport)
                if body_len == 1 =>
            {
                Message::Ack {
                    msg_type: t,
                    status: decode_ack(c.u8()?)?,
                }
            }
            MsgType::Heartbeat => Message::Heartbeat {
                service_id: c.service_id()?,
                replica_id: ReplicaId(c.u64()?),
            },
            MsgType::DisconnectReport => Message::DisconnectReport {
                service_id: c.service_id()?,
                replica_id: ReplicaId(c.u64()?),
            },
            MsgType::Register => Message::Register {
                service_id: c.service_id()?,
                replica_id: ReplicaId(c.u64()?),
                endpoint: c.endpoint()?,
            },
            MsgType::PeerList if body_len == 32 => Message::PeerQuery {
                service_id: c.service_id()?,
            },
            MsgType::PeerList => {
                let service_id = c.service_id()?;
                let count = c.u16()? as usize;
                let mut peers = Vec::with_capacity(count.min(1024));
                for _ in 0..count {
                    let replica_id = ReplicaId(c.u64()?);
                    peers.push((c.endpoint()?, replica_id));
                }
                Message::PeerList { service_id, peers }
            }
        };
        c.finish()?;
        Ok(msg)
    }

    /// Decodes the first frame in `input` and its body in one step.
    pub fn decode_from(input: &mut &[u8], max_body: usize) -> Result<Message, WireError> {
        let frame = decode_frame_limited(input, max_body)?;
        Message::decode(&frame)
    }
}

fn decode_ack(b: u8) -> Result<AckStatus, WireError> {
    match b {
        0 => Ok(AckStatus::Ok),
        1 => Ok(AckStatus::ProtocolError),
        2 => Ok(AckStatus::Rejected),
        other => Err(WireError::Protocol(format!("unknown ack status {other}"))),
    }
}
