//! TCP transport: the proxy state machines driven by sockets and wall time.
//!
//! Every connection carries a stream of frames. The discovery server, replica
//! servers and robot proxy each run a small set of threads; none of them
//! touch application payloads beyond handing them to the state machines.

use std::io::{self, Write};
use std::net::{Shutdown, SocketAddr, TcpListener, TcpStream, ToSocketAddrs};
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::mpsc;
use std::sync::Arc;
use std::thread::{self, JoinHandle};
use std::time::Duration;

use parking_lot::Mutex;

use crate::clock::{Clock, WallClock};
use crate::discovery::{
    DiscoveryConfig, DiscoveryError, DiscoveryServer, Directory, Registrar, ServerReply,
};
use crate::envelope::{
    encode_frame, read_frame, AckStatus, Endpoint, Frame, Message, ReplicaId,
    ResponseEnvelope, ServiceIdentity, DEFAULT_MAX_FRAME,
};
use crate::proxy::{
    HeartbeatMonitor, HeartbeatPolicy, LinkId, LinkState, LocalService, Origin, PeerLink,
    ProxyError, RobotInbound, RobotProxy, ServiceNode,
};
use crate::registry::Registry;

const ACCEPT_POLL: Duration = Duration::from_millis(5);
const CONNECT_TIMEOUT: Duration = Duration::from_secs(2);

fn frame_bytes(frame: &Frame) -> io::Result<Vec<u8>> {
    encode_frame(frame.msg_type, &frame.body).map_err(|e| io::Error::new(io::ErrorKind::InvalidData, e))
}

fn resolve(endpoint: &str) -> io::Result<SocketAddr> {
    endpoint
        .to_socket_addrs()?
        .next()
        .ok_or_else(|| io::Error::new(io::ErrorKind::InvalidInput, format!("cannot resolve {endpoint}")))
}

/// Accept loop shared by the servers. Polls so that `stop` is noticed.
fn accept_loop(
    listener: TcpListener,
    stop: Arc<AtomicBool>,
    live: Arc<Mutex<Vec<TcpStream>>>,
    mut on_conn: impl FnMut(TcpStream) + Send + 'static,
) -> JoinHandle<()> {
    thread::spawn(move || {
        while !stop.load(Ordering::SeqCst) {
            match listener.accept() {
                Ok((stream, _)) => {
                    let _ = stream.set_nonblocking(false);
                    let _ = stream.set_nodelay(true);
                    if let Ok(c) = stream.try_clone() {
                        live.lock().push(c);
                    }
                    on_conn(stream);
                }
                Err(e) if e.kind() == io::ErrorKind::WouldBlock => thread::sleep(ACCEPT_POLL),
                Err(_) => thread::sleep(ACCEPT_POLL),
            }
        }
    })
}

fn bind_nonblocking(addr: &str) -> io::Result<TcpListener> {
    let listener = TcpListener::bind(addr)?;
    listener.set_nonblocking(true)?;
    Ok(listener)
}

fn close_all(live: &Mutex<Vec<TcpStream>>) {
    for s in live.lock().drain(..) {
        let _ = s.shutdown(Shutdown::Both);
    }
}

/// Discovery server on a TCP port. Data frames close the connection.
pub struct DiscoveryService {
    addr: SocketAddr,
    server: Arc<DiscoveryServer>,
    stop: Arc<AtomicBool>,
    live: Arc<Mutex<Vec<TcpStream>>>,
    accept: Option<JoinHandle<()>>,
}

impl DiscoveryService {
    pub fn bind(addr: &str, config: DiscoveryConfig) -> io::Result<Self> {
        let listener = bind_nonblocking(addr)?;
        let local = listener.local_addr()?;
        let server = Arc::new(DiscoveryServer::new(Arc::new(Directory::new(config))));
        let clock = WallClock::new();
        let stop = Arc::new(AtomicBool::new(false));
        let live = Arc::new(Mutex::new(Vec::new()));
        let srv = server.clone();
        let accept = accept_loop(listener, stop.clone(), live.clone(), move |stream| {
            let srv = srv.clone();
            let clock = clock.clone();
            thread::spawn(move || serve_discovery(stream, &srv, &clock));
        });
        Ok(Self {
            addr: local,
            server,
            stop,
            live,
            accept: Some(accept),
        })
    }

    pub fn local_addr(&self) -> SocketAddr {
        self.addr
    }

    pub fn directory(&self) -> &Arc<Directory> {
        self.server.directory()
    }

    pub fn server(&self) -> &Arc<DiscoveryServer> {
        &self.server
    }

    pub fn shutdown(mut self) {
        self.stop_now();
    }

    fn stop_now(&mut self) {
        self.stop.store(true, Ordering::SeqCst);
        close_all(&self.live);
        if let Some(h) = self.accept.take() {
            let _ = h.join();
        }
    }
}

impl Drop for DiscoveryService {
    fn drop(&mut self) {
        self.stop_now();
    }
}

fn serve_discovery(mut stream: TcpStream, server: &DiscoveryServer, clock: &WallClock) {
    let Ok(mut reader) = stream.try_clone() else {
        return;
    };
    while let Ok(frame) = read_frame(&mut reader, DEFAULT_MAX_FRAME) {
        let Ok(bytes) = frame_bytes(&frame) else {
            break;
        };
        match server.handle_frame(&bytes, clock.now()) {
            ServerReply::Send(reply) => {
                if stream.write_all(&reply).is_err() {
                    break;
                }
            }
            ServerReply::Reject(_) => break,
        }
    }
    let _ = stream.shutdown(Shutdown::Both);
}

/// Discovery client over TCP. Keeps one connection and redials once per
/// call after a failure. The server's clock is authoritative; the `now`
/// arguments are ignored.
pub struct TcpRegistrar {
    addr: SocketAddr,
    conn: Option<TcpStream>,
}

impl TcpRegistrar {
    pub fn new(addr: SocketAddr) -> Self {
        Self { addr, conn: None }
    }

    fn round_trip(&mut self, msg: &Message) -> Result<Message, DiscoveryError> {
        let bytes = msg
            .to_frame(DEFAULT_MAX_FRAME)
            .map_err(|e| DiscoveryError::Protocol(e.to_string()))?;
        for _ in 0..2 {
            if self.conn.is_none() {
                let s = TcpStream::connect_timeout(&self.addr, CONNECT_TIMEOUT)
                    .map_err(|_| DiscoveryError::Unreachable)?;
                let _ = s.set_nodelay(true);
                let _ = s.set_read_timeout(Some(CONNECT_TIMEOUT));
                self.conn = Some(s);
            }
            let conn = self.conn.as_mut().expect("connected above");
            let attempt = conn
                .write_all(&bytes)
                .and_then(|_| read_frame(conn, DEFAULT_MAX_FRAME));
            match attempt {
                Ok(frame) => {
                    return Message::decode(&frame).map_err(|e| DiscoveryError::Protocol(e.to_string()))
                }
                Err(_) => self.conn = None,
            }
        }
        Err(DiscoveryError::Unreachable)
    }

    fn ack(&mut self, msg: Message) -> Result<AckStatus, DiscoveryError> {
        let want = msg.msg_type();
        match self.round_trip(&msg)? {
            Message::Ack { msg_type, status } if msg_type == want => Ok(status),
            other => Err(DiscoveryError::Protocol(format!("unexpected reply {other:?}"))),
        }
    }
}

impl Registrar for TcpRegistrar {
    fn register_peer(
        &mut self,
        service_id: ServiceIdentity,
        endpoint: Endpoint,
        replica_id: ReplicaId,
        _now: Duration,
    ) -> Result<(), DiscoveryError> {
        match self.ack(Message::Register {
            service_id,
            replica_id,
            endpoint,
        })? {
            AckStatus::Ok => Ok(()),
            s => Err(DiscoveryError::Protocol(format!("register refused: {s:?}"))),
        }
    }

    fn heartbeat(
        &mut self,
        service_id: ServiceIdentity,
        replica_id: ReplicaId,
        _now: Duration,
    ) -> Result<bool, DiscoveryError> {
        Ok(self.ack(Message::Heartbeat {
            service_id,
            replica_id,
        })? == AckStatus::Ok)
    }

    fn report_disconnect(
        &mut self,
        service_id: ServiceIdentity,
        replica_id: ReplicaId,
    ) -> Result<(), DiscoveryError> {
        self.ack(Message::DisconnectReport {
            service_id,
            replica_id,
        })
        .map(|_| ())
    }

    fn lookup(
        &mut self,
        service_id: ServiceIdentity,
        _now: Duration,
    ) -> Result<Vec<(Endpoint, ReplicaId)>, DiscoveryError> {
        match self.round_trip(&Message::PeerQuery { service_id })? {
            Message::PeerList { peers, .. } => Ok(peers),
            other => Err(DiscoveryError::Protocol(format!("unexpected reply {other:?}"))),
        }
    }
}

type Job = (Vec<u8>, Arc<Mutex<TcpStream>>);

/// A replica: a local service behind a TCP port, served by a fixed worker pool.
pub struct ReplicaServer {
    addr: SocketAddr,
    replica_id: ReplicaId,
    stop: Arc<AtomicBool>,
    live: Arc<Mutex<Vec<TcpStream>>>,
    accept: Option<JoinHandle<()>>,
    workers: Vec<JoinHandle<()>>,
    jobs: Option<mpsc::Sender<Job>>,
}

impl ReplicaServer {
    pub fn bind(
        addr: &str,
        replica_id: ReplicaId,
        service: LocalService,
        workers: usize,
    ) -> io::Result<Self> {
        let listener = bind_nonblocking(addr)?;
        let local = listener.local_addr()?;
        let node = Arc::new(ServiceNode::replica(replica_id, service));
        let (tx, rx) = mpsc::channel::<Job>();
        let rx = Arc::new(Mutex::new(rx));
        let workers = (0..workers.max(1))
            .map(|_| {
                let rx = rx.clone();
                let node = node.clone();
                thread::spawn(move || loop {
                    let job = rx.lock().recv();
                    let Ok((bytes, writer)) = job else {
                        break;
                    };
                    for out in node.handle_inbound(&bytes, Origin::Parent) {
                        if let crate::proxy::NodeOutput::Reply(reply) = out {
                            let _ = writer.lock().write_all(&reply);
                        }
                    }
                })
            })
            .collect();
        let stop = Arc::new(AtomicBool::new(false));
        let live = Arc::new(Mutex::new(Vec::new()));
        let jobs = tx.clone();
        let accept = accept_loop(listener, stop.clone(), live.clone(), move |stream| {
            let jobs = jobs.clone();
            thread::spawn(move || {
                let Ok(writer) = stream.try_clone() else {
                    return;
                };
                let writer = Arc::new(Mutex::new(writer));
                let mut reader = stream;
                while let Ok(frame) = read_frame(&mut reader, DEFAULT_MAX_FRAME) {
                    let Ok(bytes) = frame_bytes(&frame) else {
                        break;
                    };
                    if jobs.send((bytes, writer.clone())).is_err() {
                        break;
                    }
                }
            });
        });
        Ok(Self {
            addr: local,
            replica_id,
            stop,
            live,
            accept: Some(accept),
            workers,
            jobs: Some(tx),
        })
    }

    pub fn local_addr(&self) -> SocketAddr {
        self.addr
    }

    pub fn endpoint(&self) -> Endpoint {
        Endpoint::new(self.addr.to_string())
    }

    pub fn replica_id(&self) -> ReplicaId {
        self.replica_id
    }

    /// Stops accepting and resets every open connection, as a crashed
    /// process would.
    pub fn kill(mut self) {
        self.stop_now();
    }

    fn stop_now(&mut self) {
        self.stop.store(true, Ordering::SeqCst);
        close_all(&self.live);
        if let Some(h) = self.accept.take() {
            let _ = h.join();
        }
        self.jobs.take();
    }
}

impl Drop for ReplicaServer {
    fn drop(&mut self) {
        self.stop_now();
        // Workers exit once every connection thread has dropped its sender.
        self.workers.clear();
    }
}

struct RobotLink {
    stream: Option<TcpStream>,
    generation: u64,
    monitor: HeartbeatMonitor,
}

struct RobotInner {
    proxy: RobotProxy,
    clock: Arc<WallClock>,
    links: Mutex<Vec<RobotLink>>,
    policy: HeartbeatPolicy,
    stop: AtomicBool,
    generations: AtomicU64,
}

impl RobotInner {
    fn mark_down(&self, link: LinkId, generation: u64) {
        let mut links = self.links.lock();
        if let Some(l) = links.get_mut(link) {
            if l.generation == generation {
                if let Some(s) = l.stream.take() {
                    let _ = s.shutdown(Shutdown::Both);
                }
                l.monitor.connection_reset();
                self.proxy.set_link_state(link, LinkState::Down);
            }
        }
    }

    fn send(&self, link: LinkId, bytes: &[u8]) {
        let (stream, generation) = {
            let links = self.links.lock();
            match links.get(link) {
                Some(RobotLink {
                    stream: Some(s),
                    generation,
                    ..
                }) => (s.try_clone().ok(), *generation),
                _ => return,
            }
        };
        if let Some(mut s) = stream {
            if s.write_all(bytes).is_err() {
                self.mark_down(link, generation);
            }
        }
    }
}

/// Robot-side proxy over TCP with a blocking request API.
pub struct TcpRobot {
    inner: Arc<RobotInner>,
    threads: Vec<JoinHandle<()>>,
}

impl TcpRobot {
    pub fn new(policy: HeartbeatPolicy) -> Self {
        let clock = Arc::new(WallClock::new());
        let registry = Arc::new(Registry::new(clock.clone()));
        let guid = crate::envelope::RequestIdGenerator::random().client_guid();
        let inner = Arc::new(RobotInner {
            proxy: RobotProxy::new(guid, registry),
            clock,
            links: Mutex::new(Vec::new()),
            policy,
            stop: AtomicBool::new(false),
            generations: AtomicU64::new(0),
        });
        let expiry = {
            let inner = inner.clone();
            thread::spawn(move || {
                while !inner.stop.load(Ordering::SeqCst) {
                    inner.proxy.expire(inner.clock.now());
                    thread::sleep(Duration::from_millis(1));
                }
            })
        };
        let heartbeat = {
            let inner = inner.clone();
            thread::spawn(move || {
                let step = Duration::from_millis(10);
                let mut since = Duration::ZERO;
                while !inner.stop.load(Ordering::SeqCst) {
                    thread::sleep(step);
                    since += step;
                    let now = inner.clock.now();
                    let stale: Vec<(LinkId, u64)> = inner
                        .links
                        .lock()
                        .iter()
                        .enumerate()
                        .filter(|(_, l)| l.stream.is_some() && l.monitor.state(now) == LinkState::Down)
                        .map(|(i, l)| (i, l.generation))
                        .collect();
                    for (link, generation) in stale {
                        inner.mark_down(link, generation);
                    }
                    if since >= inner.policy.interval {
                        since = Duration::ZERO;
                        let targets: Vec<(LinkId, ServiceIdentity, ReplicaId)> = inner
                            .proxy
                            .links()
                            .iter()
                            .enumerate()
                            .filter(|(_, l)| l.state == LinkState::Up)
                            .map(|(i, l)| (i, l.service_id, l.replica_id))
                            .collect();
                        for (link, service_id, replica_id) in targets {
                            let hb = Message::Heartbeat {
                                service_id,
                                replica_id,
                            };
                            if let Ok(bytes) = hb.to_frame(DEFAULT_MAX_FRAME) {
                                inner.send(link, &bytes);
                            }
                        }
                    }
                }
            })
        };
        Self {
            inner,
            threads: vec![expiry, heartbeat],
        }
    }

    pub fn proxy(&self) -> &RobotProxy {
        &self.inner.proxy
    }

    pub fn links(&self) -> Vec<PeerLink> {
        self.inner.proxy.links()
    }

    /// Adds a link and dials it. The link is UP only if the connection
    /// succeeded.
    pub fn connect(&self, service_id: ServiceIdentity, endpoint: Endpoint, replica_id: ReplicaId) -> LinkId {
        let link = {
            let mut links = self.inner.links.lock();
            let id = self
                .inner
                .proxy
                .add_link(PeerLink::new(service_id, endpoint.clone(), replica_id));
            links.push(RobotLink {
                stream: None,
                generation: 0,
                monitor: HeartbeatMonitor::new(self.inner.policy, self.inner.clock.now()),
            });
            id
        };
        self.dial(link, endpoint);
        link
    }

    fn dial(&self, link: LinkId, endpoint: Endpoint) -> bool {
        let stream = resolve(endpoint.as_str())
            .and_then(|addr| TcpStream::connect_timeout(&addr, CONNECT_TIMEOUT));
        let Ok(stream) = stream else {
            self.inner.proxy.set_link_state(link, LinkState::Down);
            return false;
        };
        let _ = stream.set_nodelay(true);
        let Ok(mut reader) = stream.try_clone() else {
            return false;
        };
        let generation = self.inner.generations.fetch_add(1, Ordering::SeqCst) + 1;
        {
            let mut links = self.inner.links.lock();
            let l = &mut links[link];
            l.stream = Some(stream);
            l.generation = generation;
            l.monitor = HeartbeatMonitor::new(self.inner.policy, self.inner.clock.now());
        }
        self.inner.proxy.reconnect(link, endpoint);
        let inner = self.inner.clone();
        thread::spawn(move || {
            while let Ok(frame) = read_frame(&mut reader, DEFAULT_MAX_FRAME) {
                let Ok(bytes) = frame_bytes(&frame) else {
                    break;
                };
                if let RobotInbound::Heartbeat = inner.proxy.handle_inbound(link, &bytes) {
                    let now = inner.clock.now();
                    if let Some(l) = inner.links.lock().get_mut(link) {
                        if l.generation == generation {
                            l.monitor.observe(now);
                        }
                    }
                }
            }
            inner.mark_down(link, generation);
        });
        true
    }

    /// Sends one request to every UP replica and blocks until the first
    /// response or the timeout. A timeout returns a synthetic envelope.
    pub fn submit_request(
        &self,
        payload: Vec<u8>,
        service_id: ServiceIdentity,
        timeout: Duration,
    ) -> Result<ResponseEnvelope, ProxyError> {
        let (tx, rx) = mpsc::sync_channel(1);
        let tx2 = tx.clone();
        let (_, outbound) = self.inner.proxy.submit(
            payload,
            service_id,
            timeout,
            Box::new(move |r| {
                let _ = tx.send(r);
            }),
            Box::new(move |r| {
                let _ = tx2.send(r);
            }),
        )?;
        for o in outbound {
            self.inner.send(o.link, &o.bytes);
        }
        rx.recv()
            .map_err(|_| ProxyError::Transport("request resolver dropped".into()))
    }

    /// Re-resolves the service through discovery: redials DOWN links whose
    /// replica is listed and adds links for replicas not seen before.
    /// Returns how many links were (re)connected.
    pub fn refresh(
        &self,
        registrar: &mut dyn Registrar,
        service_id: ServiceIdentity,
    ) -> Result<usize, DiscoveryError> {
        let peers = registrar.lookup(service_id, self.inner.clock.now())?;
        let mut connected = 0;
        for (endpoint, replica_id) in peers {
            match self.inner.proxy.find_link(service_id, replica_id) {
                Some(link) => {
                    let current = self.inner.proxy.link(link).expect("link exists");
                    if current.state != LinkState::Up && self.dial(link, endpoint) {
                        connected += 1;
                    }
                }
                None => {
                    let link = self.connect(service_id, endpoint, replica_id);
                    if self.inner.proxy.link(link).is_some_and(|l| l.state == LinkState::Up) {
                        connected += 1;
                    }
                }
            }
        }
        Ok(connected)
    }

    pub fn shutdown(mut self) {
        self.stop_now();
    }

    fn stop_now(&mut self) {
        self.inner.stop.store(true, Ordering::SeqCst);
        for l in self.inner.links.lock().iter_mut() {
            if let Some(s) = l.stream.take() {
                let _ = s.shutdown(Shutdown::Both);
            }
        }
        for t in self.threads.drain(..) {
            let _ = t.join();
        }
    }
}

impl Drop for TcpRobot {
    fn drop(&mut self) {
        self.stop_now();
    }
}
