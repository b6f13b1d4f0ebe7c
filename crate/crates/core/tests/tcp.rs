//! Wall-clock behaviour over loopback. Timing checks allow 20% slack plus a
//! few milliseconds of scheduling noise.

use std::time::{Duration, Instant};

use ftproxy::discovery::{DiscoveryConfig, Registrar};
use ftproxy::envelope::{derive_service_identity, ReplicaId, ResponseStatus, ServiceIdentity};
use ftproxy::net::{DiscoveryService, ReplicaServer, TcpRegistrar, TcpRobot};
use ftproxy::proxy::{HeartbeatPolicy, LinkState, LocalService, ProxyError};

fn sid() -> ServiceIdentity {
    derive_service_identity("tcp-test", &[7; 32], 1).unwrap()
}

fn sleepy(id: u64, ms: u64) -> ReplicaServer {
    let service = LocalService::new(sid(), move |p: &[u8]| {
        std::thread::sleep(Duration::from_millis(ms));
        Ok(p.to_vec())
    });
    ReplicaServer::bind("127.0.0.1:0", ReplicaId(id), service, 4).unwrap()
}

fn cluster(replicas: &[&ReplicaServer]) -> (DiscoveryService, TcpRegistrar, TcpRobot) {
    let discovery = DiscoveryService::bind("127.0.0.1:0", DiscoveryConfig::default()).unwrap();
    let mut registrar = TcpRegistrar::new(discovery.local_addr());
    for r in replicas {
        registrar.register_peer(sid(), r.endpoint(), r.replica_id(), Duration::ZERO).unwrap();
    }
    let robot = TcpRobot::new(HeartbeatPolicy { interval: Duration::from_millis(50), misses: 3 });
    assert_eq!(robot.refresh(&mut registrar, sid()).unwrap(), replicas.len());
    (discovery, registrar, robot)
}

fn timed(robot: &TcpRobot, timeout: Duration) -> (Duration, ReplicaId, ResponseStatus) {
    let t = Instant::now();
    let r = robot.submit_request(b"ping".to_vec(), sid(), timeout).unwrap();
    (t.elapsed(), r.replica_id, r.status)
}

fn median(mut xs: Vec<Duration>) -> Duration {
    xs.sort();
    xs[xs.len() / 2]
}

#[test]
fn fastest_of_three_sets_the_latency() {
    let (a, b, c) = (sleepy(1, 120), sleepy(2, 40), sleepy(3, 200));
    let (_d, _reg, robot) = cluster(&[&a, &b, &c]);
    let mut lat = Vec::new();
    for _ in 0..10 {
        let (dt, winner, status) = timed(&robot, Duration::from_secs(2));
        assert_eq!(status, ResponseStatus::Ok);
        assert_eq!(winner, ReplicaId(2));
        lat.push(dt);
    }
    let m = median(lat).as_secs_f64() * 1e3;
    assert!((40.0..=40.0 * 1.2 + 5.0).contains(&m), "median {m} ms");
}

#[test]
fn timeout_fires_on_time() {
    let slow = sleepy(1, 500);
    let (_d, _reg, robot) = cluster(&[&slow]);
    let (dt, _, status) = timed(&robot, Duration::from_millis(100));
    assert_eq!(status, ResponseStatus::TimeoutSynthetic);
    let ms = dt.as_secs_f64() * 1e3;
    assert!((100.0..=120.0 + 5.0).contains(&ms), "{ms} ms");
}

#[test]
fn killed_replica_is_masked_and_marked_down() {
    let (a, b) = (sleepy(1, 10), sleepy(2, 30));
    let (_d, _reg, robot) = cluster(&[&a, &b]);
    assert_eq!(timed(&robot, Duration::from_secs(2)).1, ReplicaId(1));
    a.kill();
    for _ in 0..20 {
        let (_, winner, status) = timed(&robot, Duration::from_secs(2));
        assert_eq!(status, ResponseStatus::Ok);
        assert_eq!(winner, ReplicaId(2));
    }
    let deadline = Instant::now() + Duration::from_secs(1);
    while robot.links().iter().any(|l| l.replica_id == ReplicaId(1) && l.state != LinkState::Down) {
        assert!(Instant::now() < deadline, "link never went down");
        std::thread::sleep(Duration::from_millis(10));
    }
}

#[test]
fn all_replicas_down_fails_fast() {
    let a = sleepy(1, 5);
    let (_d, _reg, robot) = cluster(&[&a]);
    a.kill();
    let deadline = Instant::now() + Duration::from_secs(1);
    loop {
        let t = Instant::now();
        match robot.submit_request(vec![1], sid(), Duration::from_secs(5)) {
            Err(ProxyError::Unavailable(s)) => {
                assert_eq!(s, sid());
                assert!(t.elapsed() < Duration::from_millis(50));
                break;
            }
            _ => assert!(Instant::now() < deadline),
        }
        std::thread::sleep(Duration::from_millis(10));
    }
}

#[test]
fn relaunched_replica_rejoins_through_discovery() {
    let (a, b) = (sleepy(1, 10), sleepy(2, 60));
    let (_d, mut reg, robot) = cluster(&[&a, &b]);
    let old = a.endpoint();
    a.kill();
    std::thread::sleep(Duration::from_millis(50));
    assert_eq!(timed(&robot, Duration::from_secs(2)).1, ReplicaId(2));

    let a2 = sleepy(1, 10);
    assert_ne!(a2.endpoint(), old);
    reg.register_peer(sid(), a2.endpoint(), ReplicaId(1), Duration::ZERO).unwrap();
    assert_eq!(robot.refresh(&mut reg, sid()).unwrap(), 1);
    let link = robot.links().into_iter().find(|l| l.replica_id == ReplicaId(1)).unwrap();
    assert_eq!(link.endpoint, a2.endpoint());
    assert_eq!(link.state, LinkState::Up);
    assert_eq!(robot.links().len(), 2);
    assert_eq!(timed(&robot, Duration::from_secs(2)).1, ReplicaId(1));
}

#[test]
fn discovery_expires_silent_replicas() {
    let config = DiscoveryConfig { heartbeat_interval: Duration::from_millis(20), expiry: Duration::from_millis(150) };
    let discovery = DiscoveryService::bind("127.0.0.1:0", config).unwrap();
    let mut reg = TcpRegistrar::new(discovery.local_addr());
    let (a, b) = (sleepy(1, 1), sleepy(2, 1));
    reg.register_peer(sid(), a.endpoint(), ReplicaId(1), Duration::ZERO).unwrap();
    reg.register_peer(sid(), b.endpoint(), ReplicaId(2), Duration::ZERO).unwrap();
    let start = Instant::now();
    while start.elapsed() < Duration::from_millis(400) {
        assert!(reg.heartbeat(sid(), ReplicaId(2), Duration::ZERO).unwrap());
        std::thread::sleep(Duration::from_millis(20));
    }
    let peers = reg.lookup(sid(), Duration::ZERO).unwrap();
    assert_eq!(peers, vec![(b.endpoint(), ReplicaId(2))]);
    assert!(!reg.heartbeat(sid(), ReplicaId(1), Duration::ZERO).unwrap());

    reg.report_disconnect(sid(), ReplicaId(2)).unwrap();
    assert!(reg.lookup(sid(), Duration::ZERO).unwrap().is_empty());
}

#[test]
fn many_concurrent_requests_each_resolve_once() {
    let (a, b) = (sleepy(1, 5), sleepy(2, 5));
    let (_d, _reg, robot) = cluster(&[&a, &b]);
    let robot = std::sync::Arc::new(robot);
    let handles: Vec<_> = (0..8)
        .map(|t| {
            let robot = robot.clone();
            std::thread::spawn(move || {
                for i in 0..25u8 {
                    let r = robot.submit_request(vec![t, i], sid(), Duration::from_secs(2)).unwrap();
                    assert_eq!(r.status, ResponseStatus::Ok);
                    assert_eq!(r.payload, vec![t, i]);
                }
            })
        })
        .collect();
    for h in handles {
        h.join().unwrap();
    }
}

#[test]
fn replica_ids_are_scoped_by_service() {
    let other = derive_service_identity("other", &[7; 32], 1).unwrap();
    let a = sleepy(1, 5);
    let b = ReplicaServer::bind("127.0.0.1:0", ReplicaId(1), LocalService::new(other, |p: &[u8]| Ok(p.to_vec())), 1).unwrap();
    let (_d, mut reg, robot) = cluster(&[&a]);
    reg.register_peer(other, b.endpoint(), ReplicaId(1), Duration::ZERO).unwrap();
    assert_eq!(robot.refresh(&mut reg, other).unwrap(), 1);
    assert_eq!(robot.links().len(), 2);
    let r = robot.submit_request(vec![9], other, Duration::from_secs(2)).unwrap();
    assert_eq!(r.status, ResponseStatus::Ok);
}
