//! The proxies over real sockets on loopback: a discovery server, two replica
//! servers with different speeds and a robot that keeps working after one of
//! the replicas is killed.

use std::time::{Duration, Instant};

use ftproxy::discovery::{DiscoveryConfig, Registrar};
use ftproxy::envelope::{derive_service_identity, ReplicaId, ResponseStatus};
use ftproxy::net::{DiscoveryService, ReplicaServer, TcpRegistrar, TcpRobot};
use ftproxy::proxy::{HeartbeatPolicy, LocalService};

fn replica(id: u64, delay_ms: u64, sid: ftproxy::envelope::ServiceIdentity) -> ReplicaServer {
    let service = LocalService::new(sid, move |p: &[u8]| {
        std::thread::sleep(Duration::from_millis(delay_ms));
        Ok(p.iter().rev().copied().collect())
    });
    ReplicaServer::bind("127.0.0.1:0", ReplicaId(id), service, 4).unwrap()
}

fn main() {
    let sid = derive_service_identity("grasp", &[0; 32], 1).unwrap();
    let discovery = DiscoveryService::bind("127.0.0.1:0", DiscoveryConfig::default()).unwrap();
    let mut registrar = TcpRegistrar::new(discovery.local_addr());

    let fast = replica(1, 15, sid);
    let slow = replica(2, 60, sid);
    for s in [&fast, &slow] {
        registrar.register_peer(sid, s.endpoint(), s.replica_id(), Duration::ZERO).unwrap();
    }

    let robot = TcpRobot::new(HeartbeatPolicy::default());
    let linked = robot.refresh(&mut registrar, sid).unwrap();
    println!("discovery at {}, robot connected {linked} links", discovery.local_addr());

    let mut fast = Some(fast);
    for i in 0..10u8 {
        if i == 5 {
            fast.take().unwrap().kill();
            println!("-- killed r1 --");
        }
        let t = Instant::now();
        let resp = robot.submit_request(vec![b'a' + i, b'!'], sid, Duration::from_secs(2)).unwrap();
        let ok = resp.status == ResponseStatus::Ok;
        println!(
            "request {i}: {} from {} in {:.1} ms{}",
            String::from_utf8_lossy(&resp.payload),
            resp.replica_id,
            t.elapsed().as_secs_f64() * 1e3,
            if ok { "" } else { " (failed)" }
        );
    }
    for l in robot.links() {
        println!("{} {} {}", l.replica_id, l.endpoint, l.state.as_str());
    }

    robot.shutdown();
    drop(slow);
    discovery.shutdown();
}
