//! Endpoint exchange through the metadata server: registration, relaunch at a
//! new address, disconnect reports, heartbeat expiry and a server restart.

use std::time::Duration;

use ftproxy::discovery::{DiscoveryConfig, LocalDiscovery, Registrar};
use ftproxy::envelope::{derive_service_identity, Endpoint, ReplicaId};

fn main() {
    let sid = derive_service_identity("segment", &[0; 32], 1).unwrap();
    let cfg = DiscoveryConfig::default();
    let mut d = LocalDiscovery::new(cfg);
    let s = Duration::from_secs;
    let show = |d: &mut LocalDiscovery, at: Duration, label: &str| {
        let peers = d.lookup(sid, at).unwrap();
        let list: Vec<String> = peers.iter().map(|(e, r)| format!("{r}@{e}")).collect();
        println!("{label:<32} [{}]", list.join(", "));
    };

    d.register_peer(sid, Endpoint::new("10.0.0.1:7000"), ReplicaId(1), s(0)).unwrap();
    d.register_peer(sid, Endpoint::new("10.0.1.1:7000"), ReplicaId(2), s(0)).unwrap();
    show(&mut d, s(1), "two replicas");

    d.register_peer(sid, Endpoint::new("10.0.2.9:7000"), ReplicaId(1), s(2)).unwrap();
    show(&mut d, s(2), "r1 relaunched elsewhere");

    d.report_disconnect(sid, ReplicaId(2)).unwrap();
    d.report_disconnect(sid, ReplicaId(2)).unwrap();
    show(&mut d, s(3), "r2 reported twice");

    show(&mut d, s(2) + cfg.expiry, "silent for exactly the window");
    show(&mut d, s(3) + cfg.expiry, "silent past the window");
    d.register_peer(sid, Endpoint::new("10.0.2.9:7000"), ReplicaId(1), s(20)).unwrap();
    d.heartbeat(sid, ReplicaId(1), s(28)).unwrap();
    show(&mut d, s(35), "heartbeat at 28s, lookup at 35s");

    d.kill();
    println!("server down: register -> {:?}", d.register_peer(sid, Endpoint::new("x"), ReplicaId(3), s(36)).err());
    d.restart();
    show(&mut d, s(37), "after restart (state lost)");
    d.register_peer(sid, Endpoint::new("10.0.3.3:7000"), ReplicaId(3), s(38)).unwrap();
    show(&mut d, s(38), "r3 registers");

    let frames = d.server().rejected_data_frames();
    println!("data frames refused by the server so far: {frames}");
}
