//! Bandwidth-saving topologies: the robot sends one copy to a gateway (or to
//! a replica that also forwards) and the cloud side does the fan-out.

use ftproxy::envelope::derive_service_identity;
use ftproxy::envelope::MsgType;
use ftproxy::proxy::{flatten_topology, forwarding_links, TopologyNode};
use ftproxy::sim::{run_scenario, Scenario};

const GATEWAY: &str = r#"
schema_version = 1
name = "gateway-demo"
seed = 3
trace = true

[service]
name = "segment"

[workload]
requests = 3
inter_arrival_ms = 1000
timeout_ms = 2000

[[gateways]]
name = "gw"
region = "us-west-2"
network = { kind = "fixed", ms = 2.5 }

[[replicas]]
region = "us-west-1"
service = { kind = "fixed", ms = 20 }
network = { kind = "fixed", ms = 2.5 }
via = "gw"

[[replicas]]
region = "us-east-1"
service = { kind = "fixed", ms = 80 }
network = { kind = "fixed", ms = 2.5 }
via = "gw"
"#;

fn main() {
    let sid = derive_service_identity("segment", &[0; 32], 1).unwrap();

    let tree = TopologyNode::robot(vec![TopologyNode::gateway(
        1_000_000,
        "10.1.0.1:7000",
        vec![
            TopologyNode::replica(1, "10.2.0.1:7000"),
            TopologyNode::replica(2, "10.3.0.1:7000"),
            TopologyNode::replica(3, "10.4.0.1:7000"),
        ],
    )]);
    let direct = flatten_topology(&tree, sid).unwrap();
    println!("robot dials {} link(s): {}", direct.len(), direct[0].endpoint);
    for (node, children) in forwarding_links(&tree, sid).unwrap() {
        let list: Vec<String> = children.iter().map(|c| format!("{}", c.replica_id)).collect();
        println!("{node} forwards to {}", list.join(", "));
    }

    let chained = TopologyNode::robot(vec![
        TopologyNode::replica(1, "a").with_children(vec![TopologyNode::replica(2, "b")]),
    ]);
    println!(
        "replica-as-forwarder: robot links {}, r1 children {}",
        flatten_topology(&chained, sid).unwrap().len(),
        forwarding_links(&chained, sid).unwrap()[0].1.len()
    );

    // Each hop costs 5 ms there and back; the fastest replica serves in 20 ms.
    let report = run_scenario(&Scenario::from_toml(GATEWAY).unwrap()).unwrap();
    for r in &report.records {
        println!(
            "{} latency {:.1} ms, winner r{}",
            r.request_id,
            r.latency_ms().unwrap(),
            r.winner.unwrap().0
        );
    }
    println!("\nfirst request on the wire:");
    for h in report.trace.iter().take_while(|h| h.sent_at.as_millis() < 1000) {
        let kind = if h.msg_type == MsgType::Request { "REQUEST " } else { "RESPONSE" };
        println!(
            "  {:>6.1} -> {:>6.1} ms  {kind} {:>5} -> {:<5} {} bytes",
            h.sent_at.as_secs_f64() * 1e3,
            h.arrive_at.as_secs_f64() * 1e3,
            h.from,
            h.to,
            h.bytes.len()
        );
    }
}
