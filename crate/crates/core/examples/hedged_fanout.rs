//! One request, two replicas, first response wins.
//!
//! The proxies are sans-IO: this example moves frames between them by hand,
//! delivering the slow replica's answer last so the duplicate drop is visible.

use std::sync::Arc;
use std::time::Duration;

use ftproxy::clock::{Clock, ManualClock};
use ftproxy::envelope::{derive_service_identity, Endpoint, Message, ReplicaId, DEFAULT_MAX_FRAME};
use ftproxy::proxy::{LocalService, NodeOutput, Origin, PeerLink, RobotInbound, RobotProxy, ServiceNode};
use ftproxy::registry::Registry;

fn main() {
    let sid = derive_service_identity("grasp", &[0; 32], 1).unwrap();
    let clock = Arc::new(ManualClock::new());
    let robot = RobotProxy::new(0xfeed, Arc::new(Registry::new(clock.clone())));

    let upper = LocalService::new(sid, |p: &[u8]| Ok(p.to_ascii_uppercase()));
    let replicas = [
        ServiceNode::replica(ReplicaId(1), upper.clone()),
        ServiceNode::replica(ReplicaId(2), upper),
    ];
    let links: Vec<_> = replicas
        .iter()
        .map(|r| {
            let ep = Endpoint::new(format!("mem://{}", r.replica_id()));
            robot.add_link(PeerLink::new(sid, ep, r.replica_id()).up())
        })
        .collect();

    let (id, outbound) = robot
        .submit(
            b"pick the red block".to_vec(),
            sid,
            Duration::from_secs(1),
            Box::new(|resp| {
                println!(
                    "caller got {:?} from {}",
                    String::from_utf8_lossy(&resp.payload),
                    resp.replica_id
                )
            }),
            Box::new(|_| println!("caller timed out")),
        )
        .unwrap();
    println!("request {id} fanned out as {} identical frames", outbound.len());

    // Replica 2 answers first.
    let mut replies = Vec::new();
    for o in outbound.iter().rev() {
        let node = &replicas[links.iter().position(|l| *l == o.link).unwrap()];
        for out in node.handle_inbound(&o.bytes, Origin::Parent) {
            if let NodeOutput::Reply(bytes) = out {
                replies.push((o.link, bytes));
            }
        }
    }
    for (link, bytes) in replies {
        let replica = match Message::decode_from(&mut bytes.as_slice(), DEFAULT_MAX_FRAME) {
            Ok(Message::Response(r)) => r.replica_id,
            _ => unreachable!(),
        };
        match robot.handle_inbound(link, &bytes) {
            RobotInbound::Response(_, outcome) => println!("response from {replica}: {outcome:?}"),
            other => println!("unexpected {other:?}"),
        }
    }

    // Nothing is left to time out.
    clock.advance(Duration::from_secs(2));
    assert!(robot.expire(clock.now()).is_empty());
    let c = robot.counters();
    println!(
        "delivered {} duplicates {}",
        c.delivered.load(std::sync::atomic::Ordering::Relaxed),
        c.duplicates.load(std::sync::atomic::Ordering::Relaxed)
    );
}
