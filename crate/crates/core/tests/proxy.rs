use std::sync::atomic::{AtomicU32, Ordering};
use std::sync::{Arc, Mutex};
use std::time::Duration;

use ftproxy::clock::ManualClock;
use ftproxy::envelope::{
    derive_service_identity, encode_frame, Endpoint, Message, MsgType, ReplicaId, ResponseEnvelope, ServiceIdentity,
    DEFAULT_MAX_FRAME,
};
use ftproxy::proxy::{
    flatten_topology, forwarding_links, LinkState, LocalService, NodeOutput, Origin, PeerLink, ProxyError,
    RobotInbound, RobotProxy, ServiceNode, TopologyNode,
};
use ftproxy::registry::{Completion, Registry};
use proptest::prelude::*;

fn sid() -> ServiceIdentity {
    derive_service_identity("plan", &[5; 32], 1).unwrap()
}

fn service() -> LocalService {
    LocalService::new(sid(), |p: &[u8]| Ok(p.iter().map(|b| b.wrapping_add(1)).collect()))
}

struct Rig {
    robot: RobotProxy,
    nodes: Vec<ServiceNode>,
}

fn rig(n: u64) -> Rig {
    let robot = RobotProxy::new(77, Arc::new(Registry::new(Arc::new(ManualClock::new()))));
    let nodes: Vec<ServiceNode> = (1..=n).map(|i| ServiceNode::replica(ReplicaId(i), service())).collect();
    for node in &nodes {
        let ep = Endpoint::new(format!("mem://{}", node.replica_id()));
        robot.add_link(PeerLink::new(sid(), ep, node.replica_id()).up());
    }
    Rig { robot, nodes }
}

proptest! {
    // Any strict subset of links down: the caller still sees exactly one
    // answer, equal to what a single unreplicated service would return.
    #[test]
    fn down_links_are_masked(
        n in 2u64..7,
        down_mask in any::<u8>(),
        order_seed in any::<u64>(),
        payload in prop::collection::vec(any::<u8>(), 0..32),
    ) {
        let r = rig(n);
        let mut down: Vec<usize> = (0..n as usize).filter(|i| down_mask & (1 << i) != 0).collect();
        if down.len() == n as usize {
            down.pop();
        }
        for &i in &down {
            r.robot.set_link_state(i, LinkState::Down);
        }
        let got = Arc::new(Mutex::new(Vec::new()));
        let timeouts = Arc::new(AtomicU32::new(0));
        let (g, t) = (got.clone(), timeouts.clone());
        let (_, outbound) = r.robot.submit(
            payload.clone(),
            sid(),
            Duration::from_secs(1),
            Box::new(move |resp: ResponseEnvelope| g.lock().unwrap().push(resp)),
            Box::new(move |_| { t.fetch_add(1, Ordering::SeqCst); }),
        ).unwrap();
        prop_assert_eq!(outbound.len(), n as usize - down.len());
        prop_assert!(outbound.iter().all(|o| !down.contains(&o.link)));
        prop_assert!(outbound.windows(2).all(|w| w[0].bytes == w[1].bytes));

        let mut replies = Vec::new();
        for o in &outbound {
            for out in r.nodes[o.link].handle_inbound(&o.bytes, Origin::Parent) {
                if let NodeOutput::Reply(b) = out {
                    replies.push((o.link, b));
                }
            }
        }
        // Deterministic shuffle of arrival order.
        let mut s = order_seed | 1;
        for i in (1..replies.len()).rev() {
            s ^= s << 13; s ^= s >> 7; s ^= s << 17;
            replies.swap(i, (s % (i as u64 + 1)) as usize);
        }
        let mut delivered = 0;
        for (link, b) in &replies {
            if let RobotInbound::Response(_, Completion::Delivered) = r.robot.handle_inbound(*link, b) {
                delivered += 1;
            }
        }
        prop_assert_eq!(delivered, 1);
        let got = got.lock().unwrap();
        prop_assert_eq!(got.len(), 1);
        let expected: Vec<u8> = payload.iter().map(|b| b.wrapping_add(1)).collect();
        prop_assert_eq!(&got[0].payload, &expected);
        prop_assert_eq!(timeouts.load(Ordering::SeqCst), 0);
    }
}

#[test]
fn no_up_links_fails_fast() {
    let r = rig(2);
    r.robot.set_link_state(0, LinkState::Down);
    r.robot.set_link_state(1, LinkState::Connecting);
    let err = r
        .robot
        .submit(vec![1], sid(), Duration::from_secs(1), Box::new(|_| {}), Box::new(|_| {}))
        .unwrap_err();
    assert!(matches!(err, ProxyError::Unavailable(_)));
    assert_eq!(r.robot.registry().pending(), 0);
}

#[test]
fn malformed_inbound_frame_marks_link_suspect() {
    let r = rig(1);
    let junk = [0u8, 1, 2, 3, 4, 5, 6, 7, 8];
    assert!(matches!(r.robot.handle_inbound(0, &junk), RobotInbound::Malformed(_)));
    assert!(r.robot.link(0).unwrap().suspect);
    assert_eq!(r.robot.counters().decode_errors.load(Ordering::Relaxed), 1);
}

#[test]
fn gateway_relays_bytes_untouched() {
    let gw = ServiceNode::gateway(ReplicaId(1_000_000));
    let child = ServiceNode::replica(ReplicaId(1), service());
    gw.add_child(PeerLink::new(sid(), Endpoint::new("c"), ReplicaId(1)).up());

    let r = rig(0);
    r.robot.add_link(PeerLink::new(sid(), Endpoint::new("gw"), ReplicaId(1_000_000)).up());
    let (_, out) = r
        .robot
        .submit(b"abc".to_vec(), sid(), Duration::from_secs(1), Box::new(|_| {}), Box::new(|_| {}))
        .unwrap();
    let fwd = gw.handle_inbound(&out[0].bytes, Origin::Parent);
    assert_eq!(fwd.len(), 1);
    let NodeOutput::Forward { child: link, bytes } = &fwd[0] else { panic!("{fwd:?}") };
    assert_eq!(bytes, &out[0].bytes);
    let reply = match &child.handle_inbound(bytes, Origin::Parent)[0] {
        NodeOutput::Reply(b) => b.clone(),
        other => panic!("{other:?}"),
    };
    let up = gw.handle_inbound(&reply, Origin::Child(*link));
    assert_eq!(up, vec![NodeOutput::Relay(reply.clone())]);

    // With its only child down the gateway drops and counts.
    gw.set_child_state(*link, LinkState::Down);
    assert!(gw.handle_inbound(&out[0].bytes, Origin::Parent).is_empty());
    assert_eq!(gw.counters().dropped_no_child.load(Ordering::Relaxed), 1);
}

#[test]
fn replica_that_forwards_serves_and_duplicates() {
    let a = ServiceNode::replica(ReplicaId(1), service());
    a.add_child(PeerLink::new(sid(), Endpoint::new("b"), ReplicaId(2)).up());
    let r = rig(0);
    r.robot.add_link(PeerLink::new(sid(), Endpoint::new("a"), ReplicaId(1)).up());
    let (_, out) = r
        .robot
        .submit(vec![9], sid(), Duration::from_secs(1), Box::new(|_| {}), Box::new(|_| {}))
        .unwrap();
    let outputs = a.handle_inbound(&out[0].bytes, Origin::Parent);
    assert_eq!(outputs.len(), 2);
    assert!(outputs.iter().any(|o| matches!(o, NodeOutput::Reply(_))));
    assert!(outputs.iter().any(|o| matches!(o, NodeOutput::Forward { bytes, .. } if *bytes == out[0].bytes)));
}

#[test]
fn replica_answers_with_the_same_request_id() {
    let node = ServiceNode::replica(ReplicaId(4), service());
    let r = rig(0);
    r.robot.add_link(PeerLink::new(sid(), Endpoint::new("x"), ReplicaId(4)).up());
    let (id, out) = r
        .robot
        .submit(vec![1, 2], sid(), Duration::from_secs(1), Box::new(|_| {}), Box::new(|_| {}))
        .unwrap();
    let NodeOutput::Reply(bytes) = &node.handle_inbound(&out[0].bytes, Origin::Parent)[0] else { panic!() };
    match Message::decode_from(&mut bytes.as_slice(), DEFAULT_MAX_FRAME).unwrap() {
        Message::Response(resp) => {
            assert_eq!(resp.request_id, id);
            assert_eq!(resp.replica_id, ReplicaId(4));
            assert_eq!(resp.payload, vec![2, 3]);
        }
        other => panic!("{other:?}"),
    }
    // Undecodable input is counted and dropped.
    assert!(node.handle_inbound(&encode_frame(MsgType::Request, &[1]).unwrap(), Origin::Parent).is_empty());
    assert_eq!(node.counters().decode_errors.load(Ordering::Relaxed), 1);
}

#[test]
fn flattening() {
    let s = sid();
    let flat = TopologyNode::robot(vec![TopologyNode::replica(1, "a"), TopologyNode::replica(2, "b")]);
    assert_eq!(flatten_topology(&flat, s).unwrap().len(), 2);
    assert!(forwarding_links(&flat, s).unwrap().is_empty());

    let gw = TopologyNode::robot(vec![TopologyNode::gateway(
        1_000_000,
        "g",
        vec![TopologyNode::replica(1, "a"), TopologyNode::replica(2, "b"), TopologyNode::replica(3, "c")],
    )]);
    let links = flatten_topology(&gw, s).unwrap();
    assert_eq!(links.len(), 1);
    assert!(links.iter().all(|l| l.state == LinkState::Up));
    let fwd = forwarding_links(&gw, s).unwrap();
    assert_eq!(fwd.len(), 1);
    assert_eq!(fwd[0].1.len(), 3);

    // A gateway leaf and a repeated replica are both invalid trees.
    let leaf_gateway = TopologyNode::robot(vec![TopologyNode::gateway(1_000_000, "g", vec![])]);
    assert!(flatten_topology(&leaf_gateway, s).is_err());
    let repeated = TopologyNode::robot(vec![
        TopologyNode::replica(1, "a").with_children(vec![TopologyNode::replica(1, "a")]),
    ]);
    assert!(flatten_topology(&repeated, s).is_err());
}
