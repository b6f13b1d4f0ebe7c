use ftproxy::envelope::{
    decode_frame, derive_service_identity, encode_frame, Endpoint, FrameDecoder, Message, MsgType,
    ReplicaId, RequestEnvelope, RequestId, RequestIdGenerator, ResponseEnvelope, ResponseStatus,
    ServiceIdentity, WireError, DEFAULT_MAX_FRAME,
};
use proptest::prelude::*;

fn msg_type() -> impl Strategy<Value = MsgType> {
    (1u8..=6).prop_map(|v| MsgType::from_u8(v).unwrap())
}

fn sid() -> impl Strategy<Value = ServiceIdentity> {
    any::<[u8; 32]>().prop_map(ServiceIdentity)
}

fn message() -> impl Strategy<Value = Message> {
    let endpoint = "[a-z0-9.:/]{0,40}".prop_map(Endpoint::new);
    prop_oneof![
        (any::<u64>(), any::<u64>(), sid(), any::<u32>(), prop::collection::vec(any::<u8>(), 0..256)).prop_map(
            |(g, s, service_id, deadline_ms, payload)| Message::Request(RequestEnvelope {
                request_id: RequestId::new(g, s),
                service_id,
                deadline_ms,
                payload,
            })
        ),
        (any::<u64>(), any::<u64>(), any::<u64>(), any::<bool>(), prop::collection::vec(any::<u8>(), 0..256)).prop_map(
            |(g, s, r, ok, payload)| Message::Response(ResponseEnvelope {
                request_id: RequestId::new(g, s),
                replica_id: ReplicaId(r),
                status: if ok { ResponseStatus::Ok } else { ResponseStatus::ServiceError },
                payload,
            })
        ),
        (sid(), any::<u64>()).prop_map(|(service_id, r)| Message::Heartbeat { service_id, replica_id: ReplicaId(r) }),
        (sid(), any::<u64>()).prop_map(|(service_id, r)| Message::DisconnectReport { service_id, replica_id: ReplicaId(r) }),
        (sid(), any::<u64>(), endpoint.clone()).prop_map(|(service_id, r, endpoint)| Message::Register {
            service_id,
            replica_id: ReplicaId(r),
            endpoint,
        }),
        sid().prop_map(|service_id| Message::PeerQuery { service_id }),
        (sid(), prop::collection::vec((endpoint, any::<u64>()), 0..6)).prop_map(|(service_id, peers)| {
            Message::PeerList {
                service_id,
                peers: peers.into_iter().map(|(e, r)| (e, ReplicaId(r))).collect(),
            }
        }),
    ]
}

proptest! {
    #[test]
    fn frame_round_trip(t in msg_type(), body in prop::collection::vec(any::<u8>(), 0..2048)) {
        let bytes = encode_frame(t, &body).unwrap();
        prop_assert_eq!(bytes.len(), 8 + body.len());
        let mut input = bytes.as_slice();
        let frame = decode_frame(&mut input).unwrap();
        prop_assert_eq!(frame.msg_type, t);
        prop_assert_eq!(frame.body, body);
        prop_assert!(input.is_empty());
    }

    #[test]
    fn concatenated_frames_decode_in_order(
        a in (msg_type(), prop::collection::vec(any::<u8>(), 0..64)),
        b in (msg_type(), prop::collection::vec(any::<u8>(), 0..64)),
        tail in prop::collection::vec(any::<u8>(), 0..8),
    ) {
        let mut bytes = encode_frame(a.0, &a.1).unwrap();
        bytes.extend(encode_frame(b.0, &b.1).unwrap());
        bytes.extend(&tail);
        let mut input = bytes.as_slice();
        let fa = decode_frame(&mut input).unwrap();
        let fb = decode_frame(&mut input).unwrap();
        prop_assert_eq!((fa.msg_type, fa.body), a);
        prop_assert_eq!((fb.msg_type, fb.body), b);
        prop_assert_eq!(input, tail.as_slice());
    }

    #[test]
    fn truncation_is_resumable(body in prop::collection::vec(any::<u8>(), 0..64), cut_frac in 0.0f64..1.0) {
        let bytes = encode_frame(MsgType::Response, &body).unwrap();
        let cut = ((bytes.len() as f64) * cut_frac) as usize;
        let mut input = &bytes[..cut];
        let err = decode_frame(&mut input).unwrap_err();
        prop_assert!(err.is_resumable(), "{:?}", err);
        prop_assert_eq!(input.len(), cut);
    }

    #[test]
    fn chunked_stream_yields_every_frame(
        frames in prop::collection::vec((msg_type(), prop::collection::vec(any::<u8>(), 0..40)), 1..6),
        chunk in 1usize..17,
    ) {
        let stream: Vec<u8> = frames.iter().flat_map(|(t, b)| encode_frame(*t, b).unwrap()).collect();
        let mut dec = FrameDecoder::new(DEFAULT_MAX_FRAME);
        let mut got = Vec::new();
        for piece in stream.chunks(chunk) {
            dec.push(piece);
            while let Some(f) = dec.next_frame().unwrap() {
                got.push((f.msg_type, f.body));
            }
        }
        prop_assert_eq!(got, frames);
        prop_assert_eq!(dec.buffered(), 0);
    }

    #[test]
    fn message_round_trip(m in message()) {
        let bytes = m.to_frame(DEFAULT_MAX_FRAME).unwrap();
        let back = Message::decode_from(&mut bytes.as_slice(), DEFAULT_MAX_FRAME).unwrap();
        prop_assert_eq!(back, m);
    }

    #[test]
    fn identity_is_a_function_of_its_inputs(name in "[a-z_]{1,16}", fp in any::<[u8; 32]>(), v in any::<u32>()) {
        let a = derive_service_identity(&name, &fp, v).unwrap();
        prop_assert_eq!(a, derive_service_identity(&name, &fp, v).unwrap());
        let other = format!("{name}x");
        prop_assert_ne!(a, derive_service_identity(&other, &fp, v).unwrap());
    }
}

#[test]
fn spec_frame_bytes() {
    assert_eq!(encode_frame(MsgType::Request, &[]).unwrap(), [0xF6, 0x2F, 1, 1, 0, 0, 0, 0]);
    assert_eq!(
        encode_frame(MsgType::Response, &[0xAA, 0xBB, 0xCC]).unwrap(),
        [0xF6, 0x2F, 1, 2, 0, 0, 0, 3, 0xAA, 0xBB, 0xCC]
    );
}

#[test]
fn malformed_headers() {
    let mut input: &[u8] = &[0x00, 0x2F, 1, 1, 0, 0, 0, 0];
    assert!(matches!(decode_frame(&mut input), Err(WireError::Protocol(_))));
    let mut input: &[u8] = &[0xF6, 0x2F, 2, 1, 0, 0, 0, 0];
    assert_eq!(decode_frame(&mut input), Err(WireError::VersionMismatch(2)));
    let mut input: &[u8] = &[0xF6, 0x2F, 1, 7, 0, 0, 0, 0];
    assert!(matches!(decode_frame(&mut input), Err(WireError::Protocol(_))));
    let mut input: &[u8] = &[0xF6, 0x2F, 1, 0, 0, 0, 0, 0];
    assert!(matches!(decode_frame(&mut input), Err(WireError::Protocol(_))));
}

// Pinned with Python's hashlib over the length-prefixed encoding.
#[test]
fn identity_golden_values_with_zero_fingerprint() {
    let zero = [0u8; 32];
    let hex = |n: &str| derive_service_identity(n, &zero, 1).unwrap().to_hex();
    assert_eq!(hex("grasp"), "8be1159641a39a3c8e1002226515754d1cfadddddb040666cb71065f5981f7ad");
    assert_eq!(hex("grasp2"), "da667bac163dc698a4ddb7eada165d30abca24242d8e86a071c5d4c807eb8f3e");
    assert_eq!(hex("motion_plan"), "8747c5fd34e0ff29add5dc9db7b957cceaac29946627c06eba2f05e919ee6f5f");
    assert!(derive_service_identity("", &zero, 1).is_err());
}

#[test]
fn request_ids_are_unique_under_concurrency() {
    let gen = std::sync::Arc::new(RequestIdGenerator::new(42));
    let handles: Vec<_> = (0..8)
        .map(|_| {
            let g = gen.clone();
            std::thread::spawn(move || (0..5_000).map(|_| g.next_id()).collect::<Vec<_>>())
        })
        .collect();
    let mut all: Vec<RequestId> = handles.into_iter().flat_map(|h| h.join().unwrap()).collect();
    for per_thread in all.chunks(5_000) {
        assert!(per_thread.windows(2).all(|w| w[0].sequence < w[1].sequence));
    }
    all.sort();
    all.dedup();
    assert_eq!(all.len(), 40_000);
}

#[test]
fn synthetic_timeouts_never_reach_the_wire() {
    let m = Message::Response(ResponseEnvelope::timeout(RequestId::new(1, 1)));
    assert!(m.to_frame(DEFAULT_MAX_FRAME).is_err());
}

#[test]
fn oversize_payload_is_refused() {
    let m = Message::Request(RequestEnvelope {
        request_id: RequestId::new(1, 1),
        service_id: ServiceIdentity([0; 32]),
        deadline_ms: 0,
        payload: vec![0; 1024],
    });
    assert!(matches!(m.to_frame(512), Err(WireError::FrameTooLarge { .. })));
}
