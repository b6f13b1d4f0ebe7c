mod common;

use std::time::Duration;

use common::*;
use ftproxy::clock::from_ms;
use ftproxy::envelope::{Message, MsgType, ReplicaId, DEFAULT_MAX_FRAME};
use ftproxy::latency::{LatencyModel, LatencySampler};
use ftproxy::sim::{
    self, emit_report, min_of_n_cdf_oracle, percentile, run_scenario, streams, Contention, Crash, GatewaySpec,
    Preemption, RequestStatus, RunReport, Scenario,
};
use proptest::prelude::*;

fn sampler(model: &LatencyModel, seed: u64, label: &str, id: u64) -> LatencySampler {
    LatencySampler::keyed(model.clone(), seed, label, id)
}

/// Rebuilds each request's winning path from the per-replica streams. Valid
/// when every replica sees requests in submission order.
fn oracle_latencies(s: &Scenario) -> Vec<(Duration, u64)> {
    let mut per: Vec<(u64, LatencySampler, LatencySampler, LatencySampler)> = s
        .replica_ids()
        .iter()
        .zip(&s.replicas)
        .map(|(id, r)| {
            (
                id.0,
                sampler(&r.network, s.seed, streams::NET_OUT, id.0),
                sampler(&r.service, s.seed, streams::SERVICE, id.0),
                sampler(&r.network, s.seed, streams::NET_BACK, id.0),
            )
        })
        .collect();
    (0..s.workload.requests)
        .map(|_| {
            per.iter_mut()
                .map(|(id, out, svc, back)| (out.sample() + svc.sample() + back.sample(), *id))
                .min()
                .unwrap()
        })
        .collect()
}

#[test]
fn first_response_is_the_exact_minimum() {
    let s = scenario(
        17,
        3000,
        20.0,
        60_000,
        vec![
            replica(1, "a", exp(100.0), fixed(7.0)),
            replica(2, "b", exp(100.0), fixed(3.0)),
            replica(3, "c", lognormal(4.0, 0.8), fixed(11.0)),
        ],
    );
    let report = run_scenario(&s).unwrap();
    let oracle = oracle_latencies(&s);
    for (rec, (lat, winner)) in report.records.iter().zip(oracle) {
        assert_eq!(rec.latency(), Some(lat), "{}", rec.request_id);
        assert_eq!(rec.winner, Some(ReplicaId(winner)));
    }
}

#[test]
fn first_response_with_random_network_when_requests_do_not_overlap() {
    let s = scenario(
        5,
        500,
        20_000.0,
        10_000,
        vec![replica(1, "a", exp(50.0), exp(20.0)), replica(2, "b", exp(50.0), lognormal(2.0, 0.5))],
    );
    let report = run_scenario(&s).unwrap();
    for (rec, (lat, _)) in report.records.iter().zip(oracle_latencies(&s)) {
        assert_eq!(rec.latency(), Some(lat));
    }
}

fn subset(s: &Scenario, keep: &[u64]) -> Scenario {
    let mut t = s.clone();
    t.replicas.retain(|r| keep.contains(&r.id.unwrap()));
    t
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    // Coupled streams: removing replicas can only make each request slower.
    #[test]
    fn hedging_never_hurts(seed in any::<u64>(), mask in 1u8..7, inter in 5.0f64..200.0) {
        let full = scenario(
            seed,
            400,
            inter,
            60_000,
            vec![
                replica(1, "a", exp(80.0), exp(10.0)),
                replica(2, "b", lognormal(4.3, 0.6), fixed(12.0)),
                replica(3, "c", exp(120.0), fixed(2.0)),
            ],
        );
        let keep: Vec<u64> = (1..=3).filter(|i| mask & (1 << (i - 1)) != 0).collect();
        let a = run_scenario(&full).unwrap();
        let b = run_scenario(&subset(&full, &keep)).unwrap();
        for (x, y) in a.records.iter().zip(&b.records) {
            prop_assert!(x.latency().unwrap() <= y.latency().unwrap());
        }
        prop_assert!(a.summary.mean_ms.unwrap() <= b.summary.mean_ms.unwrap());
        prop_assert!(a.summary.p99_ms.unwrap() <= b.summary.p99_ms.unwrap());
    }

    #[test]
    fn requests_are_conserved(
        seed in any::<u64>(),
        n in 1usize..4,
        requests in 1u64..300,
        timeout in 50u64..400,
        crash_at in prop::option::of(0.0f64..20_000.0),
        preempt_at in prop::option::of(0.0f64..20_000.0),
        contended in any::<bool>(),
    ) {
        let replicas = (1..=n as u64).map(|i| replica(i, &format!("z{i}"), exp(60.0), exp(15.0))).collect();
        let mut s = scenario(seed, requests, 70.0, timeout, replicas);
        s.pool.relaunch_delay = fixed(3000.0);
        if let Some(at) = crash_at {
            s.faults.crash.push(Crash { replica: 1, at_ms: at });
        }
        if let Some(at) = preempt_at {
            s.faults.preemption.push(Preemption { replica: n as u64, at_ms: Some(at), mean_interval_ms: None });
        }
        if contended {
            s.faults.contention.push(Contention { replica: 1, period_ms: 90.0, service_ms: 40.0, start_ms: 0.0, end_ms: None });
        }
        let r = run_scenario(&s).unwrap();
        let m = &r.summary;
        prop_assert_eq!(m.submitted, requests);
        prop_assert_eq!(m.submitted, m.delivered + m.timed_out + m.unavailable);
        prop_assert_eq!(r.records.len() as u64, requests);
        prop_assert!((m.success_rate - m.delivered as f64 / m.submitted as f64).abs() < 1e-12);
        if let (Some(p50), Some(p99)) = (m.p50_ms, m.p99_ms) {
            prop_assert!(p50 <= p99);
        }
        for rec in &r.records {
            if rec.status == RequestStatus::Ok {
                prop_assert!(rec.latency().unwrap() <= Duration::from_millis(timeout));
            }
        }
    }

    #[test]
    fn percentile_matches_sort_and_index(xs in prop::collection::vec(-1e6f64..1e6, 1..200), q in 0.001f64..=1.0) {
        let mut sorted = xs.clone();
        sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let mut rank = 1;
        while (rank as f64) < q * xs.len() as f64 - 1e-9 {
            rank += 1;
        }
        prop_assert_eq!(percentile(&xs, q).unwrap(), sorted[rank - 1]);
    }
}

#[test]
fn percentile_examples() {
    assert_eq!(percentile(&[10.0, 20.0, 30.0, 40.0], 0.5).unwrap(), 20.0);
    let hundred: Vec<f64> = (1..=100).map(f64::from).collect();
    assert_eq!(percentile(&hundred, 0.99).unwrap(), 99.0);
    assert_eq!(percentile(&hundred, 1.0).unwrap(), 100.0);
    assert!(percentile(&[], 0.5).is_err());
    assert!(percentile(&[1.0], 0.0).is_err());
}

#[test]
fn min_of_n_identities() {
    let m = exp(100.0);
    for x in [1.0, 10.0, 50.0, 123.0, 700.0] {
        assert_eq!(min_of_n_cdf_oracle(&m, 1, x).unwrap(), m.cdf(x).unwrap());
        let half = 1.0 - (-x / 50.0f64).exp();
        assert!((min_of_n_cdf_oracle(&m, 2, x).unwrap() - half).abs() < 1e-12);
    }
    let ln = lognormal(4.0, 0.5);
    let f = ln.cdf(60.0).unwrap();
    assert!((min_of_n_cdf_oracle(&ln, 3, 60.0).unwrap() - (1.0 - (1.0 - f).powi(3))).abs() < 1e-12);
    assert_eq!(min_of_n_cdf_oracle(&fixed(5.0), 4, 4.999).unwrap(), 0.0);
    assert_eq!(min_of_n_cdf_oracle(&fixed(5.0), 4, 5.0).unwrap(), 1.0);
    let empirical = LatencyModel::Empirical { samples_ms: vec![1.0, 2.0] };
    assert!(min_of_n_cdf_oracle(&empirical, 2, 1.5).is_err());
}

#[test]
fn monte_carlo_min_of_three_lognormals() {
    let model = lognormal(4.0, 0.6);
    let s = scenario(
        99,
        20_000,
        1.0,
        60_000,
        (1..=3).map(|i| replica(i, "r", model.clone(), LatencyModel::zero())).collect(),
    );
    let lat = run_scenario(&s).unwrap().latencies_ms();
    let d = ks_distance(&lat, |x| min_of_n_cdf_oracle(&model, 3, x).unwrap());
    // 1.63 / sqrt(n) is the 1% critical value.
    assert!(d < 1.63 / (lat.len() as f64).sqrt(), "KS {d}");
}

/// Single FIFO server stepped one millisecond at a time. Competitor jobs
/// that arrive in the same millisecond as a robot job queue first.
fn tick_replay(robot: &[(u64, u64)], competitor: &[(u64, u64)], horizon: u64) -> Vec<u64> {
    let mut queue: std::collections::VecDeque<(Option<usize>, u64)> = Default::default();
    let mut current: Option<(Option<usize>, u64)> = None;
    let mut done = vec![0; robot.len()];
    for t in 0..horizon {
        for &(at, work) in competitor {
            if at == t {
                queue.push_back((None, work));
            }
        }
        for (i, &(at, work)) in robot.iter().enumerate() {
            if at == t {
                queue.push_back((Some(i), work));
            }
        }
        if current.is_none() {
            current = queue.pop_front();
        }
        // Zero-length jobs finish on arrival.
        while let Some((who, 0)) = current {
            if let Some(i) = who {
                done[i] = t;
            }
            current = queue.pop_front();
        }
        if let Some((who, left)) = current.as_mut() {
            *left -= 1;
            if *left == 0 {
                if let Some(i) = *who {
                    done[i] = t + 1;
                }
                current = None;
            }
        }
    }
    done
}

#[test]
fn contention_matches_a_tick_by_tick_queue() {
    for (period, work, svc, inter) in [(50u64, 20u64, 30u64, 40u64), (500, 300, 150, 700), (30, 25, 10, 15), (100, 0, 40, 45)] {
        let requests = 60u64;
        let mut s = scenario(1, requests, inter as f64, 1_000_000, vec![replica(1, "a", fixed(svc as f64), LatencyModel::zero())]);
        s.faults.contention.push(Contention { replica: 1, period_ms: period as f64, service_ms: work as f64, start_ms: 0.0, end_ms: None });
        let report = run_scenario(&s).unwrap();
        let robot: Vec<(u64, u64)> = (0..requests).map(|i| (i * inter, svc)).collect();
        let horizon = requests * inter + 100_000;
        let competitor: Vec<(u64, u64)> = (0..).map(|k| k * period).take_while(|t| *t < horizon).map(|t| (t, work)).collect();
        let done = tick_replay(&robot, &competitor, horizon);
        for (i, rec) in report.records.iter().enumerate() {
            let want = done[i] - robot[i].0;
            assert_eq!(rec.latency(), Some(Duration::from_millis(want)), "period {period} request {i}");
        }
    }
}

#[test]
fn contention_only_slows_the_contended_replica() {
    let mut s = scenario(2, 200, 300.0, 60_000, vec![replica(1, "a", fixed(50.0), fixed(5.0)), replica(2, "b", fixed(80.0), fixed(5.0))]);
    let calm = run_scenario(&s).unwrap();
    assert!(calm.records.iter().all(|r| r.winner == Some(ReplicaId(1))));
    s.faults.contention.push(Contention { replica: 1, period_ms: 100.0, service_ms: 90.0, start_ms: 0.0, end_ms: None });
    let busy = run_scenario(&s).unwrap();
    assert!(busy.records.iter().any(|r| r.winner == Some(ReplicaId(2))));
    assert!(busy.records.iter().all(|r| r.latency_ms().unwrap() <= 90.0 + 1e-9));
}

#[test]
fn same_seed_same_bytes() {
    for (_, text) in ftproxy::cli::BUNDLED_SCENARIOS {
        let mut s = Scenario::from_toml(text).unwrap();
        s.workload.requests = s.workload.requests.min(300);
        let a = run_scenario(&s).unwrap();
        let b = run_scenario(&s).unwrap();
        assert_eq!(a.requests_csv(), b.requests_csv());
        assert_eq!(a.summary_line(), b.summary_line());
        s.seed += 1;
        assert_ne!(run_scenario(&s).unwrap().requests_csv(), a.requests_csv());
    }
}

#[test]
fn adding_a_replica_leaves_existing_streams_alone() {
    let two = scenario(4, 200, 1000.0, 60_000, vec![replica(1, "a", exp(40.0), exp(9.0)), replica(2, "b", exp(40.0), exp(9.0))]);
    let mut three = two.clone();
    three.replicas.push(replica(3, "c", exp(1e6), fixed(0.0)));
    let a = run_scenario(&two).unwrap();
    let b = run_scenario(&three).unwrap();
    assert_eq!(a.requests_csv(), b.requests_csv());
}

fn gateway_scenario(hop_ms: f64) -> Scenario {
    let mut s = scenario(
        3,
        20,
        1000.0,
        5000,
        vec![replica(1, "a", fixed(20.0), fixed(hop_ms)), replica(2, "b", fixed(80.0), fixed(hop_ms))],
    );
    s.gateways.push(GatewaySpec { name: "gw".into(), region: "g".into(), network: fixed(hop_ms), via: None });
    for r in &mut s.replicas {
        r.via = Some("gw".into());
    }
    s.trace = true;
    s
}

#[test]
fn gateway_adds_two_round_trip_hops() {
    // 5 ms per hop there and back: 2.5 ms each way.
    let report = run_scenario(&gateway_scenario(2.5)).unwrap();
    for rec in &report.records {
        assert_eq!(rec.latency(), Some(from_ms(30.0)));
        assert_eq!(rec.winner, Some(ReplicaId(1)));
    }
    assert_eq!(report.counters.duplicates, 20);
}

#[test]
fn gateway_duplicates_requests_and_relays_responses_verbatim() {
    let report = run_scenario(&gateway_scenario(1.0)).unwrap();
    let first = &report.trace[..];
    let into_gw: Vec<_> = first.iter().filter(|h| h.from == "robot" && h.msg_type == MsgType::Request).collect();
    let from_gw: Vec<_> = first.iter().filter(|h| h.from == "gw" && h.msg_type == MsgType::Request).collect();
    assert_eq!(into_gw.len(), 20);
    assert_eq!(from_gw.len(), 40);
    for pair in from_gw.chunks(2) {
        assert_eq!(pair[0].bytes, pair[1].bytes);
        assert!(into_gw.iter().any(|h| h.bytes == pair[0].bytes));
    }
    let up: Vec<_> = first.iter().filter(|h| h.msg_type == MsgType::Response).collect();
    for relay in up.iter().filter(|h| h.from == "gw") {
        assert!(up.iter().any(|h| h.to == "gw" && h.bytes == relay.bytes));
    }
    let ids: Vec<_> = up
        .iter()
        .map(|h| match Message::decode_from(&mut h.bytes.as_slice(), DEFAULT_MAX_FRAME).unwrap() {
            Message::Response(r) => r.request_id,
            _ => unreachable!(),
        })
        .collect();
    assert_eq!(ids.len(), 80);
}

#[test]
fn replica_that_forwards_delivers_two_copies() {
    let mut s = scenario(8, 10, 1000.0, 5000, vec![replica(1, "a", fixed(30.0), fixed(4.0)), replica(2, "b", fixed(10.0), fixed(4.0))]);
    s.replicas[1].via = Some("r1".into());
    s.trace = true;
    let report = run_scenario(&s).unwrap();
    let at_robot = report.trace.iter().filter(|h| h.to == "robot" && h.msg_type == MsgType::Response).count();
    assert_eq!(at_robot, 20);
    assert_eq!(report.counters.duplicates, 10);
    // B answers first through A: 4 + 4 + 10 + 4 + 4.
    for rec in &report.records {
        assert_eq!(rec.winner, Some(ReplicaId(2)));
        assert_eq!(rec.latency(), Some(from_ms(26.0)));
    }
}

#[test]
fn one_replica_down_is_invisible() {
    let mut s = scenario(21, 1000, 50.0, 1000, vec![replica(1, "a", exp(100.0), fixed(5.0)), replica(2, "b", exp(100.0), fixed(5.0))]);
    s.faults.crash.push(Crash { replica: 2, at_ms: 25_010.0 });
    let r = run_scenario(&s).unwrap();
    assert_eq!(r.summary.delivered, 1000);
    assert!(r.records[600..].iter().all(|x| x.winner == Some(ReplicaId(1))));
}

#[test]
fn reports_on_disk() {
    let dir = tempfile::tempdir().unwrap();
    let one = scenario(1, 1, 10.0, 100, vec![replica(1, "a", fixed(1.0), LatencyModel::zero())]);
    let mut report = run_scenario(&one).unwrap();
    report.records.clear();
    emit_report(&report, dir.path()).unwrap();
    let csv = std::fs::read_to_string(dir.path().join("requests.csv")).unwrap();
    assert_eq!(csv, format!("{}\n", sim::REQUESTS_HEADER));

    let three = scenario(1, 3, 10.0, 100, vec![replica(1, "a", fixed(1.5), fixed(0.25))]);
    let report: RunReport = run_scenario(&three).unwrap();
    emit_report(&report, dir.path()).unwrap();
    let csv = std::fs::read_to_string(dir.path().join("requests.csv")).unwrap();
    let rows: Vec<&str> = csv.lines().skip(1).collect();
    assert_eq!(rows.len(), 3);
    for (i, row) in rows.iter().enumerate() {
        let cols: Vec<&str> = row.split(',').collect();
        assert_eq!(cols[1], format!("{:.3}", i as f64 * 10.0));
        assert_eq!(cols[2], format!("{:.3}", i as f64 * 10.0 + 2.0));
        assert_eq!(&cols[3..], ["2.000", "1", "ok"]);
    }
    let summary = std::fs::read_to_string(dir.path().join("summary.csv")).unwrap();
    assert_eq!(summary.lines().next(), Some(sim::SUMMARY_HEADER));
    assert!(summary.lines().nth(1).unwrap().starts_with("test,1,3,3,0,0,2.000,2.000,2.000,1.000000,"));

    let blocked = dir.path().join("file");
    std::fs::write(&blocked, "").unwrap();
    let err = emit_report(&report, &blocked.join("sub")).unwrap_err();
    assert!(err.to_string().contains("file"), "{err}");
}
