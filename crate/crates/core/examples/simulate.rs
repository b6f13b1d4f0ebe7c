//! Hedging against a slow region, in virtual time.
//!
//! Runs the same workload against one replica and against two, with and
//! without an extra 100 ms on one region, and writes the reports of the last
//! run to a temporary directory.

use ftproxy::sim::{emit_report, min_of_n_cdf_oracle, run_scenario, RegionalSlowdown, Scenario};

const BASE: &str = r#"
schema_version = 1
name = "hedge-demo"
seed = 11

[service]
name = "detect"

[workload]
requests = 2000
inter_arrival_ms = 250
timeout_ms = 5000

[[replicas]]
region = "us-west-1"
hourly_cost = 0.17
service = { kind = "lognormal", mu = 4.0, sigma = 0.5 }
network = { kind = "fixed", ms = 10 }

[[replicas]]
region = "us-east-1"
hourly_cost = 0.17
service = { kind = "lognormal", mu = 4.0, sigma = 0.5 }
network = { kind = "fixed", ms = 10 }
"#;

fn main() {
    let pair = Scenario::from_toml(BASE).unwrap();
    let mut single = pair.clone();
    single.replicas.truncate(1);

    let slow = RegionalSlowdown {
        region: "us-west-1".into(),
        added_latency_ms: 100.0,
        start_ms: 0.0,
        end_ms: None,
    };
    let mut single_slow = single.clone();
    single_slow.faults.regional_slowdown.push(slow.clone());
    let mut pair_slow = pair.clone();
    pair_slow.faults.regional_slowdown.push(slow);

    println!("{:<22} {:>9} {:>9} {:>9} {:>8}", "deployment", "mean ms", "p50 ms", "p99 ms", "$");
    let mut last = None;
    for (label, s) in [
        ("single", &single),
        ("pair", &pair),
        ("single, slow region", &single_slow),
        ("pair, one slow region", &pair_slow),
    ] {
        let report = run_scenario(s).unwrap();
        let m = &report.summary;
        println!(
            "{label:<22} {:>9.1} {:>9.1} {:>9.1} {:>8.4}",
            m.mean_ms.unwrap(),
            m.p50_ms.unwrap(),
            m.p99_ms.unwrap(),
            m.cost
        );
        last = Some(report);
    }

    // Analytic check: P(service time of the faster of two <= 80 ms).
    let model = &pair.replicas[0].service;
    let p1 = min_of_n_cdf_oracle(model, 1, 80.0).unwrap();
    let p2 = min_of_n_cdf_oracle(model, 2, 80.0).unwrap();
    println!("\nP(service <= 80 ms): one replica {p1:.3}, faster of two {p2:.3}");

    let dir = std::env::temp_dir().join("ftproxy-simulate-example");
    emit_report(&last.unwrap(), &dir).unwrap();
    println!("reports in {}", dir.display());
}
