#![allow(dead_code)]

use ftproxy::latency::LatencyModel;
use ftproxy::pool::InstanceKind;
use ftproxy::sim::{
    FaultSpec, PoolSection, ReplicaSpec, Scenario, ServiceSpec, Workload,
};

/// Two-sided Kolmogorov-Smirnov distance between a sample and a CDF.
pub fn ks_distance(samples: &[f64], cdf: impl Fn(f64) -> f64) -> f64 {
    let mut xs = samples.to_vec();
    xs.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = xs.len() as f64;
    let mut d: f64 = 0.0;
    for (i, &x) in xs.iter().enumerate() {
        let f = cdf(x);
        d = d.max((i as f64 + 1.0) / n - f).max(f - i as f64 / n);
    }
    d
}

pub fn fixed(ms: f64) -> LatencyModel {
    LatencyModel::Fixed { ms }
}

pub fn exp(mean_ms: f64) -> LatencyModel {
    LatencyModel::Exponential { mean_ms }
}

pub fn lognormal(mu: f64, sigma: f64) -> LatencyModel {
    LatencyModel::Lognormal { mu, sigma }
}

pub fn replica(id: u64, region: &str, service: LatencyModel, network: LatencyModel) -> ReplicaSpec {
    ReplicaSpec {
        id: Some(id),
        provider: "aws".into(),
        region: region.into(),
        kind: InstanceKind::Spot,
        hourly_cost: 0.17,
        service,
        network,
        via: None,
    }
}

pub fn scenario(seed: u64, requests: u64, inter_arrival_ms: f64, timeout_ms: u64, replicas: Vec<ReplicaSpec>) -> Scenario {
    Scenario {
        schema_version: 1,
        name: "test".into(),
        seed,
        service: ServiceSpec {
            name: "svc".into(),
            protocol_version: 1,
            fingerprint: None,
        },
        workload: Workload {
            requests,
            inter_arrival_ms,
            timeout_ms,
            payload_bytes: 16,
        },
        pool: PoolSection::default(),
        replicas,
        gateways: Vec::new(),
        faults: FaultSpec::default(),
        events: Vec::new(),
        scale_template: None,
        trace: false,
    }
}
