//! Spot replicas preempted in turn and relaunched by the pool manager, with
//! the discovery directory and the running bill followed along the way.

use std::time::Duration;

use ftproxy::discovery::{DiscoveryConfig, LocalDiscovery, Registrar};
use ftproxy::envelope::{derive_service_identity, ReplicaId};
use ftproxy::latency::LatencyModel;
use ftproxy::pool::{PoolConfig, PoolManager, ScaleDirection};

fn main() {
    let sid = derive_service_identity("plan", &[0; 32], 1).unwrap();
    let config = PoolConfig {
        relaunch_delay: LatencyModel::Fixed { ms: 20.0 * 60.0 * 1000.0 },
        ..PoolConfig::default()
    };
    let mut pool = PoolManager::new(sid, config, 1).unwrap();
    let mut discovery = LocalDiscovery::new(DiscoveryConfig::default());
    let min = |m: u64| Duration::from_secs(m * 60);

    pool.launch(Duration::ZERO);
    let mut t = Duration::ZERO;
    let end = min(120);
    while t <= end {
        if t == min(10) {
            pool.preempt(ReplicaId(1), t).unwrap();
        }
        if t == min(50) {
            pool.preempt(ReplicaId(2), t).unwrap();
        }
        if t == min(100) {
            pool.scale(ScaleDirection::Up, 1, t, &mut discovery).unwrap();
        }
        pool.monitor_tick(t, &mut discovery);
        t += pool.config().monitor_interval;
    }

    for e in pool.log() {
        println!("{}", e.log_line());
    }
    let live = discovery.lookup(sid, end).unwrap();
    println!("\ndirectory at {} min: {} peers", end.as_secs() / 60, live.len());
    for r in pool.replicas() {
        println!("  {} {:<8} {:<10} {}", r.replica_id, r.region, r.state, r.endpoint);
    }
    println!("cost after 2 h: ${:.4}", pool.accrue_cost(end));
}
