//! How many spot replicas a target availability needs, and what the
//! deployment costs compared with one on-demand machine.

use ftproxy::sizing::{compare_plans, plan_replicas, system_failure_probability, CostPlan, VmFailureParams};

fn main() {
    // Preempted every 15 hours on average, 20 minutes to come back.
    let params = VmFailureParams::new(15.0 * 60.0, 20.0).unwrap();
    for target in [1e-2, 5e-4, 1e-6, 1e-9] {
        let plan = plan_replicas(params, target).unwrap();
        println!(
            "target {target:>7.0e}: p_vm {:.5}, {} replicas, p_system {:.3e}",
            plan.p_vm, plan.n_required, plan.p_system
        );
    }

    let mixed = system_failure_probability(&[0.02, 0.05, 0.1]).unwrap();
    println!("three mixed replicas fail together with p = {mixed:.1e}");

    // Hourly prices: one on-demand machine, two on-demand machines, two spot
    // machines. Ratios are against the cheapest plan.
    let fixture = include_str!("../fixtures/instance_costs.csv");
    println!("\n{:<16} {:>8} {:>8} {:>8}", "application", "single", "od pair", "spot");
    for line in fixture.lines().skip(1) {
        let f: Vec<&str> = line.split(',').collect();
        let single: f64 = f[2].parse().unwrap();
        let spot_pair: f64 = f[6].parse().unwrap();
        let rows = compare_plans(&[
            CostPlan::new("single", vec![single]),
            CostPlan::new("on-demand pair", vec![single, single]),
            CostPlan::new("spot pair", vec![spot_pair / 2.0, spot_pair / 2.0]),
        ])
        .unwrap();
        println!(
            "{:<16} {:>7.2}x {:>7.2}x {:>7.2}x",
            f[0], rows[0].ratio, rows[1].ratio, rows[2].ratio
        );
    }
}
