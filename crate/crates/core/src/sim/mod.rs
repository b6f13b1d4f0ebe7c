//! Seeded discrete-event simulation of a replicated deployment.
//!
//! A [`Scenario`] describes replicas, gateways, latency models, faults and a
//! workload. [`run_scenario`] drives the real proxy, registry, pool and
//! discovery state machines through virtual time and returns a
//! [`RunReport`]. The same scenario and seed always give the same report.
//!
//! Random draws come from per-node streams keyed by `(seed, label, id)` where
//! `id` is the replica id (see [`streams`]). Adding a replica or inserting a
//! zero-latency gateway leaves every other stream untouched.

mod engine;
mod report;
mod scenario;

use thiserror::Error;

use crate::latency::LatencyModel;

pub use engine::{run_scenario, FifoServer};
pub use report::{
    emit_report, write_cdf_csv, write_histogram_csv, write_requests_csv, write_summary_csv, Hop,
    RequestRecord, RequestStatus, RunCounters, RunReport, Summary, REQUESTS_HEADER,
    SUMMARY_HEADER,
};
pub use scenario::{
    Contention, Crash, FaultSpec, GatewaySpec, PoolSection, Preemption, RegionalSlowdown,
    ReplicaSpec, ReplicaTemplate, ScaleEvent, Scenario, ServiceSpec, Window, Workload,
    SCHEMA_VERSION,
};

/// Stream labels passed to [`crate::latency::stream_rng`].
pub mod streams {
    /// Service time at a replica, keyed by replica id.
    pub const SERVICE: &str = "service";
    /// Link from a node's parent toward the node.
    pub const NET_OUT: &str = "net-out";
    /// Link from a node back to its parent.
    pub const NET_BACK: &str = "net-back";
    /// Renewal-process preemption gaps.
    pub const PREEMPT: &str = "preempt";
    /// Robot client guid (id 0).
    pub const CLIENT: &str = "client";
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SimError {
    #[error("invalid scenario:\n  {}", .0.join("\n  "))]
    Validation(Vec<String>),
    #[error("scenario parse error: {0}")]
    Parse(String),
    #[error("{path}: {message}")]
    Io { path: String, message: String },
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("unsupported: {0}")]
    Unsupported(String),
}

/// Nearest-rank percentile: the value at 1-based rank `ceil(q * n)` of the
/// sorted samples.
pub fn percentile(samples: &[f64], q: f64) -> Result<f64, SimError> {
    if samples.is_empty() {
        return Err(SimError::InvalidArgument("no samples".into()));
    }
    if !(q > 0.0 && q <= 1.0) {
        return Err(SimError::InvalidArgument(format!("quantile {q} not in (0, 1]")));
    }
    if samples.iter().any(|v| v.is_nan()) {
        return Err(SimError::InvalidArgument("NaN sample".into()));
    }
    let mut sorted = samples.to_vec();
    sorted.sort_by(f64::total_cmp);
    Ok(sorted[nearest_rank(q, sorted.len()) - 1])
}

fn nearest_rank(q: f64, n: usize) -> usize {
    let raw = q * n as f64;
    // Guard against 0.29 * 100 = 28.999999999999996 style products.
    let rounded = raw.round();
    let rank = if (raw - rounded).abs() < 1e-9 * raw.max(1.0) {
        rounded
    } else {
        raw.ceil()
    };
    (rank as usize).clamp(1, n)
}

/// CDF of the minimum of `n` independent draws from `model`:
/// `1 - (1 - F(x))^n`.
pub fn min_of_n_cdf_oracle(model: &LatencyModel, n: u32, x_ms: f64) -> Result<f64, SimError> {
    if n == 0 {
        return Err(SimError::InvalidArgument("n must be positive".into()));
    }
    model.validate().map_err(SimError::InvalidArgument)?;
    let f = model.cdf(x_ms).ok_or_else(|| {
        SimError::Unsupported("empirical models have no closed-form CDF; resample instead".into())
    })?;
    Ok(1.0 - (1.0 - f).powi(n as i32))
}
