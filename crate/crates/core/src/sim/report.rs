//! Run reports and their CSV renderings.

use std::fmt::Write as _;
use std::fs;
use std::io::{self, Write};
use std::path::Path;
use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::clock::as_ms;
use crate::envelope::{MsgType, ReplicaId, RequestId};
use crate::pool::LifecycleEvent;

use super::{percentile, SimError};

pub const REQUESTS_HEADER: &str = "request_id,submit_ms,deliver_ms,latency_ms,winner,status";
pub const SUMMARY_HEADER: &str =
    "scenario,seed,submitted,delivered,timed_out,unavailable,mean_ms,p50_ms,p99_ms,success_rate,cost";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RequestStatus {
    Ok,
    ServiceError,
    Timeout,
    /// No UP link existed at submit time.
    Unavailable,
}

impl RequestStatus {
    pub fn as_str(&self) -> &'static str {
        match self {
            RequestStatus::Ok => "ok",
            RequestStatus::ServiceError => "service_error",
            RequestStatus::Timeout => "timeout",
            RequestStatus::Unavailable => "unavailable",
        }
    }

    /// A replica answered (successfully or not).
    pub fn is_delivered(&self) -> bool {
        matches!(self, RequestStatus::Ok | RequestStatus::ServiceError)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RequestRecord {
    pub request_id: RequestId,
    pub submit: Duration,
    /// Delivery or timeout time; `None` when unavailable.
    pub deliver: Option<Duration>,
    pub winner: Option<ReplicaId>,
    pub status: RequestStatus,
}

impl RequestRecord {
    pub fn latency(&self) -> Option<Duration> {
        self.deliver.map(|d| d.saturating_sub(self.submit))
    }

    pub fn latency_ms(&self) -> Option<f64> {
        self.latency().map(as_ms)
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub submitted: u64,
    pub delivered: u64,
    pub timed_out: u64,
    pub unavailable: u64,
    /// Over delivered requests; `None` when nothing was delivered.
    pub mean_ms: Option<f64>,
    pub p50_ms: Option<f64>,
    pub p99_ms: Option<f64>,
    pub success_rate: f64,
    pub cost: f64,
}

impl Summary {
    pub fn from_records(records: &[RequestRecord], cost: f64) -> Self {
        let count = |s: RequestStatus| records.iter().filter(|r| r.status == s).count() as u64;
        let latencies: Vec<f64> = records
            .iter()
            .filter(|r| r.status.is_delivered())
            .filter_map(|r| r.latency_ms())
            .collect();
        let submitted = records.len() as u64;
        let delivered = latencies.len() as u64;
        let mean_ms = (!latencies.is_empty())
            .then(|| latencies.iter().sum::<f64>() / latencies.len() as f64);
        Self {
            submitted,
            delivered,
            timed_out: count(RequestStatus::Timeout),
            unavailable: count(RequestStatus::Unavailable),
            mean_ms,
            p50_ms: percentile(&latencies, 0.5).ok(),
            p99_ms: percentile(&latencies, 0.99).ok(),
            success_rate: if submitted == 0 {
                0.0
            } else {
                delivered as f64 / submitted as f64
            },
            cost,
        }
    }
}

/// One frame moved between two nodes.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Hop {
    pub sent_at: Duration,
    pub arrive_at: Duration,
    /// `robot`, `r<id>` or a gateway name.
    pub from: String,
    pub to: String,
    pub msg_type: MsgType,
    pub bytes: Vec<u8>,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct RunCounters {
    pub frames_sent: u64,
    pub duplicates: u64,
    /// Responses that arrived after their tombstone was pruned.
    pub unknown: u64,
    /// Frames lost because the target node was down when they arrived.
    pub dropped_in_flight: u64,
    /// Requests a forwarding node dropped for lack of an UP child.
    pub dropped_no_child: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub scenario: String,
    pub seed: u64,
    pub records: Vec<RequestRecord>,
    pub summary: Summary,
    pub lifecycle: Vec<LifecycleEvent>,
    pub counters: RunCounters,
    /// Filled only when the scenario asks for a trace.
    pub trace: Vec<Hop>,
}

impl RunReport {
    pub fn latencies_ms(&self) -> Vec<f64> {
        self.records
            .iter()
            .filter(|r| r.status.is_delivered())
            .filter_map(|r| r.latency_ms())
            .collect()
    }

    pub fn requests_csv(&self) -> String {
        let mut out = Vec::new();
        write_requests_csv(self, &mut out).expect("writing to memory");
        String::from_utf8(out).expect("ascii")
    }

    pub fn summary_line(&self) -> String {
        summary_row(self)
    }
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.3}")).unwrap_or_default()
}

pub fn write_requests_csv<W: Write>(report: &RunReport, w: &mut W) -> io::Result<()> {
    writeln!(w, "{REQUESTS_HEADER}")?;
    for r in &report.records {
        writeln!(
            w,
            "{},{:.3},{},{},{},{}",
            r.request_id,
            as_ms(r.submit),
            fmt_opt(r.deliver.map(as_ms)),
            fmt_opt(r.latency_ms()),
            r.winner.map(|w| w.0.to_string()).unwrap_or_default(),
            r.status.as_str()
        )?;
    }
    Ok(())
}

fn summary_row(report: &RunReport) -> String {
    let s = &report.summary;
    format!(
        "{},{},{},{},{},{},{},{},{},{:.6},{:.6}",
        report.scenario,
        report.seed,
        s.submitted,
        s.delivered,
        s.timed_out,
        s.unavailable,
        fmt_opt(s.mean_ms),
        fmt_opt(s.p50_ms),
        fmt_opt(s.p99_ms),
        s.success_rate,
        s.cost
    )
}

pub fn write_summary_csv<W: Write>(report: &RunReport, w: &mut W) -> io::Result<()> {
    writeln!(w, "{SUMMARY_HEADER}")?;
    writeln!(w, "{}", summary_row(report))
}

/// Empirical CDF: one row per delivered request, sorted by latency.
pub fn write_cdf_csv<W: Write>(report: &RunReport, w: &mut W) -> io::Result<()> {
    let mut lat = report.latencies_ms();
    lat.sort_by(f64::total_cmp);
    writeln!(w, "latency_ms,cdf")?;
    let n = lat.len() as f64;
    for (i, x) in lat.iter().enumerate() {
        writeln!(w, "{x:.3},{:.6}", (i + 1) as f64 / n)?;
    }
    Ok(())
}

/// Equal-width latency histogram.
pub fn write_histogram_csv<W: Write>(report: &RunReport, bins: usize, w: &mut W) -> io::Result<()> {
    writeln!(w, "bin_start_ms,bin_end_ms,count")?;
    let lat = report.latencies_ms();
    if lat.is_empty() || bins == 0 {
        return Ok(());
    }
    let lo = lat.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = lat.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let width = if hi > lo { (hi - lo) / bins as f64 } else { 1.0 };
    let mut counts = vec![0u64; bins];
    for x in lat {
        let b = (((x - lo) / width) as usize).min(bins - 1);
        counts[b] += 1;
    }
    for (i, c) in counts.iter().enumerate() {
        let start = lo + i as f64 * width;
        writeln!(w, "{start:.3},{:.3},{c}", start + width)?;
    }
    Ok(())
}

pub const HISTOGRAM_BINS: usize = 50;

/// Writes `requests.csv`, `summary.csv`, `latency_cdf.csv`,
/// `latency_hist.csv` and `lifecycle.log` into `dir`, creating it if needed.
pub fn emit_report(report: &RunReport, dir: &Path) -> Result<(), SimError> {
    let io_err = |path: &Path, e: io::Error| SimError::Io {
        path: path.display().to_string(),
        message: e.to_string(),
    };
    fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
    let write = |name: &str, render: &dyn Fn(&mut Vec<u8>) -> io::Result<()>| {
        let path = dir.join(name);
        let mut buf = Vec::new();
        render(&mut buf).map_err(|e| io_err(&path, e))?;
        fs::write(&path, buf).map_err(|e| io_err(&path, e))
    };
    write("requests.csv", &|b| write_requests_csv(report, b))?;
    write("summary.csv", &|b| write_summary_csv(report, b))?;
    write("latency_cdf.csv", &|b| write_cdf_csv(report, b))?;
    write("latency_hist.csv", &|b| {
        write_histogram_csv(report, HISTOGRAM_BINS, b)
    })?;
    write("lifecycle.log", &|b| {
        let mut text = String::new();
        for e in &report.lifecycle {
            let _ = writeln!(text, "{}", e.log_line());
        }
        b.write_all(text.as_bytes())
    })?;
    Ok(())
}
