//! Replicated request fan-out with first-response delivery.
//!
//! A robot-side proxy sends every request to all replicas of a stateless
//! service and hands the caller only the first response. Around that core
//! this crate provides:
//!
//! - [`envelope`]: service identities, request ids and the framed wire format
//! - [`registry`]: the exactly-once pending-request table
//! - [`proxy`]: robot, replica and gateway proxy roles plus topology flattening
//! - [`discovery`]: the metadata server that maps identities to endpoints
//! - [`pool`]: replica lifecycle management with spot preemption recovery
//! - [`sizing`]: failure-probability, replica-count and cost arithmetic
//! - [`sim`]: a seeded discrete-event harness for latency and fault experiments
//! - [`net`]: the same proxies over TCP with wall-clock time
//! - [`cli`]: the `ftproxy` command line (launch, scale, size, simulate, report)
//!
//! Runnable walkthroughs for each piece live in `examples/`:
//!
//! ```bash
//! cargo run -p ftproxy --example hedged_fanout
//! ```

pub mod cli;
pub mod clock;
pub mod discovery;
pub mod envelope;
pub mod latency;
pub mod net;
pub mod pool;
pub mod proxy;
pub mod registry;
pub mod sim;
pub mod sizing;
