//! Discrete-event simulation of dynamic loop scheduling on heterogeneous
//! processor networks.
//!
//! Two families of schedulers share one engine ([`simcore`]): master-slave
//! chunk schedulers from the factoring family ([`schedulers_ms`]) and a
//! protocol in which every processor is an autonomous agent
//! ([`multiagent`]). Workloads are time-stepped sequences of parallel loops
//! ([`workload`]) run on a platform graph with latency, bandwidth and
//! per-message handling overhead ([`platform`]).

pub mod binpack;
pub mod cli;
pub mod error;
pub mod metrics_report;
pub mod multiagent;
pub mod platform;
pub mod rng;
pub mod schedulers_ms;
pub mod simcore;
pub mod time;
pub mod workload;

pub use error::{Error, Result};
pub use simcore::{run, run_with, Policy, RunMetrics, RunOptions, Trace};
pub use time::SimTime;
