//! Deterministic simulator and token schedulers for expert-parallel
//! Mixture-of-Experts inference.
//!
//! ```text
//!  workload ──▶ Trace ──▶ engine::simulate_run ──▶ RunMetrics ──▶ reports
//!                              │
//!                    policies (placement, initial assign,
//!                    rebalance, even split, affinity)
//! ```
//!
//! Everything is count based: a layer is described by a [`RoutingMatrix`]
//! of tokens per (source GPU, expert), a policy turns it into a
//! [`ScheduleTensor`], and the engine turns that into per-GPU timelines
//! using an analytic cost model for compute, expert fetches and
//! all-to-all exchanges.

pub mod cli;
pub mod domain;
pub mod engine;
pub mod error;
pub mod metrics;
pub mod policies;
pub mod workload;

pub use domain::{ClusterSpec, ModelPreset, ModelSpec, Placement, RoutingMatrix, ScheduleTensor};
pub use engine::{simulate_layer, simulate_run, CostModel, LayerResult, SimFlags};
pub use error::{Error, Result};
pub use metrics::RunMetrics;
pub use policies::{Policy, SchedulerConfig};
pub use workload::{Trace, WorkloadSpec};
