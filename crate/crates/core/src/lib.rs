//! Planning and simulation for pipeline-parallel LLM training on clusters
//! that mix accelerator types.
//!
//! Each chip type hosts a contiguous block of pipeline stages with its own
//! tensor-parallel degree, recompute setting and layer count, while a single
//! data-parallel degree spans the cluster. The crate provides:
//!
//! - an analytic iteration-time and memory model ([`cost`]),
//! - non-uniform layer sharding ([`sharding`]),
//! - depth-first plan search plus a brute-force reference ([`search`], [`oracle`]),
//! - transfer and resharding costs ([`comm`]),
//! - a 1F1B discrete-event simulator with trace export ([`sim`], [`trace`]),
//! - throughput metrics ([`metrics`]).

pub mod cluster;
pub mod comm;
pub mod cost;
pub mod instances;
pub mod io;
pub mod metrics;
pub mod oracle;
pub mod plan;
pub mod presets;
pub mod profile;
pub mod search;
pub mod sharding;
pub mod sim;
pub mod trace;

pub use cluster::{validate_cluster_spec, ChipTypeSpec, ClusterError, ClusterSpec, WorkloadSpec};
pub use comm::{
    assign_nics, p2p_transfer_time, resharding_time, CommConfig, LinkMode, LinkModel, ReshardMethod,
};
pub use cost::{
    check_plan_feasibility, estimate_iteration_time, stage_compute_time, stage_peak_memory,
    stage_update_time, CostBreakdown, Feasibility, StageCost, Violation,
};
pub use metrics::{hetero_speedup_ratio, mean_relative_error};
pub use oracle::{brute_force_oracle, OracleLimits};
pub use plan::{ParallelPlan, TypeAssignment};
pub use profile::{lookup_profile, synthesize_profile, ProfileEntry, ProfileError, ProfileTable};
pub use search::{
    enumerate_dp, feasible_tp_pp, search_plan, search_plan_with, two_stage_search, SearchError,
    SearchOptions, SearchResult, TwoStageResult,
};
pub use sharding::{equalize_layers, refine_layers, ShardingProblem};
pub use sim::{simulate_iteration, trace_metrics, ScheduleTrace, TraceMetrics};
pub use trace::export_trace;
