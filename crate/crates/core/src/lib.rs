//! Analytical cluster simulator and scheduler for core attention
//! disaggregation in long-context transformer training.
//!
//! Documents are packed onto devices, their core-attention work is cut into
//! tasks and balanced across attention servers by a communication-aware
//! greedy scheduler, and the resulting plans are replayed on a two-resource
//! (compute, wire) timeline per device to produce iteration times, idle
//! fractions, memory and traffic reports.

pub mod baselines;
pub mod comm;
pub mod cost;
pub mod distca;
pub mod error;
pub mod experiment;
pub mod model;
pub mod num;
pub mod oracle;
pub mod profiler;
pub mod scheduler;
pub mod sim;
pub mod workload;

pub use baselines::{
    assign_fixed, assign_per_doc_cp, assign_varlen, assign_wlb_candidate, BaselineAssignment, Strategy,
};
pub use comm::{
    allgather_volume_cp, continuous_optimum, shard_count_upper_bound, task_comm_bytes, v_min_comm, CommQuery,
    ShardBound, ShardChoice,
};
pub use cost::{activation_memory, balance_conditions, ca_flops, linear_flops_per_token, CostCoefficients};
pub use error::{Error, Result};
pub use model::{
    derive_sizes, validate_chunking, Bytes, CaTask, Chunk, ChunkViolation, ClusterConfig, DeviceId, DocId, Document,
    Flops, Item, Layout, ModelConfig, Segment, Tokens,
};
pub use num::Scalar;
pub use scheduler::{
    classify_servers, propose_migration, schedule, schedule_pp_tick, target_load, write_plan_csv, ScheduleContext,
    SchedulePlan, SchedulerConfig, ServerLoad,
};
pub use workload::{pack_fixed, place_sequential, sample_batch, LengthDistribution, LengthKind, LengthSampler};

/// Profiler grid with double-precision latencies.
pub type ProfilerGrid = profiler::ProfilerGrid<f64>;
/// Profiler grid with single-precision latencies.
pub type ProfilerGridF32 = profiler::ProfilerGrid<f32>;
