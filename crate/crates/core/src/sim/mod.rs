//! Deterministic timeline simulation of one training iteration.
//!
//! Data-parallel iterations replay every layer as compute and wire
//! operations on two in-order streams per device; pipeline iterations replay
//! a tick table of forward and backward stage passes.

mod dp;
pub mod engine;
mod pp;
mod trace;

use serde::{Deserialize, Serialize};

use crate::baselines::{memory_divergence, BaselineAssignment};
use crate::model::{Bytes, CaTask, DeviceId, Tokens};

pub use dp::simulate_dp_iteration;
pub use engine::{Event, EventKind, Resource};
pub use pp::{
    cad_phase_sync_table, one_f_one_b_ticks, simulate_pp_iteration, Microbatch, PpConfig, PpSchedule, TickPhase,
    TickTable,
};
pub use trace::{trace_json, write_trace};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum OverlapMode {
    /// Two nano-batches; transfers of one overlap compute of the other.
    #[default]
    PingPong,
    /// Ping-pong with every transfer shrunk to one byte per task.
    Signal,
    /// Transfers run on the compute stream, serialized with compute.
    SingleStream,
}

impl OverlapMode {
    pub const ALL: [OverlapMode; 3] = [OverlapMode::Signal, OverlapMode::PingPong, OverlapMode::SingleStream];

    pub fn name(self) -> &'static str {
        match self {
            OverlapMode::PingPong => "ping_pong",
            OverlapMode::Signal => "signal",
            OverlapMode::SingleStream => "single_stream",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SimConfig {
    pub mode: OverlapMode,
    /// Backward time as a multiple of forward time, for compute.
    pub backward_ratio: f64,
    /// Backward transfer volume as a multiple of forward volume.
    pub backward_comm_ratio: f64,
    /// Fixed cost of every non-empty transfer, seconds.
    pub latency_s: f64,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            mode: OverlapMode::PingPong,
            backward_ratio: 2.0,
            backward_comm_ratio: 2.0,
            latency_s: 5e-6,
        }
    }
}

impl SimConfig {
    pub fn with_mode(mode: OverlapMode) -> Self {
        Self {
            mode,
            ..Self::default()
        }
    }
}

/// Attention inputs moving between devices once per layer.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub struct Transfer {
    /// Nano-batch whose linear layers produce the data.
    pub lane: usize,
    pub from: DeviceId,
    pub to: DeviceId,
    pub bytes: Bytes,
}

/// Work of one nano-batch on every device, per layer.
#[derive(Clone, Debug, PartialEq, Default, Serialize)]
pub struct NanoBatch {
    pub ci_tokens: Vec<Tokens>,
    pub tasks: Vec<CaTask>,
    /// Q and K/V that attention on `to` needs from other devices. Data of an
    /// earlier nano-batch moves as soon as it exists.
    pub transfers: Vec<Transfer>,
    /// Transfers that block the compute stream before attention (all-gathers).
    pub blocking_bytes: Vec<Bytes>,
}

impl NanoBatch {
    pub fn empty(devices: usize) -> Self {
        Self {
            ci_tokens: vec![0; devices],
            tasks: Vec::new(),
            transfers: Vec::new(),
            blocking_bytes: vec![0; devices],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Default, Serialize)]
pub struct ExecutionPlan {
    pub lanes: Vec<NanoBatch>,
    pub memory: Vec<Bytes>,
}

impl ExecutionPlan {
    pub fn num_devices(&self) -> usize {
        self.memory.len()
    }

    /// A reference placement runs as one lane: no ping-pong.
    pub fn from_baseline(a: &BaselineAssignment) -> Self {
        let transfers = a
            .fetches
            .iter()
            .map(|&(from, to, bytes)| Transfer { lane: 0, from, to, bytes })
            .collect();
        Self {
            lanes: vec![NanoBatch {
                ci_tokens: a.per_device_tokens.clone(),
                tasks: a.tasks.clone(),
                transfers,
                blocking_bytes: a.allgather_bytes.clone(),
            }],
            memory: a.per_device_memory.clone(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct DeviceTimeline {
    pub device: DeviceId,
    pub busy_compute_s: f64,
    pub busy_comm_s: f64,
    pub overlapped_s: f64,
    pub idle_s: f64,
    pub completion_s: f64,
    pub peak_memory: Bytes,
    pub events: Vec<Event>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TimelineReport {
    pub iteration_s: f64,
    pub per_device: Vec<DeviceTimeline>,
    /// Mean idle time over iteration time.
    pub imbalance_idle_fraction: f64,
    pub total_wire_bytes: Bytes,
    pub memory_divergence: f64,
    /// Ticks of a pipeline schedule; `None` for data-parallel iterations.
    pub ticks: Option<usize>,
}

impl TimelineReport {
    pub fn peak_memory(&self) -> Bytes {
        self.per_device.iter().map(|d| d.peak_memory).max().unwrap_or(0)
    }

    pub fn events(&self) -> impl Iterator<Item = &Event> {
        self.per_device.iter().flat_map(|d| d.events.iter())
    }
}

pub(crate) fn build_report(devices: usize, events: Vec<Event>, memory: &[Bytes], ticks: Option<usize>) -> TimelineReport {
    let iteration_s = events.iter().map(|e| e.end).fold(0.0, f64::max);
    let mut per_device: Vec<DeviceTimeline> = (0..devices)
        .map(|device| DeviceTimeline {
            device,
            busy_compute_s: 0.0,
            busy_comm_s: 0.0,
            overlapped_s: 0.0,
            idle_s: 0.0,
            completion_s: 0.0,
            peak_memory: memory.get(device).copied().unwrap_or(0),
            events: Vec::new(),
        })
        .collect();
    let mut total_wire_bytes = 0;
    for e in events {
        let d = &mut per_device[e.device];
        match e.resource {
            Resource::Compute => d.busy_compute_s += e.end - e.start,
            Resource::Wire => {
                d.busy_comm_s += e.end - e.start;
                total_wire_bytes += e.bytes;
            }
        }
        d.completion_s = d.completion_s.max(e.end);
        d.events.push(e);
    }
    for d in &mut per_device {
        let mut spans: Vec<(f64, f64)> = d.events.iter().map(|e| (e.start, e.end)).collect();
        let union = engine::union_length(&mut spans);
        d.overlapped_s = (d.busy_compute_s + d.busy_comm_s - union).max(0.0);
        d.idle_s = (iteration_s - union).max(0.0);
    }
    let imbalance_idle_fraction = if iteration_s > 0.0 && devices > 0 {
        per_device.iter().map(|d| d.idle_s).sum::<f64>() / devices as f64 / iteration_s
    } else {
        0.0
    };
    TimelineReport {
        iteration_s,
        per_device,
        imbalance_idle_fraction,
        total_wire_bytes,
        memory_divergence: memory_divergence(memory),
        ticks,
    }
}
