//! List scheduler over in-order streams.
//!
//! Every device owns a compute stream and a wire stream. Operations are
//! submitted in a global topological order; each starts once its stream is
//! free and all of its dependencies have finished. With streams and
//! dependencies fixed, finish times are monotone in operation durations.

use serde::Serialize;

use crate::model::{Bytes, DeviceId};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Resource {
    Compute,
    Wire,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum EventKind {
    /// Context-independent layers (projections, MLP).
    Linear,
    /// Core attention.
    Attention,
    Dispatch,
    /// K/V of earlier nano-batches fetched ahead of dispatch.
    Prefetch,
    Return,
    Allgather,
    Forward,
    Backward,
}

impl EventKind {
    pub fn name(self) -> &'static str {
        match self {
            EventKind::Linear => "linear",
            EventKind::Attention => "attention",
            EventKind::Dispatch => "dispatch",
            EventKind::Prefetch => "prefetch",
            EventKind::Return => "return",
            EventKind::Allgather => "allgather",
            EventKind::Forward => "forward",
            EventKind::Backward => "backward",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct Event {
    pub device: DeviceId,
    pub resource: Resource,
    pub kind: EventKind,
    /// Layer, pipeline microbatch or tick, depending on the simulation.
    pub index: u32,
    /// Nano-batch within a layer.
    pub lane: u8,
    pub backward: bool,
    pub start: f64,
    pub end: f64,
    pub bytes: Bytes,
}

pub type OpId = usize;

#[derive(Clone, Copy, Debug)]
pub struct OpSpec {
    pub device: DeviceId,
    /// Stream the operation occupies.
    pub stream: Resource,
    /// Resource the time is billed to; differs from `stream` when transfers
    /// are serialized onto the compute stream.
    pub billed: Resource,
    pub kind: EventKind,
    pub index: u32,
    pub lane: u8,
    pub backward: bool,
    pub duration: f64,
    pub bytes: Bytes,
}

#[derive(Debug)]
pub struct Engine {
    free: Vec<[f64; 2]>,
    ends: Vec<f64>,
    events: Vec<Event>,
}

fn slot(r: Resource) -> usize {
    match r {
        Resource::Compute => 0,
        Resource::Wire => 1,
    }
}

impl Engine {
    pub fn new(devices: usize) -> Self {
        Self {
            free: vec![[0.0; 2]; devices],
            ends: Vec::new(),
            events: Vec::new(),
        }
    }

    pub fn end(&self, op: OpId) -> f64 {
        self.ends[op]
    }

    /// Submits an operation; zero-duration operations record no event but
    /// still order their dependents.
    pub fn submit(&mut self, spec: OpSpec, deps: impl IntoIterator<Item = OpId>) -> OpId {
        let ready = deps.into_iter().map(|d| self.ends[d]).fold(0.0, f64::max);
        let free = &mut self.free[spec.device][slot(spec.stream)];
        let start = free.max(ready);
        let end = start + spec.duration;
        if spec.duration > 0.0 {
            *free = end;
            self.events.push(Event {
                device: spec.device,
                resource: spec.billed,
                kind: spec.kind,
                index: spec.index,
                lane: spec.lane,
                backward: spec.backward,
                start,
                end,
                bytes: spec.bytes,
            });
        }
        self.ends.push(end);
        self.ends.len() - 1
    }

    pub fn into_events(self) -> Vec<Event> {
        self.events
    }
}

/// Total length of a union of intervals.
pub fn union_length(intervals: &mut [(f64, f64)]) -> f64 {
    intervals.sort_by(|a, b| a.0.total_cmp(&b.0));
    let mut total = 0.0;
    let mut cur: Option<(f64, f64)> = None;
    for &(s, e) in intervals.iter() {
        match cur {
            Some((cs, ce)) if s <= ce => cur = Some((cs, ce.max(e))),
            Some((cs, ce)) => {
                total += ce - cs;
                cur = Some((s, e));
            }
            None => cur = Some((s, e)),
        }
    }
    if let Some((cs, ce)) = cur {
        total += ce - cs;
    }
    total
}
