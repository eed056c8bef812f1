//! Core-attention disaggregation plans.
//!
//! The batch is cut into two nano-batches of equal token count and similar
//! attention work; at most one document spans both, its head in the first.
//! Each nano-batch is spread over the devices sequentially with the same
//! number of tokens per device, so every device computes the same number of
//! tokens for the context-independent layers and holds the same activation
//! memory. A nano-batch only attends to tokens of itself or of the
//! nano-batch before it. The attention items of each nano-batch are balanced
//! across all devices by the scheduler.

use std::collections::{BTreeMap, BTreeSet};

use serde::Serialize;

use crate::cost::CostCoefficients;
use crate::error::{Error, Result};
use crate::model::{Chunk, DeviceId, DocId, Document, Item, ModelConfig, Segment, Tokens};
use crate::scheduler::{schedule, ScheduleContext, SchedulePlan, SchedulerConfig};
use crate::sim::{ExecutionPlan, NanoBatch, Transfer};

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct DistcaPlan {
    pub chunks: Vec<Chunk>,
    /// One schedule per nano-batch.
    pub schedules: Vec<SchedulePlan>,
    pub execution: ExecutionPlan,
}

/// Where each piece of a document lives: `(lane, device, start, end)`.
type Placement = BTreeMap<DocId, Vec<(usize, DeviceId, Tokens, Tokens)>>;

/// Lays the stream `pieces` out over `devices`, `per_device` tokens each.
fn place_stream(pieces: &[Segment], devices: usize, per_device: Tokens) -> Vec<Vec<Segment>> {
    let mut out = vec![Vec::new(); devices];
    let (mut device, mut room) = (0, per_device);
    for piece in pieces {
        let mut start = piece.start;
        while start < piece.end {
            if room == 0 {
                device += 1;
                room = per_device;
            }
            let take = room.min(piece.end - start);
            out[device].push(Segment {
                doc: piece.doc,
                start,
                end: start + take,
            });
            start += take;
            room -= take;
        }
    }
    out
}

/// Splits the documents into two streams of exactly `capacity` tokens with
/// similar attention work. Longest documents go first to the lighter stream
/// with room; the one document fitting in neither has its head end the first
/// stream and its tail start the second. Streams keep the input order.
fn split_lanes(documents: &[Document], capacity: [Tokens; 2]) -> [Vec<Segment>; 2] {
    let mut order: Vec<usize> = (0..documents.len()).collect();
    order.sort_by_key(|&i| (std::cmp::Reverse(documents[i].length), i));
    let mut lane_of = vec![0; documents.len()];
    let mut room = capacity;
    let mut work = [0u128; 2];
    let mut split = None;
    for i in order {
        let l = documents[i].length;
        let lighter = usize::from(work[1] < work[0]);
        let lane = if room[lighter] >= l {
            lighter
        } else if room[1 - lighter] >= l {
            1 - lighter
        } else {
            split = Some((i, room[0]));
            room = [0, room[1] - (l - room[0])];
            continue;
        };
        lane_of[i] = lane;
        room[lane] -= l;
        work[lane] += (l as u128).pow(2);
    }
    let mut streams: [Vec<Segment>; 2] = [Vec::new(), Vec::new()];
    for (i, d) in documents.iter().enumerate() {
        if split.map_or(true, |(s, _)| s != i) {
            streams[lane_of[i]].push(Segment { doc: d.id, start: 0, end: d.length });
        }
    }
    if let Some((i, head)) = split {
        let d = &documents[i];
        streams[0].push(Segment { doc: d.id, start: 0, end: head });
        streams[1].insert(0, Segment { doc: d.id, start: head, end: d.length });
    }
    streams.map(|s| s.into_iter().filter(|seg| seg.start < seg.end).collect())
}

pub fn plan_distca(
    documents: &[Document],
    devices: usize,
    tokens_per_device: Tokens,
    model: &ModelConfig,
    coeff: &CostCoefficients,
    config: &SchedulerConfig,
) -> Result<DistcaPlan> {
    let total: Tokens = documents.iter().map(|d| d.length).sum();
    if devices == 0 || tokens_per_device == 0 || total != tokens_per_device * devices as Tokens {
        return Err(Error::config(format!(
            "documents hold {total} tokens but {devices} x {tokens_per_device} are required"
        )));
    }
    let lens: BTreeMap<DocId, Tokens> = documents.iter().map(|d| (d.id, d.length)).collect();
    let per_lane = [tokens_per_device.div_ceil(2), tokens_per_device / 2];

    let streams = split_lanes(documents, [per_lane[0] * devices as Tokens, per_lane[1] * devices as Tokens]);

    let mut chunks: Vec<Chunk> = (0..devices).map(Chunk::new).collect();
    let mut placement: Placement = BTreeMap::new();
    let mut lane_segments = Vec::with_capacity(2);
    for (lane, stream) in streams.iter().enumerate() {
        let placed = if per_lane[lane] == 0 {
            vec![Vec::new(); devices]
        } else {
            place_stream(stream, devices, per_lane[lane])
        };
        for (device, segs) in placed.iter().enumerate() {
            for s in segs {
                chunks[device].segments.push(*s);
                placement.entry(s.doc).or_default().push((lane, device, s.start, s.end));
            }
        }
        lane_segments.push(placed);
    }

    let ctx = ScheduleContext { model, coeff, config };
    let mut schedules = Vec::with_capacity(2);
    let mut lanes = Vec::with_capacity(2);
    for (lane, placed) in lane_segments.iter().enumerate() {
        let mut nano = NanoBatch::empty(devices);
        let mut items = Vec::new();
        // Start of the segment of each (doc, device) in this nano-batch.
        let mut seg_start = BTreeMap::new();
        for (device, segs) in placed.iter().enumerate() {
            for s in segs {
                nano.ci_tokens[device] += s.len();
                items.push(Item::contiguous(s.doc, lens[&s.doc], s.start, s.end, device)?);
                seg_start.insert((s.doc, device), s.start);
            }
        }
        let plan = schedule(&items, devices, &ctx);
        // Each holder of the prefix sends its K/V to every server once.
        let mut sent = BTreeSet::new();
        for task in &plan.tasks {
            let (item, server) = (&task.item, task.assigned_server);
            let start = seg_start[&(item.doc, item.home)];
            if server != item.home {
                nano.transfers.push(Transfer {
                    lane,
                    from: item.home,
                    to: server,
                    bytes: item.n_q() * model.size_q + (item.q_end - start) * model.size_kv,
                });
            }
            for &(l, from, a, b) in &placement[&item.doc] {
                if b <= start && from != server && sent.insert((item.doc, l, from, server)) {
                    nano.transfers.push(Transfer { lane: l, from, to: server, bytes: (b - a) * model.size_kv });
                }
            }
        }
        nano.tasks = plan.tasks.clone();
        schedules.push(plan);
        lanes.push(nano);
    }
    let memory = chunks.iter().map(|c| c.total_tokens() * coeff.gamma_mem).collect();
    Ok(DistcaPlan {
        chunks,
        schedules,
        execution: ExecutionPlan { lanes, memory },
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cost::ca_flops;
    use crate::model::validate_chunking;

    fn docs(lengths: &[Tokens]) -> Vec<Document> {
        lengths.iter().enumerate().map(|(i, &l)| Document::new(i as u64, l)).collect()
    }

    #[test]
    fn lanes_cover_every_token_and_flop() {
        let model = ModelConfig::llama_8b();
        let coeff = CostCoefficients::from_model(&model);
        let docs = docs(&[6000, 1000, 500, 500, 200, 7800]);
        let p = plan_distca(&docs, 4, 4000, &model, &coeff, &SchedulerConfig::default()).unwrap();
        assert!(validate_chunking(&docs, &p.chunks).is_ok());
        let flops: u128 = p.schedules.iter().map(|s| s.total_flops()).sum();
        let expect: u128 = docs.iter().map(|d| ca_flops(&Item::whole(d, 0), &coeff)).sum();
        assert_eq!(flops, expect);
        assert!(p.execution.memory.iter().all(|&m| m == p.execution.memory[0]));
        for lane in &p.execution.lanes {
            assert!(lane.ci_tokens.iter().all(|&t| t == 2000));
        }
    }

    #[test]
    fn split_document_puts_its_head_in_the_first_lane() {
        let model = ModelConfig::llama_8b();
        let coeff = CostCoefficients::new(1, 0, 1);
        let p = plan_distca(&docs(&[3000, 1000]), 2, 2000, &model, &coeff, &SchedulerConfig::default()).unwrap();
        // Lane 0 holds doc 0 [0, 2000); lane 1 holds doc 0 [2000, 3000) and doc 1.
        assert_eq!(p.chunks[0].segments, vec![Segment { doc: 0, start: 0, end: 1000 }, Segment { doc: 0, start: 2000, end: 3000 }]);
        assert_eq!(p.chunks[1].segments, vec![Segment { doc: 0, start: 1000, end: 2000 }, Segment { doc: 1, start: 0, end: 1000 }]);
    }

    #[test]
    fn token_mismatch_is_rejected() {
        let model = ModelConfig::llama_8b();
        let coeff = CostCoefficients::from_model(&model);
        assert!(plan_distca(&docs(&[100]), 2, 100, &model, &coeff, &SchedulerConfig::default()).is_err());
    }
}
