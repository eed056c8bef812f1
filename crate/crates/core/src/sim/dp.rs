use std::collections::BTreeSet;

use super::engine::{Engine, EventKind, OpId, OpSpec, Resource};
use super::{build_report, ExecutionPlan, NanoBatch, OverlapMode, SimConfig, TimelineReport};
use crate::comm::output_bytes;
use crate::cost::{linear_flops_split, CostCoefficients};
use crate::model::{Bytes, ClusterConfig, DeviceId, ModelConfig};

/// Per-lane quantities derived once from the plan.
struct LaneCost {
    tokens: Vec<f64>,
    attention_s: Vec<f64>,
    dispatch_send: Vec<Bytes>,
    dispatch_recv: Vec<Bytes>,
    prefetch_send: Vec<Bytes>,
    prefetch_recv: Vec<Bytes>,
    return_send: Vec<Bytes>,
    return_recv: Vec<Bytes>,
    blocking: Vec<Bytes>,
    /// Devices sending this lane's data to `d`.
    senders: Vec<Vec<DeviceId>>,
    /// `(lane, device)` sending earlier lanes' data to `d`.
    presenders: Vec<Vec<(usize, DeviceId)>>,
    /// Devices running items of `d`.
    servers: Vec<Vec<DeviceId>>,
}

fn lane_cost(
    k: usize,
    lane: &NanoBatch,
    devices: usize,
    model: &ModelConfig,
    coeff: &CostCoefficients,
    cluster: &ClusterConfig,
    signal: bool,
) -> LaneCost {
    let attn_rate = cluster.mfu_attention * cluster.device_peak_flops();
    let shrink = |b: Bytes| if signal { b.min(1) } else { b };
    let mut work = vec![0u128; devices];
    let mut has_task = vec![false; devices];
    let mut senders = vec![BTreeSet::new(); devices];
    let mut presenders = vec![BTreeSet::new(); devices];
    let mut servers = vec![BTreeSet::new(); devices];
    let mut c = LaneCost {
        tokens: lane.ci_tokens.iter().map(|&t| t as f64).collect(),
        attention_s: vec![0.0; devices],
        dispatch_send: vec![0; devices],
        dispatch_recv: vec![0; devices],
        prefetch_send: vec![0; devices],
        prefetch_recv: vec![0; devices],
        return_send: vec![0; devices],
        return_recv: vec![0; devices],
        blocking: lane.blocking_bytes.iter().map(|&b| shrink(b)).collect(),
        senders: Vec::new(),
        presenders: Vec::new(),
        servers: Vec::new(),
    };
    for t in lane.transfers.iter().filter(|t| t.from != t.to && t.bytes > 0) {
        let bytes = shrink(t.bytes);
        if t.lane < k {
            c.prefetch_send[t.from] += bytes;
            c.prefetch_recv[t.to] += bytes;
            presenders[t.to].insert((t.lane, t.from));
        } else {
            c.dispatch_send[t.from] += bytes;
            c.dispatch_recv[t.to] += bytes;
            senders[t.to].insert(t.from);
        }
    }
    for t in &lane.tasks {
        let (src, dst) = (t.source_device, t.assigned_server);
        work[dst] += t.item.padded_work(cluster.tile_size);
        has_task[dst] = true;
        if src != dst {
            let back = shrink(output_bytes(&t.item, model));
            c.return_send[dst] += back;
            c.return_recv[src] += back;
            servers[src].insert(dst);
        }
    }
    for d in 0..devices {
        if has_task[d] {
            c.attention_s[d] = cluster.kernel_overhead_s + (coeff.alpha_ca as f64 * work[d] as f64) / attn_rate;
        }
    }
    c.senders = senders.into_iter().map(|s| s.into_iter().collect()).collect();
    c.presenders = presenders.into_iter().map(|s| s.into_iter().collect()).collect();
    c.servers = servers.into_iter().map(|s| s.into_iter().collect()).collect();
    c
}

/// Replays every layer forward and backward; the iteration ends at the
/// gradient barrier, when the slowest device finishes.
pub fn simulate_dp_iteration(
    plan: &ExecutionPlan,
    model: &ModelConfig,
    coeff: &CostCoefficients,
    cluster: &ClusterConfig,
    cfg: &SimConfig,
) -> TimelineReport {
    let devices = plan.num_devices();
    let signal = cfg.mode == OverlapMode::Signal;
    let wire_stream = if cfg.mode == OverlapMode::SingleStream {
        Resource::Compute
    } else {
        Resource::Wire
    };
    let lanes: Vec<LaneCost> = plan
        .lanes
        .iter()
        .enumerate()
        .map(|(k, l)| lane_cost(k, l, devices, model, coeff, cluster, signal))
        .collect();
    let linear_rate = cluster.mfu_linear * cluster.device_peak_flops();
    let (pre, post) = linear_flops_split(model);
    let (pre_s, post_s) = (pre as f64 / linear_rate, post as f64 / linear_rate);
    let bandwidth = cluster.device_bandwidth();
    let layers = model.num_layers as usize;

    let mut engine = Engine::new(devices);
    let none = usize::MAX;
    let mut returns: Vec<Vec<OpId>> = vec![vec![none; devices]; lanes.len()];

    for backward in [false, true] {
        let scale = if backward { cfg.backward_ratio } else { 1.0 };
        let comm_scale = if backward { cfg.backward_comm_ratio } else { 1.0 };
        let wire = |bytes: Bytes| {
            if bytes == 0 {
                0.0
            } else {
                bytes as f64 * comm_scale / bandwidth + cfg.latency_s
            }
        };
        let spec = |device, stream, billed, kind, layer: usize, lane: usize, duration, bytes| OpSpec {
            device,
            stream,
            billed,
            kind,
            index: layer as u32,
            lane: lane as u8,
            backward,
            duration,
            bytes,
        };
        for layer in 0..=layers {
            let per_token = match layer {
                0 => pre_s,
                l if l == layers => post_s,
                _ => pre_s + post_s,
            } * scale;
            let mut dispatch: Vec<Vec<OpId>> = Vec::with_capacity(lanes.len());
            let mut prefetch: Vec<Vec<OpId>> = Vec::with_capacity(lanes.len());
            let mut linear_ops: Vec<Vec<OpId>> = Vec::with_capacity(lanes.len());
            for (k, lane) in lanes.iter().enumerate() {
                let mut linear = Vec::with_capacity(devices);
                for d in 0..devices {
                    let deps: Vec<OpId> = std::iter::once(d)
                        .chain(lane.servers[d].iter().copied())
                        .map(|s| returns[k][s])
                        .filter(|&op| op != none)
                        .collect();
                    let s = spec(d, Resource::Compute, Resource::Compute, EventKind::Linear, layer, k, lane.tokens[d] * per_token, 0);
                    linear.push(engine.submit(s, deps));
                }
                linear_ops.push(linear);
                if layer == layers {
                    continue;
                }
                let mut fetches = vec![none; devices];
                for d in 0..devices {
                    let bytes = lane.prefetch_send[d].max(lane.prefetch_recv[d]);
                    if bytes > 0 {
                        let deps: Vec<OpId> = (0..k)
                            .map(|l| linear_ops[l][d])
                            .chain(lane.presenders[d].iter().map(|&(l, s)| linear_ops[l][s]))
                            .collect();
                        let s = spec(d, wire_stream, Resource::Wire, EventKind::Prefetch, layer, k, wire(bytes), (lane.prefetch_recv[d] as f64 * comm_scale) as Bytes);
                        fetches[d] = engine.submit(s, deps);
                    }
                }
                let linear = &linear_ops[k];
                let mut ops = Vec::with_capacity(devices);
                for d in 0..devices {
                    let bytes = lane.dispatch_send[d].max(lane.dispatch_recv[d]);
                    let deps: Vec<OpId> = std::iter::once(d).chain(lane.senders[d].iter().copied()).map(|s| linear[s]).collect();
                    let s = spec(d, wire_stream, Resource::Wire, EventKind::Dispatch, layer, k, wire(bytes), (lane.dispatch_recv[d] as f64 * comm_scale) as Bytes);
                    ops.push(engine.submit(s, deps));
                }
                prefetch.push(fetches);
                dispatch.push(ops);
            }
            if layer == layers {
                break;
            }
            for (k, lane) in lanes.iter().enumerate() {
                let mut attention = Vec::with_capacity(devices);
                for d in 0..devices {
                    let gathered = lane.blocking[d];
                    if gathered > 0 {
                        let s = spec(d, Resource::Compute, Resource::Wire, EventKind::Allgather, layer, k, wire(gathered), (gathered as f64 * comm_scale) as Bytes);
                        engine.submit(s, []);
                    }
                    let deps: Vec<OpId> = std::iter::once(d)
                        .chain(lane.senders[d].iter().copied())
                        .map(|s| dispatch[k][s])
                        .chain(std::iter::once(d).chain(lane.presenders[d].iter().map(|&(_, s)| s)).map(|s| prefetch[k][s]))
                        .filter(|&op| op != none)
                        .collect();
                    let s = spec(d, Resource::Compute, Resource::Compute, EventKind::Attention, layer, k, lane.attention_s[d] * scale, 0);
                    attention.push(engine.submit(s, deps));
                }
                for d in 0..devices {
                    let bytes = lane.return_send[d].max(lane.return_recv[d]);
                    let deps: Vec<OpId> = std::iter::once(d).chain(lane.servers[d].iter().copied()).map(|s| attention[s]).collect();
                    let s = spec(d, wire_stream, Resource::Wire, EventKind::Return, layer, k, wire(bytes), (lane.return_recv[d] as f64 * comm_scale) as Bytes);
                    returns[k][d] = engine.submit(s, deps);
                }
            }
        }
    }
    build_report(devices, engine.into_events(), &plan.memory, None)
}
