//! Pipeline-parallel iterations.
//!
//! `Vanilla1f1b` replays the one-forward-one-backward order asynchronously:
//! a slow microbatch delays every later operation that depends on it.
//! `CadPhaseSync` runs a tick table in which all busy stages perform the same
//! phase; the attention work of each tick is pooled and balanced over all
//! stages, idle ones included.

use serde::{Deserialize, Serialize};

use super::engine::{Engine, Event, EventKind, OpSpec, Resource};
use super::{build_report, OverlapMode, SimConfig, TimelineReport};
use crate::comm::output_bytes;
use crate::cost::CostCoefficients;
use crate::error::{Error, Result};
use crate::model::{Bytes, ClusterConfig, Document, Item, ModelConfig, Tokens};
use crate::scheduler::{schedule_pp_tick, ScheduleContext, SchedulerConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PpSchedule {
    Vanilla1f1b,
    CadPhaseSync,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Microbatch {
    pub documents: Vec<Document>,
}

impl Microbatch {
    pub fn new(documents: Vec<Document>) -> Self {
        Self { documents }
    }

    pub fn tokens(&self) -> Tokens {
        self.documents.iter().map(|d| d.length).sum()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PpConfig {
    /// Stages without a forward or backward pass in a tick still serve attention.
    pub serve_idle_stages: bool,
    pub scheduler: SchedulerConfig,
    pub sim: SimConfig,
}

impl Default for PpConfig {
    fn default() -> Self {
        Self {
            serve_idle_stages: true,
            scheduler: SchedulerConfig::default(),
            sim: SimConfig::default(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TickPhase {
    Forward,
    Backward,
}

/// One phase per tick; `ops[t]` lists the `(stage, microbatch)` pairs busy in tick `t`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct TickTable {
    pub stages: usize,
    pub microbatches: usize,
    pub phases: Vec<TickPhase>,
    pub ops: Vec<Vec<(usize, usize)>>,
}

impl TickTable {
    pub fn len(&self) -> usize {
        self.phases.len()
    }

    pub fn is_empty(&self) -> bool {
        self.phases.is_empty()
    }

    /// Largest number of microbatches whose activations a stage holds at once.
    pub fn peak_in_flight(&self) -> usize {
        let mut live = vec![0i64; self.stages];
        let mut peak = 0;
        for (phase, ops) in self.phases.iter().zip(&self.ops) {
            for &(s, _) in ops {
                live[s] += if *phase == TickPhase::Forward { 1 } else { -1 };
                peak = peak.max(live[s]);
            }
        }
        peak as usize
    }
}

#[derive(Clone)]
struct PhaseState {
    p: usize,
    m: usize,
    t: usize,
    forward_done: Vec<Vec<Option<usize>>>,
    backward_done: Vec<Vec<Option<usize>>>,
    nf: Vec<usize>,
    nb: Vec<usize>,
}

impl PhaseState {
    fn new(p: usize, m: usize) -> Self {
        Self {
            p,
            m,
            t: 0,
            forward_done: vec![vec![None; p]; m],
            backward_done: vec![vec![None; p]; m],
            nf: vec![0; p],
            nb: vec![0; p],
        }
    }

    fn before(&self, at: Option<usize>) -> bool {
        at.is_some_and(|x| x < self.t)
    }

    fn ready(&self) -> (Vec<usize>, Vec<usize>) {
        let f = (0..self.p)
            .filter(|&s| self.nf[s] < self.m && (s == 0 || self.before(self.forward_done[self.nf[s]][s - 1])))
            .collect();
        let b = (0..self.p)
            .filter(|&s| {
                let j = self.nb[s];
                j < self.nf[s]
                    && self.before(self.forward_done[j][s])
                    && (s == self.p - 1 || self.before(self.backward_done[j][s + 1]))
            })
            .collect();
        (f, b)
    }

    fn step(&mut self, phase: TickPhase) -> Vec<(usize, usize)> {
        let (f, b) = self.ready();
        let mut ops = Vec::new();
        match phase {
            TickPhase::Forward => {
                for s in f {
                    self.forward_done[self.nf[s]][s] = Some(self.t);
                    ops.push((s, self.nf[s]));
                    self.nf[s] += 1;
                }
            }
            TickPhase::Backward => {
                for s in b {
                    self.backward_done[self.nb[s]][s] = Some(self.t);
                    ops.push((s, self.nb[s]));
                    self.nb[s] += 1;
                }
            }
        }
        self.t += 1;
        ops
    }

    fn done(&self) -> bool {
        self.nb.iter().all(|&n| n == self.m)
    }

    /// Ticks needed to finish when every later tick runs forwards whenever any is ready.
    fn finish_forward_first(&self) -> usize {
        let mut st = self.clone();
        while !st.done() {
            let (f, _) = st.ready();
            st.step(if f.is_empty() { TickPhase::Backward } else { TickPhase::Forward });
        }
        st.t
    }
}

/// Tick count of the synchronous one-forward-one-backward table.
pub fn one_f_one_b_ticks(stages: usize, microbatches: usize) -> usize {
    one_f_one_b_order(stages, microbatches).len()
}

/// Per tick, the operation each stage runs in the synchronous 1F1B table:
/// stage `s` warms up with `p - s - 1` forwards, alternates, then drains.
fn one_f_one_b_order(p: usize, m: usize) -> Vec<Vec<(usize, TickPhase, usize)>> {
    let orders: Vec<Vec<(TickPhase, usize)>> = (0..p)
        .map(|s| {
            let warm = (p - s - 1).min(m);
            let mut o: Vec<(TickPhase, usize)> = (0..warm).map(|j| (TickPhase::Forward, j)).collect();
            for i in 0..m - warm {
                o.push((TickPhase::Forward, warm + i));
                o.push((TickPhase::Backward, i));
            }
            o.extend((m - warm..m).map(|j| (TickPhase::Backward, j)));
            o
        })
        .collect();
    let mut next = vec![0usize; p];
    let mut fdone = vec![vec![usize::MAX; p]; m];
    let mut bdone = vec![vec![usize::MAX; p]; m];
    let mut ticks = Vec::new();
    let mut t = 0;
    while (0..p).any(|s| next[s] < orders[s].len()) {
        let mut row = Vec::new();
        for s in 0..p {
            let Some(&(phase, j)) = orders[s].get(next[s]) else { continue };
            let ok = match phase {
                TickPhase::Forward => s == 0 || fdone[j][s - 1] < t,
                TickPhase::Backward => fdone[j][s] < t && (s == p - 1 || bdone[j][s + 1] < t),
            };
            if ok {
                row.push((s, phase, j));
            }
        }
        for &(s, phase, j) in &row {
            match phase {
                TickPhase::Forward => fdone[j][s] = t,
                TickPhase::Backward => bdone[j][s] = t,
            }
            next[s] += 1;
        }
        ticks.push(row);
        t += 1;
    }
    ticks
}

/// Phase-synchronous table: a tick runs backwards only when doing so still
/// lets a forward-first completion finish within the 1F1B tick count;
/// otherwise it runs the ready forwards and the backwards are deferred.
pub fn cad_phase_sync_table(stages: usize, microbatches: usize) -> TickTable {
    let budget = one_f_one_b_ticks(stages, microbatches);
    let mut st = PhaseState::new(stages, microbatches);
    let mut phases = Vec::new();
    let mut ops = Vec::new();
    while !st.done() {
        let (f, b) = st.ready();
        let mut phase = if f.is_empty() { TickPhase::Backward } else { TickPhase::Forward };
        if !b.is_empty() {
            let mut trial = st.clone();
            trial.step(TickPhase::Backward);
            if trial.finish_forward_first() <= budget {
                phase = TickPhase::Backward;
            }
        }
        ops.push(st.step(phase));
        phases.push(phase);
    }
    TickTable {
        stages,
        microbatches,
        phases,
        ops,
    }
}

struct StageCost<'a> {
    model: &'a ModelConfig,
    coeff: &'a CostCoefficients,
    cluster: &'a ClusterConfig,
    layers_per_stage: f64,
}

impl StageCost<'_> {
    fn linear_s(&self, mb: &Microbatch) -> f64 {
        mb.tokens() as f64 * self.coeff.beta_linear as f64 / (self.cluster.mfu_linear * self.cluster.device_peak_flops())
    }

    fn attention_s<'i>(&self, items: impl IntoIterator<Item = &'i Item>) -> f64 {
        let mut work = 0u128;
        let mut any = false;
        for it in items {
            work += it.padded_work(self.cluster.tile_size);
            any = true;
        }
        if !any {
            return 0.0;
        }
        self.cluster.kernel_overhead_s
            + self.coeff.alpha_ca as f64 * work as f64 / (self.cluster.mfu_attention * self.cluster.device_peak_flops())
    }

    fn items(&self, mb: &Microbatch, home: usize) -> Vec<Item> {
        mb.documents.iter().map(|d| Item::whole(d, home)).collect()
    }

    fn memory_per_mb(&self, mb: &Microbatch) -> Bytes {
        (mb.tokens() as f64 * self.coeff.gamma_mem as f64 * self.layers_per_stage / self.model.num_layers as f64) as Bytes
    }
}

/// Simulates one pipeline iteration over `stages` devices.
pub fn simulate_pp_iteration(
    microbatches: &[Microbatch],
    stages: usize,
    schedule: PpSchedule,
    model: &ModelConfig,
    coeff: &CostCoefficients,
    cluster: &ClusterConfig,
    cfg: &PpConfig,
) -> Result<TimelineReport> {
    if stages == 0 {
        return Err(Error::config("pipeline needs at least one stage"));
    }
    if microbatches.len() < stages {
        return Err(Error::config(format!(
            "{} microbatches cannot fill a {stages}-stage pipeline",
            microbatches.len()
        )));
    }
    let cost = StageCost {
        model,
        coeff,
        cluster,
        layers_per_stage: model.num_layers as f64 / stages as f64,
    };
    match schedule {
        PpSchedule::Vanilla1f1b => Ok(vanilla(microbatches, stages, &cost, &cfg.sim)),
        PpSchedule::CadPhaseSync => Ok(phase_sync(microbatches, stages, &cost, cfg)),
    }
}

fn vanilla(mbs: &[Microbatch], p: usize, cost: &StageCost<'_>, sim: &SimConfig) -> TimelineReport {
    let order = one_f_one_b_order(p, mbs.len());
    let forward: Vec<f64> = mbs
        .iter()
        .map(|mb| cost.layers_per_stage * (cost.linear_s(mb) + cost.attention_s(&cost.items(mb, 0))))
        .collect();
    let m = mbs.len();
    let mut engine = Engine::new(p);
    let mut f_op = vec![vec![0; p]; m];
    let mut b_op = vec![vec![0; p]; m];
    for row in &order {
        for &(s, phase, j) in row {
            let (kind, duration, deps) = match phase {
                TickPhase::Forward => {
                    let deps = if s == 0 { vec![] } else { vec![f_op[j][s - 1]] };
                    (EventKind::Forward, forward[j], deps)
                }
                TickPhase::Backward => {
                    let mut deps = vec![f_op[j][s]];
                    if s + 1 < p {
                        deps.push(b_op[j][s + 1]);
                    }
                    (EventKind::Backward, forward[j] * sim.backward_ratio, deps)
                }
            };
            let spec = OpSpec {
                device: s,
                stream: Resource::Compute,
                billed: Resource::Compute,
                kind,
                index: j as u32,
                lane: 0,
                backward: phase == TickPhase::Backward,
                duration,
                bytes: 0,
            };
            let id = engine.submit(spec, deps);
            match phase {
                TickPhase::Forward => f_op[j][s] = id,
                TickPhase::Backward => b_op[j][s] = id,
            }
        }
    }
    // 1F1B keeps at most p - s microbatches alive on stage s.
    let memory: Vec<Bytes> = (0..p)
        .map(|s| {
            let live = (p - s).min(m);
            let mut per: Vec<Bytes> = mbs.iter().map(|mb| cost.memory_per_mb(mb)).collect();
            per.sort_unstable_by(|a, b| b.cmp(a));
            per.iter().take(live).sum()
        })
        .collect();
    build_report(p, engine.into_events(), &memory, Some(order.len()))
}

fn phase_sync(mbs: &[Microbatch], p: usize, cost: &StageCost<'_>, cfg: &PpConfig) -> TimelineReport {
    let table = cad_phase_sync_table(p, mbs.len());
    let sim = &cfg.sim;
    let ctx = ScheduleContext {
        model: cost.model,
        coeff: cost.coeff,
        config: &cfg.scheduler,
    };
    let bandwidth = cost.cluster.device_bandwidth();
    let mut events = Vec::new();
    let mut clock = 0.0;
    let mut live = vec![0 as Bytes; p];
    let mut peak = vec![0 as Bytes; p];

    for (tick, (phase, ops)) in table.phases.iter().zip(&table.ops).enumerate() {
        let backward = *phase == TickPhase::Backward;
        let (scale, comm_scale) = if backward {
            (sim.backward_ratio, sim.backward_comm_ratio)
        } else {
            (1.0, 1.0)
        };
        // Servers are all stages, or only the busy ones.
        let servers: Vec<usize> = if cfg.serve_idle_stages {
            (0..p).collect()
        } else {
            ops.iter().map(|&(s, _)| s).collect()
        };
        let slot_of = |stage: usize| servers.iter().position(|&x| x == stage).expect("busy stage is a server");
        let mut per_server_items = vec![Vec::new(); servers.len()];
        let mut linear = vec![0.0; p];
        for &(s, j) in ops {
            per_server_items[slot_of(s)] = cost.items(&mbs[j], slot_of(s));
            linear[s] = cost.linear_s(&mbs[j]);
        }
        let plan = schedule_pp_tick(&per_server_items, servers.len(), &ctx);

        let mut send = vec![0 as Bytes; p];
        let mut recv = vec![0 as Bytes; p];
        for t in &plan.tasks {
            if t.is_local() {
                continue;
            }
            let (src, dst) = (servers[t.source_device], servers[t.assigned_server]);
            let (out, back) = if sim.mode == OverlapMode::Signal {
                (1, 1)
            } else {
                (t.comm_bytes, output_bytes(&t.item, cost.model))
            };
            send[src] += out;
            recv[dst] += out;
            send[dst] += back;
            recv[src] += back;
        }
        let mut longest = 0.0f64;
        let mut stage_busy = vec![(0.0, 0.0); p];
        for (slot, &s) in servers.iter().enumerate() {
            let compute = scale * (linear[s] + cost.attention_s(&plan.per_server[slot].items));
            let bytes = send[s].max(recv[s]);
            let wire = if bytes == 0 {
                0.0
            } else {
                bytes as f64 * comm_scale / bandwidth + sim.latency_s
            };
            let per_layer = match sim.mode {
                OverlapMode::SingleStream => compute + wire,
                _ => compute.max(wire),
            };
            stage_busy[s] = (compute, wire);
            longest = longest.max(per_layer);
        }
        let duration = cost.layers_per_stage * longest;
        for (s, &(compute, wire)) in stage_busy.iter().enumerate() {
            let kind = match (ops.iter().any(|&(x, _)| x == s), backward) {
                (false, _) => EventKind::Attention,
                (true, false) => EventKind::Forward,
                (true, true) => EventKind::Backward,
            };
            let wire_start = if sim.mode == OverlapMode::SingleStream {
                clock + cost.layers_per_stage * compute
            } else {
                clock
            };
            for (resource, kind, start, span, bytes) in [
                (Resource::Compute, kind, clock, compute, 0),
                (Resource::Wire, EventKind::Dispatch, wire_start, wire, recv[s]),
            ] {
                if span > 0.0 {
                    events.push(Event {
                        device: s,
                        resource,
                        kind,
                        index: tick as u32,
                        lane: 0,
                        backward,
                        start,
                        end: start + cost.layers_per_stage * span,
                        bytes: (bytes as f64 * comm_scale * cost.layers_per_stage) as Bytes,
                    });
                }
            }
        }
        for &(s, j) in ops {
            let m = cost.memory_per_mb(&mbs[j]);
            if backward {
                live[s] -= m;
            } else {
                live[s] += m;
                peak[s] = peak[s].max(live[s]);
            }
        }
        clock += duration;
    }
    build_report(p, events, &peak, Some(table.len()))
}
