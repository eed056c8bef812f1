//! Communication-aware greedy scheduler for core-attention tasks.
//!
//! 1. The target load is the mean attention FLOPs per server; servers above it
//!    are surplus, servers below it deficit (largest deficit first).
//! 2. For each deficit server, every item on a surplus server is scored: the
//!    movable FLOPs `min(F_item, S_source, D_dest)` over the bytes of the
//!    cheapest shard carrying them. The best-scoring item moves whole, or is
//!    split with the shard going to the destination and the rest staying.
//! 3. Loads are updated after every move; scheduling stops once every server
//!    is within `epsilon * target` or no move scores above the threshold.

use std::cmp::Ordering;
use std::io::{Read, Write};

use num_rational::Ratio;
use serde::{Deserialize, Serialize};

use crate::comm::{dispatch_bytes, make_task, v_min_comm, CommQuery};
use crate::cost::{ca_flops, CostCoefficients};
use crate::error::{Error, Result};
use crate::model::{Bytes, CaTask, DeviceId, Flops, Item, Layout, ModelConfig, Tokens};

/// Exact per-server target load.
pub type TargetLoad = Ratio<i128>;

fn rational(f: Flops) -> TargetLoad {
    Ratio::from_integer(f as i128)
}

fn floor_flops(r: &TargetLoad) -> Flops {
    r.floor().to_integer().max(0) as Flops
}

fn ratio_f64(r: &TargetLoad) -> f64 {
    *r.numer() as f64 / *r.denom() as f64
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SchedulerConfig {
    /// Allowed relative deviation of every server from the target load.
    pub epsilon: f64,
    /// Moves whose normalized priority falls below this are not taken. The
    /// priority is normalized by `target / mean whole-item bytes`, so the
    /// threshold is dimensionless.
    pub e_threshold: f64,
    pub tile_size: Tokens,
    /// Upper bound on accepted migrations per call.
    pub max_migrations: usize,
    /// A candidate whose cheapest shard degenerates to the whole item still
    /// moves whole if its movable FLOPs reach this fraction of the item.
    pub whole_item_fallback: f64,
}

impl Default for SchedulerConfig {
    fn default() -> Self {
        Self {
            epsilon: 0.05,
            e_threshold: 0.01,
            tile_size: 128,
            max_migrations: 4096,
            whole_item_fallback: 0.9,
        }
    }
}

impl SchedulerConfig {
    pub fn with_epsilon(epsilon: f64) -> Self {
        Self {
            epsilon,
            ..Self::default()
        }
    }
}

/// Shared inputs of every scheduler call.
#[derive(Clone, Copy, Debug)]
pub struct ScheduleContext<'a> {
    pub model: &'a ModelConfig,
    pub coeff: &'a CostCoefficients,
    pub config: &'a SchedulerConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ServerLoad {
    pub device: DeviceId,
    pub assigned_flops: Flops,
    pub items: Vec<Item>,
    pub sent_bytes: Bytes,
    pub received_bytes: Bytes,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MigrationRecord {
    pub source: DeviceId,
    pub dest: DeviceId,
    pub item: Item,
    pub shard: Item,
    pub delta_f_max: Flops,
    pub moved_flops: Flops,
    pub bytes: Bytes,
    pub priority: f64,
    pub dest_deficit_before: f64,
    pub dest_deficit_after: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SchedulePlan {
    pub tasks: Vec<CaTask>,
    pub per_server: Vec<ServerLoad>,
    pub target: f64,
    pub max_load: Flops,
    pub min_load: Flops,
    pub total_comm_bytes: Bytes,
    pub epsilon_used: f64,
    pub tolerance_met: bool,
    pub migrations: Vec<MigrationRecord>,
    pub rejected_candidates: usize,
}

impl SchedulePlan {
    pub fn total_flops(&self) -> Flops {
        self.per_server.iter().map(|s| s.assigned_flops).sum()
    }

    /// Largest `|load - target| / target` over servers.
    pub fn max_relative_deviation(&self) -> f64 {
        if self.target == 0.0 {
            return 0.0;
        }
        self.per_server
            .iter()
            .map(|s| (s.assigned_flops as f64 - self.target).abs() / self.target)
            .fold(0.0, f64::max)
    }
}

/// Ideal per-server load: total item FLOPs over `n_servers`, exactly.
pub fn target_load(items: &[Item], n_servers: usize, coeff: &CostCoefficients) -> TargetLoad {
    assert!(n_servers >= 1, "need at least one server");
    let total: Flops = items.iter().map(|i| ca_flops(i, coeff)).sum();
    Ratio::new(total as i128, n_servers as i128)
}

/// Surplus servers sorted by descending surplus and deficit servers sorted by
/// descending deficit; ties go to the lower index. Servers exactly at the
/// target are in neither list.
pub fn classify_servers(loads: &[Flops], target: &TargetLoad) -> (Vec<(DeviceId, TargetLoad)>, Vec<(DeviceId, TargetLoad)>) {
    let mut surplus = Vec::new();
    let mut deficit = Vec::new();
    for (device, &load) in loads.iter().enumerate() {
        let diff = rational(load) - target;
        match diff.cmp(&Ratio::from_integer(0)) {
            Ordering::Greater => surplus.push((device, diff)),
            Ordering::Less => deficit.push((device, -diff)),
            Ordering::Equal => {}
        }
    }
    let by_amount = |a: &(DeviceId, TargetLoad), b: &(DeviceId, TargetLoad)| b.1.cmp(&a.1).then(a.0.cmp(&b.0));
    surplus.sort_by(by_amount);
    deficit.sort_by(by_amount);
    (surplus, deficit)
}

/// A scored candidate move of (part of) one item.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Proposal {
    pub delta_f_max: Flops,
    pub shard: Item,
    /// Pieces of the original item that stay on the source.
    pub remainder: Vec<Item>,
    pub moved_flops: Flops,
    pub v_comm: Bytes,
    pub priority: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Rejection {
    /// Nothing left to move between this pair.
    NoRoom,
    /// The movable FLOPs are below what the smallest tile-sized shard carries.
    BelowTile,
    /// The cheapest shard is the whole item but too little was asked for.
    WholeItemFallback,
    /// Every tile-aligned shard would leave the source or the destination
    /// at least as far from the target as before.
    Overshoot,
}

fn tile_round_up(x: Tokens, tile: Tokens) -> Tokens {
    x.div_ceil(tile) * tile
}

/// Scores moving (part of) `item` from a server with `source_load` to one
/// with `dest_load`.
pub fn propose_migration(
    source_load: Flops,
    dest: DeviceId,
    dest_load: Flops,
    item: &Item,
    target: &TargetLoad,
    ctx: &ScheduleContext<'_>,
) -> std::result::Result<Proposal, Rejection> {
    let tile = ctx.config.tile_size.max(1);
    let f_item = ca_flops(item, ctx.coeff);
    let surplus = rational(source_load) - target;
    let deficit = target - rational(dest_load);
    let delta = f_item.min(floor_flops(&surplus)).min(floor_flops(&deficit));
    if delta == 0 || f_item == 0 {
        return Err(Rejection::NoRoom);
    }

    let (shard, remainder) = if delta == f_item {
        (*item, Vec::new())
    } else {
        let smallest = {
            let t = tile.min(item.n_q());
            let mut probe = *item;
            match item.layout {
                Layout::Contiguous => probe.q_end = item.q_start + t,
                Layout::HeadTail => probe.q_start = item.q_end - t,
            }
            ca_flops(&probe, ctx.coeff)
        };
        if delta < smallest {
            return Err(Rejection::BelowTile);
        }
        match split_for(item, delta, f_item, tile, ctx) {
            Some(split) => closer_split(item, split, tile, &surplus, &deficit, ctx),
            None if delta as f64 >= ctx.config.whole_item_fallback * f_item as f64 => (*item, Vec::new()),
            None => return Err(Rejection::WholeItemFallback),
        }
    };

    let moved_flops = ca_flops(&shard, ctx.coeff);
    let moved = rational(moved_flops);
    let two = Ratio::from_integer(2);
    if moved >= two * &surplus || moved >= two * &deficit {
        return Err(Rejection::Overshoot);
    }
    let v_comm = if dest == item.home { 0 } else { dispatch_bytes(&shard, ctx.model) };
    let priority = if v_comm == 0 {
        f64::INFINITY
    } else {
        delta as f64 / v_comm as f64
    };
    Ok(Proposal {
        delta_f_max: delta,
        shard,
        remainder,
        moved_flops,
        v_comm,
        priority,
    })
}

/// Cheapest tile-aligned shard of `item` carrying at least `delta` FLOPs, and
/// the pieces left behind. `None` when the shard would be the whole item.
fn split_for(
    item: &Item,
    delta: Flops,
    f_item: Flops,
    tile: Tokens,
    ctx: &ScheduleContext<'_>,
) -> Option<(Item, Vec<Item>)> {
    match item.layout {
        Layout::Contiguous => {
            let query = CommQuery::for_item(item, delta, f_item, ctx.model);
            let choice = v_min_comm(&query, tile).ok()?;
            if choice.is_whole(&query) {
                return None;
            }
            let start = choice.n_kv - choice.n_q;
            let mut shard = *item;
            shard.q_start = start;
            shard.q_end = choice.n_kv;
            let mut rest = Vec::new();
            if start > item.q_start {
                rest.push(Item {
                    q_end: start,
                    ..*item
                });
            }
            if choice.n_kv < item.q_end {
                rest.push(Item {
                    q_start: choice.n_kv,
                    ..*item
                });
            }
            Some((shard, rest))
        }
        Layout::HeadTail => {
            // Head-tail work is 2 L n_q per unit alpha; the cheapest shard is the
            // innermost one (largest head extent, fewest extra K/V tokens).
            let per_token = 2 * item.doc_len as u128 * ctx.coeff.alpha_ca as u128;
            let n_q = tile_round_up(delta.div_ceil(per_token) as Tokens, tile);
            if n_q >= item.n_q() {
                return None;
            }
            let shard = Item {
                q_start: item.q_end - n_q,
                ..*item
            };
            let rest = Item {
                q_end: item.q_end - n_q,
                ..*item
            };
            Some((shard, vec![rest]))
        }
    }
}

/// The rounded-up shard, or the one a tile shorter on its outer side when
/// that leaves the source and destination closer to the target.
fn closer_split(
    item: &Item,
    up: (Item, Vec<Item>),
    tile: Tokens,
    surplus: &TargetLoad,
    deficit: &TargetLoad,
    ctx: &ScheduleContext<'_>,
) -> (Item, Vec<Item>) {
    let shard = up.0;
    if shard.n_q() <= tile {
        return up;
    }
    let smaller = Item { q_start: shard.q_start + tile, ..shard };
    let miss = |s: &Item| {
        let moved = rational(ca_flops(s, ctx.coeff));
        let off = |r: TargetLoad| if r < Ratio::from_integer(0) { -r } else { r };
        off(surplus - &moved).max(off(deficit - &moved))
    };
    if miss(&smaller) >= miss(&shard) {
        return up;
    }
    let mut rest: Vec<Item> = up.1;
    match rest.iter_mut().find(|r| r.q_end == shard.q_start) {
        Some(before) => before.q_end = smaller.q_start,
        None => rest.push(Item { q_start: shard.q_start, q_end: smaller.q_start, ..*item }),
    }
    (smaller, rest)
}

/// Candidate ordering: higher priority, then larger movable FLOPs, then lower
/// item index, then lower source index.
fn better(a: &(f64, Flops, usize, DeviceId), b: &(f64, Flops, usize, DeviceId)) -> bool {
    match a.0.partial_cmp(&b.0).unwrap_or(Ordering::Equal) {
        Ordering::Greater => true,
        Ordering::Less => false,
        Ordering::Equal => (b.1, a.2, a.3) < (a.1, b.2, b.3),
    }
}

fn within_tolerance(loads: &[Flops], target: &TargetLoad, epsilon: f64) -> bool {
    let t = ratio_f64(target);
    let slack = epsilon * t;
    loads.iter().all(|&l| {
        let dev = rational(l) - target;
        let abs = if dev < Ratio::from_integer(0) { -dev } else { dev };
        ratio_f64(&abs) <= slack
    })
}

/// Balances `items` (each resident on its `home`) over `n_servers` attention servers.
pub fn schedule(items: &[Item], n_servers: usize, ctx: &ScheduleContext<'_>) -> SchedulePlan {
    assert!(n_servers >= 1, "need at least one server");
    let cfg = ctx.config;
    let target = target_load(items, n_servers, ctx.coeff);
    let target_f = ratio_f64(&target);

    let mut placed: Vec<(Item, DeviceId)> = items
        .iter()
        .map(|it| {
            assert!(it.home < n_servers, "item home {} outside {} servers", it.home, n_servers);
            (*it, it.home)
        })
        .collect();
    let mut loads = vec![0 as Flops; n_servers];
    for (it, s) in &placed {
        loads[*s] += ca_flops(it, ctx.coeff);
    }

    let mean_item_bytes = if items.is_empty() {
        1.0
    } else {
        items.iter().map(|i| dispatch_bytes(i, ctx.model) as f64).sum::<f64>() / items.len() as f64
    };
    let priority_scale = if target_f > 0.0 { target_f / mean_item_bytes.max(1.0) } else { 1.0 };

    let mut migrations: Vec<MigrationRecord> = Vec::new();
    let mut rejected = 0usize;
    let max_passes = 2 * n_servers + 4;

    'passes: for _ in 0..max_passes {
        if within_tolerance(&loads, &target, cfg.epsilon) {
            break;
        }
        let (_, deficits) = classify_servers(&loads, &target);
        let mut moved = false;
        for &(dest, _) in &deficits {
            loop {
                if migrations.len() >= cfg.max_migrations {
                    break 'passes;
                }
                if rational(loads[dest]) >= target || within_tolerance(&loads, &target, cfg.epsilon) {
                    break;
                }
                let mut best: Option<((f64, Flops, usize, DeviceId), Proposal)> = None;
                for (idx, (item, server)) in placed.iter().enumerate() {
                    let server = *server;
                    if server == dest || rational(loads[server]) <= target {
                        continue;
                    }
                    match propose_migration(loads[server], dest, loads[dest], item, &target, ctx) {
                        Ok(p) => {
                            let key = (p.priority, p.delta_f_max, idx, server);
                            if best.as_ref().map_or(true, |(bk, _)| better(&key, bk)) {
                                best = Some((key, p));
                            }
                        }
                        Err(_) => rejected += 1,
                    }
                }
                let Some(((priority, _, idx, source), proposal)) = best else {
                    break;
                };
                if priority / priority_scale < cfg.e_threshold {
                    break;
                }

                let before = ratio_f64(&(target - rational(loads[dest])));
                let (item, _) = placed.remove(idx);
                for piece in &proposal.remainder {
                    placed.push((*piece, source));
                }
                placed.push((proposal.shard, dest));
                loads[source] -= proposal.moved_flops;
                loads[dest] += proposal.moved_flops;
                let after = ratio_f64(&(target - rational(loads[dest])));
                migrations.push(MigrationRecord {
                    source,
                    dest,
                    item,
                    shard: proposal.shard,
                    delta_f_max: proposal.delta_f_max,
                    moved_flops: proposal.moved_flops,
                    bytes: proposal.v_comm,
                    priority,
                    dest_deficit_before: before,
                    dest_deficit_after: after,
                });
                moved = true;
            }
        }
        if !moved {
            break;
        }
    }

    build_plan(placed, n_servers, &target, loads, migrations, rejected, ctx)
}

fn build_plan(
    placed: Vec<(Item, DeviceId)>,
    n_servers: usize,
    target: &TargetLoad,
    loads: Vec<Flops>,
    migrations: Vec<MigrationRecord>,
    rejected: usize,
    ctx: &ScheduleContext<'_>,
) -> SchedulePlan {
    let mut per_server: Vec<ServerLoad> = (0..n_servers)
        .map(|device| ServerLoad {
            device,
            assigned_flops: 0,
            items: Vec::new(),
            sent_bytes: 0,
            received_bytes: 0,
        })
        .collect();
    let mut tasks = Vec::with_capacity(placed.len());
    for (item, server) in placed {
        let task = make_task(item, server, ctx.model);
        per_server[server].assigned_flops += ca_flops(&item, ctx.coeff);
        per_server[server].items.push(item);
        per_server[server].received_bytes += task.comm_bytes;
        per_server[item.home].sent_bytes += task.comm_bytes;
        tasks.push(task);
    }
    debug_assert!(per_server.iter().zip(&loads).all(|(s, &l)| s.assigned_flops == l));
    SchedulePlan {
        total_comm_bytes: tasks.iter().map(|t| t.comm_bytes).sum(),
        tasks,
        target: ratio_f64(target),
        max_load: loads.iter().copied().max().unwrap_or(0),
        min_load: loads.iter().copied().min().unwrap_or(0),
        epsilon_used: ctx.config.epsilon,
        tolerance_met: within_tolerance(&loads, target, ctx.config.epsilon),
        per_server,
        migrations,
        rejected_candidates: rejected,
    }
}

/// One pipeline tick: CA items of every stage (index = home) are pooled and
/// balanced over `n_servers`; stages without work this tick join as empty servers.
pub fn schedule_pp_tick(per_stage_items: &[Vec<Item>], n_servers: usize, ctx: &ScheduleContext<'_>) -> SchedulePlan {
    assert!(per_stage_items.len() <= n_servers, "more stages than servers");
    let pooled: Vec<Item> = per_stage_items
        .iter()
        .enumerate()
        .flat_map(|(stage, items)| items.iter().map(move |it| Item { home: stage, ..*it }))
        .collect();
    schedule(&pooled, n_servers, ctx)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PlanRecord {
    pub doc: u64,
    pub q_start: Tokens,
    pub q_end: Tokens,
    pub layout: Layout,
    pub doc_len: Tokens,
    pub source: DeviceId,
    pub server: DeviceId,
    pub flops: String,
    pub bytes: Bytes,
}

/// One CSV record per task, sorted by (server, doc, q_start) so exports diff cleanly.
pub fn plan_records(tasks: &[CaTask], coeff: &CostCoefficients) -> Vec<PlanRecord> {
    let mut rows: Vec<PlanRecord> = tasks
        .iter()
        .map(|t| PlanRecord {
            doc: t.item.doc,
            q_start: t.item.q_start,
            q_end: t.item.q_end,
            layout: t.item.layout,
            doc_len: t.item.doc_len,
            source: t.source_device,
            server: t.assigned_server,
            flops: ca_flops(&t.item, coeff).to_string(),
            bytes: t.comm_bytes,
        })
        .collect();
    rows.sort_by(|a, b| (a.server, a.doc, a.q_start, a.layout).cmp(&(b.server, b.doc, b.q_start, b.layout)));
    rows
}

pub fn write_plan_csv<W: Write>(tasks: &[CaTask], coeff: &CostCoefficients, writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    for row in plan_records(tasks, coeff) {
        w.serialize(row)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_plan_csv<R: Read>(reader: R) -> Result<Vec<PlanRecord>> {
    csv::Reader::from_reader(reader)
        .deserialize()
        .map(|r| r.map_err(Error::from))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn unit_ctx<'a>(model: &'a ModelConfig, coeff: &'a CostCoefficients, cfg: &'a SchedulerConfig) -> ScheduleContext<'a> {
        ScheduleContext {
            model,
            coeff,
            config: cfg,
        }
    }

    fn doc(id: u64, len: Tokens, home: DeviceId) -> Item {
        Item::contiguous(id, len, 0, len, home).unwrap()
    }

    #[test]
    fn target_is_the_exact_mean() {
        let coeff = CostCoefficients::new(1, 0, 0);
        let items = [doc(0, 10, 0), doc(1, 20, 0)];
        assert_eq!(target_load(&items, 2, &coeff), Ratio::from_integer(250));
        assert_eq!(target_load(&items, 1, &coeff), Ratio::from_integer(500));
        assert_eq!(target_load(&items, 3, &coeff), Ratio::new(500, 3));
    }

    #[test]
    fn intro_scenario_target() {
        let coeff = CostCoefficients::new(1, 0, 0);
        let mut items = vec![doc(0, 4096, 0)];
        items.extend((1..=4).map(|i| doc(i, 1024, 1)));
        assert_eq!(target_load(&items, 2, &coeff), Ratio::from_integer(10_485_760));
    }

    #[test]
    fn classification_examples() {
        let t = Ratio::from_integer(200);
        let (s, d) = classify_servers(&[300, 100], &t);
        assert_eq!(s.iter().map(|x| x.0).collect::<Vec<_>>(), vec![0]);
        assert_eq!(d, vec![(1, Ratio::from_integer(100))]);

        let (s, d) = classify_servers(&[200, 200], &t);
        assert!(s.is_empty() && d.is_empty());

        let (_, d) = classify_servers(&[400, 150, 50], &t);
        assert_eq!(d.iter().map(|x| x.0).collect::<Vec<_>>(), vec![2, 1]);
    }

    #[test]
    fn delta_is_min_of_item_surplus_deficit() {
        let model = ModelConfig::llama_8b();
        let coeff = CostCoefficients::new(1, 0, 0);
        let cfg = SchedulerConfig {
            tile_size: 1,
            ..SchedulerConfig::default()
        };
        let ctx = unit_ctx(&model, &coeff, &cfg);
        // F_item = 10^2 = 100.
        let item = doc(0, 10, 0);
        let t = Ratio::from_integer(300);
        let p = propose_migration(550, 1, 220, &item, &t, &ctx).unwrap();
        assert_eq!(p.delta_f_max, 80);
        assert!(p.moved_flops >= 80 && p.moved_flops < 100);
        assert!(!p.remainder.is_empty());

        let p = propose_migration(550, 1, 150, &item, &t, &ctx).unwrap();
        assert_eq!(p.delta_f_max, 100);
        assert_eq!(p.shard, item);
        assert!(p.remainder.is_empty());
    }

    #[test]
    fn priority_halves_with_double_bytes() {
        let model = ModelConfig::llama_8b();
        let coeff = CostCoefficients::new(1, 0, 0);
        let cfg = SchedulerConfig::default();
        let ctx = unit_ctx(&model, &coeff, &cfg);
        let t = Ratio::from_integer(1_000_000_000);
        let a = propose_migration(3_000_000_000, 1, 0, &doc(0, 1024, 0), &t, &ctx).unwrap();
        let b = propose_migration(3_000_000_000, 1, 0, &doc(1, 1024, 0), &t, &ctx).unwrap();
        assert_eq!(a.priority, b.priority);
        let key_a = (a.priority, a.delta_f_max, 0, 0);
        let key_b = (a.priority / 2.0, a.delta_f_max, 1, 0);
        assert!(better(&key_a, &key_b));
        assert!(!better(&key_b, &key_a));
    }

    #[test]
    fn balanced_input_is_untouched() {
        let model = ModelConfig::llama_8b();
        let coeff = CostCoefficients::from_model(&model);
        let cfg = SchedulerConfig::with_epsilon(0.0);
        let items: Vec<Item> = (0..4).map(|i| doc(i, 2048, i as usize)).collect();
        let plan = schedule(&items, 4, &unit_ctx(&model, &coeff, &cfg));
        assert!(plan.migrations.is_empty());
        assert_eq!(plan.total_comm_bytes, 0);
        assert!(plan.tolerance_met);
    }

    #[test]
    fn idle_stage_is_a_full_deficit() {
        let model = ModelConfig::llama_8b();
        let coeff = CostCoefficients::new(1, 0, 0);
        let cfg = SchedulerConfig::with_epsilon(0.0);
        let stages = vec![vec![doc(0, 4096, 0)], vec![doc(1, 4096, 0)], vec![]];
        let t = target_load(&stages.concat(), 3, &coeff);
        let loads = [4096u128 * 4096, 4096 * 4096, 0];
        let (_, d) = classify_servers(&loads, &t);
        assert_eq!(d[0], (2, t));
        let plan = schedule_pp_tick(&stages, 3, &unit_ctx(&model, &coeff, &cfg));
        assert!(plan.per_server[2].assigned_flops > 0);
        assert_eq!(plan.total_flops(), 2 * 4096 * 4096);
    }

    #[test]
    fn plan_csv_round_trip() {
        let model = ModelConfig::llama_8b();
        let coeff = CostCoefficients::new(1, 0, 0);
        let cfg = SchedulerConfig::with_epsilon(0.0);
        let mut items = vec![doc(0, 4096, 0)];
        items.extend((1..=4).map(|i| doc(i, 1024, 1)));
        let plan = schedule(&items, 2, &unit_ctx(&model, &coeff, &cfg));
        let mut buf = Vec::new();
        write_plan_csv(&plan.tasks, &coeff, &mut buf).unwrap();
        let back = read_plan_csv(buf.as_slice()).unwrap();
        assert_eq!(back, plan_records(&plan.tasks, &coeff));
    }
}
