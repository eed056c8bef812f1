//! Brute-force references for the closed-form shard search, the greedy
//! scheduler and the causal work formula. Slow by design; used by tests and
//! by the `oracle` CLI subcommand.

use std::collections::BTreeSet;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::comm::{v_min_comm, CommQuery};
use crate::cost::CostCoefficients;
use crate::model::{range_work, Bytes, Flops, Item, Layout, ModelConfig, Tokens};
use crate::scheduler::{schedule, ScheduleContext, SchedulerConfig};

/// Tile-aligned candidates up to `limit`, plus `limit` itself.
fn aligned(limit: Tokens, tile: Tokens) -> impl Iterator<Item = Tokens> {
    (1..=limit / tile).map(move |k| k * tile).chain((limit % tile != 0).then_some(limit))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub struct GridOptimum {
    pub n_q: Tokens,
    pub n_kv: Tokens,
    pub bytes: Bytes,
}

/// Cheapest admissible `(n_q, n_kv)` over every tile-aligned pair.
pub fn v_grid_search(q: &CommQuery, tile: Tokens) -> Option<GridOptimum> {
    let mut best: Option<GridOptimum> = None;
    for n_q in aligned(q.l_q, tile) {
        for n_kv in aligned(q.l_kv, tile) {
            if !q.admits(n_q, n_kv) {
                continue;
            }
            let bytes = q.comm(n_q, n_kv);
            if best.map_or(true, |b| bytes < b.bytes) {
                best = Some(GridOptimum { n_q, n_kv, bytes });
            }
        }
    }
    best
}

/// Random valid query: sizes from either preset model, both layouts.
pub fn random_query(rng: &mut impl Rng, tile: Tokens) -> CommQuery {
    let model = if rng.gen_bool(0.5) { ModelConfig::llama_8b() } else { ModelConfig::llama_34b() };
    let layout = if rng.gen_bool(0.5) { Layout::Contiguous } else { Layout::HeadTail };
    let l_kv = rng.gen_range(tile..=64 * tile);
    let l_q = rng.gen_range(1..=l_kv);
    let l_doc = match layout {
        Layout::Contiguous => l_kv + rng.gen_range(0..=l_kv),
        Layout::HeadTail => 2 * l_kv + rng.gen_range(0..=l_kv),
    };
    let mut q = CommQuery {
        delta_f_max: 1,
        f_item: 1,
        l_q,
        l_kv,
        l_doc,
        size_q: model.size_q,
        size_kv: model.size_kv,
        layout,
    };
    q.f_item = q.full_work();
    q.delta_f_max = rng.gen_range(1..=q.f_item);
    q
}

#[derive(Clone, Debug, Serialize)]
pub struct VOracleCase {
    pub query: CommQuery,
    pub closed_form: GridOptimum,
    pub grid: GridOptimum,
    /// `closed_form.bytes / grid.bytes - 1`.
    pub excess: f64,
    pub admissible: bool,
    pub aligned: bool,
}

#[derive(Clone, Debug, Serialize)]
pub struct VOracleReport {
    pub cases: Vec<VOracleCase>,
}

impl VOracleReport {
    pub fn max_excess(&self) -> f64 {
        self.cases.iter().map(|c| c.excess).fold(0.0, f64::max)
    }

    pub fn all_admissible(&self) -> bool {
        self.cases.iter().all(|c| c.admissible && c.aligned)
    }
}

/// Compares [`v_min_comm`] with [`v_grid_search`] on `n` random queries.
pub fn v_oracle(n: usize, seed: u64, tile: Tokens) -> VOracleReport {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cases = (0..n)
        .map(|_| {
            let query = random_query(&mut rng, tile);
            let v = v_min_comm(&query, tile).expect("generated queries are valid");
            let grid = v_grid_search(&query, tile).expect("the whole item is always admissible");
            let on_grid = |x: Tokens, limit: Tokens| x % tile == 0 || x == limit;
            VOracleCase {
                query,
                closed_form: GridOptimum { n_q: v.n_q, n_kv: v.n_kv, bytes: v.bytes },
                grid,
                excess: v.bytes as f64 / grid.bytes as f64 - 1.0,
                admissible: query.admits(v.n_q, v.n_kv) && v.bytes == query.comm(v.n_q, v.n_kv),
                aligned: on_grid(v.n_q, query.l_q) && on_grid(v.n_kv, query.l_kv),
            }
        })
        .collect();
    VOracleReport { cases }
}

/// Smallest achievable max-load when every item may be cut at multiples of
/// `tile` and its pieces placed on any server. Exact branch and bound from a
/// longest-first placement.
pub fn min_max_load(items: &[Item], servers: usize, tile: Tokens, coeff: &CostCoefficients) -> Flops {
    let mut pieces: Vec<Flops> = Vec::new();
    for item in items {
        for (s, e) in item.ranges() {
            let mut cuts: Vec<Tokens> = (s..=e).filter(|&c| c % tile == 0).collect();
            cuts.extend([s, e]);
            cuts.sort_unstable();
            cuts.dedup();
            for w in cuts.windows(2) {
                pieces.push(coeff.alpha_ca as u128 * range_work(w[0], w[1]));
            }
        }
    }
    pieces.sort_unstable_by(|a, b| b.cmp(a));
    let mut bound = {
        let mut loads = vec![0; servers];
        for &p in &pieces {
            *loads.iter_mut().min().expect("servers >= 1") += p;
        }
        loads.into_iter().max().unwrap_or(0)
    };
    let mut states: BTreeSet<Vec<Flops>> = BTreeSet::from([vec![0; servers]]);
    for &p in &pieces {
        let mut next = BTreeSet::new();
        for state in &states {
            for i in 0..servers {
                if i > 0 && state[i] == state[i - 1] {
                    continue;
                }
                let mut s = state.clone();
                s[i] += p;
                if s[i] > bound {
                    continue;
                }
                s.sort_unstable();
                next.insert(s);
            }
        }
        states = next;
    }
    if let Some(best) = states.iter().map(|s| s[servers - 1]).min() {
        bound = bound.min(best);
    }
    bound
}

#[derive(Clone, Debug, Serialize)]
pub struct GapCase {
    pub items: Vec<Item>,
    pub servers: usize,
    pub greedy: Flops,
    pub optimum: Flops,
    /// `greedy / optimum - 1`.
    pub gap: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct GapReport {
    pub cases: Vec<GapCase>,
}

impl GapReport {
    pub fn fraction_within(&self, gap: f64) -> f64 {
        let n = self.cases.iter().filter(|c| c.gap <= gap).count();
        n as f64 / self.cases.len().max(1) as f64
    }

    /// Counts of cases per `width`-wide gap bucket.
    pub fn histogram(&self, width: f64) -> Vec<(f64, usize)> {
        let mut buckets: Vec<(f64, usize)> = Vec::new();
        for c in &self.cases {
            let lo = (c.gap.max(0.0) / width).floor() * width;
            match buckets.iter_mut().find(|(b, _)| (*b - lo).abs() < width / 2.0) {
                Some((_, n)) => *n += 1,
                None => buckets.push((lo, 1)),
            }
        }
        buckets.sort_by(|a, b| a.0.total_cmp(&b.0));
        buckets
    }
}

/// Greedy max-load against [`min_max_load`] on `n` random instances: 1 to 5
/// whole documents of 1 to 16 tiles each on 2 or 3 servers.
pub fn scheduler_oracle(n: usize, seed: u64, config: &SchedulerConfig) -> GapReport {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let model = ModelConfig::llama_8b();
    let coeff = CostCoefficients::from_model(&model);
    let ctx = ScheduleContext { model: &model, coeff: &coeff, config };
    let tile = config.tile_size;
    let cases = (0..n)
        .map(|_| {
            let servers = rng.gen_range(2..=3);
            let count = rng.gen_range(1..=5);
            let items: Vec<Item> = (0..count)
                .map(|i| {
                    let len = rng.gen_range(1..=16) * tile;
                    let home = rng.gen_range(0..servers);
                    Item::contiguous(i as u64, len, 0, len, home).expect("non-empty document")
                })
                .collect();
            let plan = schedule(&items, servers, &ctx);
            let optimum = min_max_load(&items, servers, tile, &coeff);
            GapCase {
                greedy: plan.max_load,
                optimum,
                gap: plan.max_load as f64 / optimum as f64 - 1.0,
                items,
                servers,
            }
        })
        .collect();
    GapReport { cases }
}

/// Attended `(query, key)` pairs of queries `[start, end)` under a causal
/// mask, counted cell by cell.
pub fn causal_pairs(start: Tokens, end: Tokens) -> u128 {
    let mut pairs = 0u128;
    for i in start..end {
        for _ in 0..=i {
            pairs += 1;
        }
    }
    pairs
}

#[derive(Clone, Debug, Default, Serialize)]
pub struct FlopsReport {
    pub checked: usize,
    /// `(doc_len, start, end)` where `2 * pairs != work + n_q`.
    pub mismatches: Vec<(Tokens, Tokens, Tokens)>,
}

/// Checks `n_q (2 n_kv - n_q) = 2 * pairs - n_q` for every whole document
/// of length `1..=max_len` and both halves of each of its two-way splits.
/// The formula counts the diagonal once per query instead of twice; that
/// `n_q` is the whole discrepancy.
pub fn flops_enumeration(max_len: Tokens) -> FlopsReport {
    let mut report = FlopsReport::default();
    let mut check = |l: Tokens, s: Tokens, e: Tokens, pairs: u128| {
        report.checked += 1;
        if 2 * pairs != range_work(s, e) + (e - s) as u128 {
            report.mismatches.push((l, s, e));
        }
    };
    for l in 1..=max_len {
        check(l, 0, l, causal_pairs(0, l));
        let rows: Vec<u128> = (0..l).map(|i| i as u128 + 1).collect();
        let mut head = 0u128;
        let total: u128 = rows.iter().sum();
        for s in 1..l {
            head += rows[s as usize - 1];
            check(l, 0, s, head);
            check(l, s, l, total - head);
        }
    }
    report
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grid_search_finds_the_whole_item_at_full_fraction() {
        let mut q = CommQuery {
            delta_f_max: 1,
            f_item: 1,
            l_q: 1000,
            l_kv: 1000,
            l_doc: 1000,
            size_q: 16384,
            size_kv: 4096,
            layout: Layout::Contiguous,
        };
        q.f_item = q.full_work();
        q.delta_f_max = q.f_item;
        let g = v_grid_search(&q, 128).unwrap();
        assert_eq!((g.n_q, g.n_kv), (1000, 1000));
    }

    #[test]
    fn min_max_load_of_two_equal_documents_on_two_servers() {
        let coeff = CostCoefficients::new(1, 0, 1);
        let items = [Item::contiguous(0, 256, 0, 256, 0).unwrap(), Item::contiguous(1, 256, 0, 256, 0).unwrap()];
        assert_eq!(min_max_load(&items, 2, 128, &coeff), 256 * 256);
    }

    #[test]
    fn min_max_load_splits_one_document() {
        // Tiles of a 256-token document carry 128^2 and 3 * 128^2.
        let coeff = CostCoefficients::new(1, 0, 1);
        let items = [Item::contiguous(0, 256, 0, 256, 0).unwrap()];
        assert_eq!(min_max_load(&items, 2, 128, &coeff), 3 * 128 * 128);
    }

    #[test]
    fn causal_pairs_of_a_document_is_triangular() {
        assert_eq!(causal_pairs(0, 4), 10);
        assert_eq!(causal_pairs(2, 4), 7);
    }

    #[test]
    fn small_flops_enumeration_is_exact() {
        let r = flops_enumeration(24);
        assert!(r.mismatches.is_empty());
        assert_eq!(r.checked, (1..=24).map(|l| 1 + 2 * (l - 1)).sum::<usize>());
    }
}
