//! Communication volumes for core-attention dispatch.
//!
//! Covers the per-task all-to-all byte count, the upper bound on how many
//! shards a document can be cut into before dispatch traffic outruns the
//! context-independent compute that hides it, and the minimal-communication
//! shard `v(.)` used by the scheduler's priority score.

use serde::{Deserialize, Serialize};

use crate::cost::linear_flops_per_token;
use crate::error::{Error, Result};
use crate::model::{Bytes, CaTask, ClusterConfig, DeviceId, Flops, Item, Layout, ModelConfig, Tokens};
use crate::num::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct ShardBound {
    /// Context-independent FLOPs per token per layer.
    pub per_token_flops: u64,
    /// Seconds to run one token through the context-independent layers.
    pub token_time_s: f64,
    /// `2 (t B - size_q) / size_kv - 1` before flooring.
    pub raw_bound: f64,
    /// Largest whole shard count, `None` when unbounded (infinite bandwidth).
    pub max_shards: Option<u64>,
    /// Dispatch cannot be hidden even for an unsharded document.
    pub communication_bound: bool,
}

/// Upper bound on the number of even shards a document can be dispatched in
/// while the all-to-all stays hidden behind context-independent compute.
pub fn shard_count_upper_bound(model: &ModelConfig, cluster: &ClusterConfig) -> ShardBound {
    let per_token_flops = linear_flops_per_token(model);
    let token_time_s = per_token_flops as f64 / (cluster.mfu_linear * cluster.device_peak_flops());
    let budget = token_time_s * cluster.device_bandwidth();
    let size_q = model.size_q as f64;
    let raw_bound = 2.0 * (budget - size_q) / model.size_kv as f64 - 1.0;
    let communication_bound = budget <= size_q;
    let max_shards = if communication_bound {
        Some(0)
    } else if raw_bound.is_finite() {
        Some(raw_bound.max(0.0).floor() as u64)
    } else {
        None
    };
    ShardBound {
        per_token_flops,
        token_time_s,
        raw_bound,
        max_shards,
        communication_bound,
    }
}

/// Dispatch bytes (Q plus the causal K/V context) of running `item` away from
/// its home. Assumes every needed token crosses the wire.
pub fn dispatch_bytes(item: &Item, model: &ModelConfig) -> Bytes {
    comm_for(item.layout, item.n_q(), item.kv_extent(), item.doc_len, model.size_q, model.size_kv)
}

fn comm_for(layout: Layout, n_q: Tokens, n_kv: Tokens, doc_len: Tokens, size_q: Bytes, size_kv: Bytes) -> Bytes {
    match layout {
        Layout::Contiguous => n_q * size_q + n_kv * size_kv,
        Layout::HeadTail => n_q * size_q + (doc_len - (n_kv - n_q)) * size_kv,
    }
}

/// Bytes of the attention output returned to the item's home device.
pub fn output_bytes(item: &Item, model: &ModelConfig) -> Bytes {
    item.n_q() * model.size_q
}

pub fn task_comm_bytes(task: &CaTask, model: &ModelConfig) -> Bytes {
    if task.is_local() {
        0
    } else {
        dispatch_bytes(&task.item, model)
    }
}

pub fn make_task(item: Item, server: DeviceId, model: &ModelConfig) -> CaTask {
    let mut task = CaTask {
        item,
        source_device: item.home,
        assigned_server: server,
        comm_bytes: 0,
    };
    task.comm_bytes = task_comm_bytes(&task, model);
    task
}

/// Per-rank bytes received by the K/V all-gather of per-document context parallelism.
pub fn allgather_volume_cp(total_tokens: Tokens, cp_degree: u64, model: &ModelConfig) -> Bytes {
    if cp_degree <= 1 {
        return 0;
    }
    total_tokens * model.size_kv * (cp_degree - 1) / cp_degree
}

/// Input to the minimal-communication shard search.
///
/// `l_q`/`l_kv` are the item's query length and key/value extent; for
/// head-tail items they describe the head half and `l_doc` the full document.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CommQuery {
    pub delta_f_max: Flops,
    pub f_item: Flops,
    pub l_q: Tokens,
    pub l_kv: Tokens,
    pub l_doc: Tokens,
    pub size_q: Bytes,
    pub size_kv: Bytes,
    pub layout: Layout,
}

impl CommQuery {
    pub fn for_item(item: &Item, delta_f_max: Flops, f_item: Flops, model: &ModelConfig) -> Self {
        Self {
            delta_f_max,
            f_item,
            l_q: item.n_q(),
            l_kv: item.kv_extent(),
            l_doc: item.doc_len,
            size_q: model.size_q,
            size_kv: model.size_kv,
            layout: item.layout,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.delta_f_max == 0 || self.f_item == 0 {
            return Err(Error::domain("flops must be positive"));
        }
        if self.delta_f_max > self.f_item {
            return Err(Error::domain(format!(
                "target fraction {}/{} exceeds 1",
                self.delta_f_max, self.f_item
            )));
        }
        if self.l_q == 0 || self.l_q > self.l_kv {
            return Err(Error::domain(format!("need 0 < L_q <= L_kv, got {} and {}", self.l_q, self.l_kv)));
        }
        if self.layout == Layout::HeadTail && 2 * self.l_kv > self.l_doc {
            return Err(Error::domain("head-tail head half extends past the document middle"));
        }
        if self.size_q == 0 || self.size_kv == 0 {
            return Err(Error::domain("state sizes must be positive"));
        }
        Ok(())
    }

    /// Causal work of the full item's (head) range, `L_q (2 L_kv - L_q)`.
    pub fn full_work(&self) -> u128 {
        let (q, kv) = (self.l_q as u128, self.l_kv as u128);
        q * (2 * kv - q)
    }

    pub fn comm(&self, n_q: Tokens, n_kv: Tokens) -> Bytes {
        comm_for(self.layout, n_q, n_kv, self.l_doc, self.size_q, self.size_kv)
    }

    /// Whether `(n_q, n_kv)` satisfies the range constraints and delivers at
    /// least the requested fraction of the item's work.
    pub fn admits(&self, n_q: Tokens, n_kv: Tokens) -> bool {
        if n_q == 0 || n_q > self.l_q || n_kv > self.l_kv || n_kv < n_q + (self.l_kv - self.l_q) {
            return false;
        }
        let work = n_q as u128 * (2 * n_kv as u128 - n_q as u128);
        work * self.f_item >= self.delta_f_max * self.full_work()
    }
}

/// Continuous optimum `(n_q, n_kv, bytes)` of the shard problem.
///
/// Along the work constraint `n_q (2 n_kv - n_q) = f W` the contiguous cost is
/// convex in `n_q` with its unconstrained minimum at
/// `sqrt(f r W / (r + 2))` (`r = size_kv / size_q`). The feasible `n_q`
/// interval is bounded below by the shard ending at `L_kv` and above by the
/// shard starting at the item's first token, so the minimum is clamped into
/// it. The head-tail cost increases with `n_q`, so its optimum is the lower end.
pub fn continuous_optimum<T: Scalar>(q: &CommQuery) -> (T, T, T) {
    let two = T::of_f64(2.0);
    let frac = T::of_u128(q.delta_f_max) / T::of_u128(q.f_item);
    let l_q = T::of_u64(q.l_q);
    let l_kv = T::of_u64(q.l_kv);
    let target = frac * T::of_u128(q.full_work());
    let lead = l_kv - l_q;

    let lowest = l_kv - (l_kv * l_kv - target).max(T::zero()).sqrt();
    let highest = (lead * lead + target).sqrt() - lead;
    let n_q = match q.layout {
        Layout::Contiguous => {
            let ratio = T::of_u64(q.size_kv) / T::of_u64(q.size_q);
            (frac * ratio * T::of_u128(q.full_work()) / (ratio + two)).sqrt().max(lowest).min(highest)
        }
        Layout::HeadTail => lowest,
    };
    let n_kv = ((target / n_q + n_q) / two).min(l_kv);
    let bytes = match q.layout {
        Layout::Contiguous => n_q * T::of_u64(q.size_q) + n_kv * T::of_u64(q.size_kv),
        Layout::HeadTail => n_q * T::of_u64(q.size_q) + (T::of_u64(q.l_doc) - (n_kv - n_q)) * T::of_u64(q.size_kv),
    };
    (n_q, n_kv, bytes)
}

/// Tile-aligned shard chosen by [`v_min_comm`].
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct ShardChoice {
    pub n_q: Tokens,
    pub n_kv: Tokens,
    pub bytes: Bytes,
    /// Continuous optimum before rounding: `(n_q, n_kv, bytes)`.
    pub continuous: (f64, f64, f64),
}

impl ShardChoice {
    pub fn is_whole(&self, q: &CommQuery) -> bool {
        self.n_q == q.l_q && self.n_kv == q.l_kv
    }
}

fn round_up(x: Tokens, tile: Tokens) -> Tokens {
    x.div_ceil(tile) * tile
}

/// Smallest `n_kv >= lo` that is a tile multiple or `L_kv`.
fn aligned_kv_at_least(lo: Tokens, q: &CommQuery, tile: Tokens) -> Option<Tokens> {
    if lo > q.l_kv {
        return None;
    }
    let up = round_up(lo, tile);
    Some(if up <= q.l_kv { up } else { q.l_kv })
}

/// Minimal-communication shard carrying at least `delta_f_max / f_item` of the
/// item's work, with `n_q` and `n_kv` on the tile grid (or at the item bounds).
///
/// Starts from the closed-form continuous optimum, rounds up and re-projects
/// onto the feasible set by checking the aligned neighbours of the optimum.
pub fn v_min_comm(q: &CommQuery, tile: Tokens) -> Result<ShardChoice> {
    q.validate()?;
    let tile = tile.max(1);
    let (cq, ckv, cbytes): (f64, f64, f64) = continuous_optimum(q);
    let continuous = (cq, ckv, cbytes);
    if q.delta_f_max == q.f_item {
        return Ok(ShardChoice {
            n_q: q.l_q,
            n_kv: q.l_kv,
            bytes: q.comm(q.l_q, q.l_kv),
            continuous,
        });
    }

    let lowest: f64 = {
        let frac = q.delta_f_max as f64 / q.f_item as f64;
        let l_kv = q.l_kv as f64;
        l_kv - (l_kv * l_kv - frac * q.full_work() as f64).max(0.0).sqrt()
    };
    let mut candidates: Vec<Tokens> = Vec::new();
    for centre in [cq, lowest] {
        let base = (centre / tile as f64).floor() as i64;
        for k in (base - 3)..=(base + 4) {
            if k >= 1 {
                candidates.push(k as Tokens * tile);
            }
        }
    }
    candidates.push(q.l_q);
    candidates.retain(|&n| n >= 1 && n <= q.l_q);
    candidates.sort_unstable();
    candidates.dedup();

    let full = q.full_work();
    let mut best: Option<(Bytes, Tokens, Tokens)> = None;
    for n_q in candidates {
        // Smallest integer n_kv with n_q (2 n_kv - n_q) f_item >= delta W.
        let need = q.delta_f_max * full;
        let per = n_q as u128 * q.f_item;
        let twice_kv = need.div_ceil(per) + n_q as u128;
        let kv_work = (twice_kv.div_ceil(2)) as Tokens;
        let lo = kv_work.max(n_q + (q.l_kv - q.l_q));
        let Some(min_kv) = aligned_kv_at_least(lo, q, tile) else {
            continue;
        };
        for n_kv in [min_kv, q.l_kv] {
            if !q.admits(n_q, n_kv) {
                continue;
            }
            let bytes = q.comm(n_q, n_kv);
            if best.map_or(true, |(b, bq, _)| bytes < b || (bytes == b && n_q < bq)) {
                best = Some((bytes, n_q, n_kv));
            }
        }
    }

    let (bytes, n_q, n_kv) = best.unwrap_or((q.comm(q.l_q, q.l_kv), q.l_q, q.l_kv));
    Ok(ShardChoice {
        n_q,
        n_kv,
        bytes,
        continuous,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn query(delta: Flops, l_q: Tokens, l_kv: Tokens, layout: Layout) -> CommQuery {
        let full = (l_q as u128) * (2 * l_kv as u128 - l_q as u128);
        CommQuery {
            delta_f_max: delta,
            f_item: full,
            l_q,
            l_kv,
            l_doc: 2 * l_kv.max(l_q) + 512,
            size_q: 16384,
            size_kv: 4096,
            layout,
        }
    }

    #[test]
    fn appendix_bound_for_34b() {
        let cluster = ClusterConfig::h200(8);
        let b = shard_count_upper_bound(&ModelConfig::llama_34b(), &cluster);
        assert_eq!(b.per_token_flops, 1320 << 20);
        assert_relative_eq!(b.token_time_s, 2.796e-6, max_relative = 1e-3);
        assert_eq!(b.max_shards, Some(31));
        assert!(!b.communication_bound);
    }

    #[test]
    fn bound_grows_with_bandwidth_and_width() {
        let model = ModelConfig::llama_34b();
        let mut cluster = ClusterConfig::h200(8);
        let base = shard_count_upper_bound(&model, &cluster).raw_bound;
        cluster.interconnect_bandwidth *= 2.0;
        assert!(shard_count_upper_bound(&model, &cluster).raw_bound > base);
        cluster.interconnect_bandwidth = f64::INFINITY;
        assert_eq!(shard_count_upper_bound(&model, &cluster).max_shards, None);

        let cluster = ClusterConfig::h200(8);
        let wide = crate::model::derive_sizes(&ModelConfig {
            hidden: 16384,
            num_heads: 128,
            ..model.clone()
        })
        .unwrap();
        let wide_bound = shard_count_upper_bound(&wide, &cluster);
        assert!(wide_bound.max_shards.unwrap() > 31);
    }

    #[test]
    fn starved_link_is_communication_bound() {
        let mut cluster = ClusterConfig::h200(8);
        cluster.interconnect_bandwidth = 1e6;
        let b = shard_count_upper_bound(&ModelConfig::llama_34b(), &cluster);
        assert!(b.communication_bound);
        assert_eq!(b.max_shards, Some(0));
    }

    #[test]
    fn task_bytes_examples() {
        let model = ModelConfig {
            size_q: 16384,
            size_kv: 4096,
            kv_counts_both: false,
            ..ModelConfig::llama_34b()
        };
        let item = Item::contiguous(0, 4096, 896, 1024, 0).unwrap();
        assert_eq!(make_task(item, 0, &model).comm_bytes, 0);
        assert_eq!(make_task(item, 1, &model).comm_bytes, 6_291_456);

        let ht = Item::head_tail(0, 8192, 896, 1024, 0).unwrap();
        assert_eq!(make_task(ht, 1, &model).comm_bytes, 31_981_568);

        let whole = Item::contiguous(0, 2048, 0, 2048, 0).unwrap();
        assert_eq!(dispatch_bytes(&whole, &model), 2048 * 16384 + 2048 * 4096);
        assert_eq!(output_bytes(&item, &model), 128 * 16384);
    }

    #[test]
    fn allgather_volume_examples() {
        let model = ModelConfig {
            size_kv: 4096,
            ..ModelConfig::llama_8b()
        };
        assert_eq!(allgather_volume_cp(1024, 1, &model), 0);
        assert_eq!(allgather_volume_cp(1024, 2, &model), 2_097_152);
    }

    #[test]
    fn whole_item_fraction_moves_everything() {
        let q = query(0, 1024, 4096, Layout::Contiguous);
        let q = CommQuery {
            delta_f_max: q.f_item,
            ..q
        };
        let s = v_min_comm(&q, 128).unwrap();
        assert_eq!((s.n_q, s.n_kv), (1024, 4096));
        assert_eq!(s.bytes, q.comm(1024, 4096));
    }

    #[test]
    fn fraction_above_one_is_a_domain_error() {
        let q = query(0, 1024, 4096, Layout::Contiguous);
        let q = CommQuery {
            delta_f_max: q.f_item + 1,
            ..q
        };
        assert!(matches!(v_min_comm(&q, 128), Err(Error::Domain(_))));
    }

    #[test]
    fn head_tail_optimum_specializes() {
        let l = 4096u64;
        let q = query(0, l, l, Layout::HeadTail);
        let q = CommQuery {
            delta_f_max: q.f_item * 3 / 8,
            l_doc: 2 * l,
            ..q
        };
        let (n_q, n_kv, _): (f64, f64, f64) = continuous_optimum(&q);
        let expect = l as f64 - l as f64 * (1.0f64 - 0.375).sqrt();
        assert_relative_eq!(n_q, expect, max_relative = 1e-12);
        assert_relative_eq!(n_kv, l as f64, max_relative = 1e-12);
    }

    #[test]
    fn rounded_choice_is_feasible() {
        let q = query(0, 3000, 9000, Layout::Contiguous);
        let q = CommQuery {
            delta_f_max: q.f_item / 3,
            ..q
        };
        let s = v_min_comm(&q, 128).unwrap();
        assert!(q.admits(s.n_q, s.n_kv));
        assert!(s.n_q % 128 == 0 || s.n_q == q.l_q);
        assert!(s.n_kv % 128 == 0 || s.n_kv == q.l_kv);
        assert!(s.bytes as f64 >= s.continuous.2 * 0.999);
    }
}
