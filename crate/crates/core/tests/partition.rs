//! Properties of items, cost formulas, communication volumes, packing and
//! the reference placements.

use cadsim_core::baselines::lpt_bins;
use cadsim_core::comm::{allgather_volume_cp, make_task};
use cadsim_core::cost::doc_ca_flops;
use cadsim_core::profiler::synth_grid;
use cadsim_core::*;
use proptest::prelude::*;

fn docs(lengths: &[Tokens]) -> Vec<Document> {
    lengths.iter().enumerate().map(|(i, &l)| Document::new(i as u64, l)).collect()
}

/// Sorted, deduplicated interior cut points of `[0, len)`.
fn cuts(len: Tokens, raw: &[Tokens]) -> Vec<Tokens> {
    let mut c: Vec<Tokens> = raw.iter().map(|r| r % len).filter(|&c| c > 0).collect();
    c.extend([0, len]);
    c.sort_unstable();
    c.dedup();
    c
}

/// Documents filling `total` tokens exactly, cut at `raw`.
fn filling(total: Tokens, raw: &[Tokens]) -> Vec<Document> {
    let lengths: Vec<Tokens> = cuts(total, raw).windows(2).map(|w| w[1] - w[0]).collect();
    docs(&lengths)
}

fn unit() -> CostCoefficients {
    CostCoefficients::new(7, 3, 5)
}

proptest! {
    #[test]
    fn contiguous_partition_conserves_tokens_and_flops(len in 1u64..100_000, raw in prop::collection::vec(any::<u64>(), 0..12)) {
        let coeff = CostCoefficients::from_model(&ModelConfig::llama_8b());
        let c = cuts(len, &raw);
        let items: Vec<Item> = c.windows(2).map(|w| Item::contiguous(0, len, w[0], w[1], 0).unwrap()).collect();
        prop_assert_eq!(items.iter().map(|i| i.n_q()).sum::<Tokens>(), len);
        let flops: u128 = items.iter().map(|i| ca_flops(i, &coeff)).sum();
        prop_assert_eq!(flops, coeff.alpha_ca as u128 * len as u128 * len as u128);
    }

    #[test]
    fn head_tail_ranks_carry_equal_flops(c in 1u64..16, width in 1u64..2048) {
        let coeff = unit();
        let len = 2 * c * width;
        let per_rank: Vec<u128> = (0..c)
            .map(|r| ca_flops(&Item::head_tail(0, len, r * width, (r + 1) * width, r as usize).unwrap(), &coeff))
            .collect();
        prop_assert!(per_rank.iter().all(|&f| f == per_rank[0]));
        prop_assert_eq!(per_rank.iter().sum::<u128>(), doc_ca_flops(len, &coeff));
    }

    #[test]
    fn whole_head_tail_item_covers_the_document_once(half in 1u64..50_000) {
        let item = Item::head_tail(0, 2 * half, 0, half, 0).unwrap();
        prop_assert_eq!(item.ranges(), vec![(0, half), (half, 2 * half)]);
        prop_assert_eq!(item.work(), (2 * half as u128).pow(2));
    }

    #[test]
    fn items_survive_a_json_round_trip(len in 2u64..1 << 40, a in any::<u64>(), b in any::<u64>(), home in 0usize..1024, tail in any::<bool>()) {
        let limit = if tail { len / 2 } else { len };
        let (s, e) = (a % limit, b % limit);
        let (s, e) = (s.min(e), s.max(e) + 1);
        let e = e.min(limit);
        prop_assume!(s < e);
        let item = if tail { Item::head_tail(a, len, s, e, home) } else { Item::contiguous(a, len, s, e, home) }.unwrap();
        let text = serde_json::to_string(&item).unwrap();
        let back: Item = serde_json::from_str(&text).unwrap();
        prop_assert_eq!(back, item);
    }

    #[test]
    fn activation_memory_adds_over_concatenation(a in prop::collection::vec(1u64..10_000, 0..8), b in prop::collection::vec(1u64..10_000, 0..8)) {
        let coeff = unit();
        let chunk = |lens: &[u64], first: u64| {
            let mut c = Chunk::new(0);
            c.segments = lens.iter().enumerate().map(|(i, &l)| Segment { doc: first + i as u64, start: 0, end: l }).collect();
            c
        };
        let (ca, cb) = (chunk(&a, 0), chunk(&b, 100));
        let mut both = ca.clone();
        both.segments.extend(cb.segments.iter().copied());
        prop_assert_eq!(activation_memory(&both, &coeff), activation_memory(&ca, &coeff) + activation_memory(&cb, &coeff));
    }

    #[test]
    fn profiler_lookup_is_monotone(q in 128u64..16_384, kv in 128u64..16_384, dq in 0u64..4096, dkv in 0u64..4096) {
        let model = ModelConfig::llama_8b();
        let grid: ProfilerGrid = synth_grid(&CostCoefficients::from_model(&model), &ClusterConfig::h200(8), 1 << 15);
        let base = grid.lookup(q, kv).unwrap();
        prop_assert!(grid.lookup(q + dq, kv).unwrap() >= base);
        prop_assert!(grid.lookup(q, kv + dkv).unwrap() >= base);
    }

    #[test]
    fn v_min_bytes_grow_with_the_fraction(seed in any::<u64>(), f1 in 0.0f64..1.0, f2 in 0.0f64..1.0) {
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let mut q = cadsim_core::oracle::random_query(&mut rng, 128);
        let at = |f: f64| ((q.f_item as f64 * f).ceil() as u128).clamp(1, q.f_item);
        let (lo, hi) = (at(f1.min(f2)), at(f1.max(f2)));
        q.delta_f_max = lo;
        let small = v_min_comm(&q, 128).unwrap();
        prop_assert!(q.admits(small.n_q, small.n_kv));
        q.delta_f_max = hi;
        let large = v_min_comm(&q, 128).unwrap();
        prop_assert!(q.admits(large.n_q, large.n_kv));
        prop_assert!(small.bytes <= large.bytes, "{} > {}", small.bytes, large.bytes);
    }

    #[test]
    fn whole_document_dispatch_moves_q_and_kv(len in 1u64..1 << 20) {
        let model = ModelConfig::llama_34b();
        let task = make_task(Item::whole(&Document::new(0, len), 0), 1, &model);
        prop_assert_eq!(task_comm_bytes(&task, &model), len * (model.size_q + model.size_kv));
    }

    #[test]
    fn shard_bound_grows_with_bandwidth(gib in 1u64..400, extra in 1u64..400) {
        let model = ModelConfig::llama_34b();
        let mut cluster = ClusterConfig::h200(8);
        cluster.interconnect_bandwidth = (gib << 30) as f64;
        let low = shard_count_upper_bound(&model, &cluster);
        cluster.interconnect_bandwidth = ((gib + extra) << 30) as f64;
        let high = shard_count_upper_bound(&model, &cluster);
        prop_assert!(high.raw_bound > low.raw_bound);
        prop_assert!(high.max_shards >= low.max_shards);
    }

    #[test]
    fn packing_outputs_are_valid_chunkings(tpd in 1u64..20_000, devices in 1usize..8, raw in prop::collection::vec(any::<u64>(), 0..24)) {
        let d = filling(tpd * devices as u64, &raw);
        let packed = pack_fixed(&d, tpd, devices).unwrap();
        prop_assert!(validate_chunking(&d, &packed).is_ok());
        let placed = place_sequential(&d, devices, tpd).unwrap();
        prop_assert!(validate_chunking(&d, &placed).is_ok());
        prop_assert!(placed.iter().all(|c| c.total_tokens() == tpd));
    }

    #[test]
    fn sampled_lengths_stay_in_range(seed in any::<u64>(), max in 2u64..1 << 20) {
        let dist = LengthDistribution::pretrain_upsampled(max, 0, seed);
        let mut a = LengthSampler::new(&dist).unwrap();
        let mut b = LengthSampler::new(&dist).unwrap();
        for _ in 0..64 {
            let l = a.sample_length();
            prop_assert!((1..=max).contains(&l));
            prop_assert_eq!(l, b.sample_length());
        }
    }

    #[test]
    fn per_doc_cp_ranks_share_each_document_equally(tpd in 1u64..8192, raw in prop::collection::vec(any::<u64>(), 0..12), cp_exp in 0u32..3) {
        let model = ModelConfig::llama_8b();
        let coeff = unit();
        let cp = 1u64 << cp_exp;
        let devices = 4usize;
        let d = filling(tpd * devices as u64, &raw);
        let a = assign_per_doc_cp(&d, devices, tpd, cp, &model, &coeff).unwrap();
        prop_assert!(validate_chunking(&d, &a.chunks).is_ok());
        if cp > 1 {
            // Per (document, group start) the ranks' flops must be equal.
            let mut per: std::collections::BTreeMap<(u64, Tokens), Vec<(usize, u128)>> = Default::default();
            for t in &a.tasks {
                let group = t.item.home / cp as usize;
                let seg = per.entry((t.item.doc, group as Tokens)).or_default();
                match seg.iter_mut().find(|(dev, _)| *dev == t.item.home) {
                    Some((_, f)) => *f += ca_flops(&t.item, &coeff),
                    None => seg.push((t.item.home, ca_flops(&t.item, &coeff))),
                }
            }
            for ranks in per.values() {
                prop_assert!(ranks.iter().all(|&(_, f)| f == ranks[0].1), "{:?}", ranks);
            }
            for g in 0..devices / cp as usize {
                let ranks = g * cp as usize..(g + 1) * cp as usize;
                let volume = allgather_volume_cp(a.per_device_tokens[ranks.clone()].iter().sum(), cp, &model);
                prop_assert!(a.allgather_bytes[ranks].iter().all(|&b| b == volume));
            }
        }
    }

    #[test]
    fn prefix_fetches_sum_to_the_non_allgather_bytes(tpd in 1u64..8192, raw in prop::collection::vec(any::<u64>(), 0..16), cp_exp in 0u32..3) {
        let model = ModelConfig::llama_8b();
        let coeff = unit();
        let d = filling(4 * tpd, &raw);
        for a in [
            assign_fixed(&d, 4, tpd, &model, &coeff).unwrap(),
            assign_per_doc_cp(&d, 4, tpd, 1 << cp_exp, &model, &coeff).unwrap(),
        ] {
            let mut fetched = vec![0u64; 4];
            for &(from, to, bytes) in &a.fetches {
                prop_assert_ne!(from, to);
                fetched[to] += bytes;
            }
            let expect: Vec<u64> = a.comm_bytes.iter().zip(&a.allgather_bytes).map(|(c, g)| c - g).collect();
            prop_assert_eq!(fetched, expect);
        }
    }

    #[test]
    fn strategies_conserve_tokens_and_flops(tpd in 1u64..8192, raw in prop::collection::vec(any::<u64>(), 0..16)) {
        let model = ModelConfig::llama_8b();
        let coeff = unit();
        let total = 4 * tpd;
        let d = filling(total, &raw);
        let expect: u128 = d.iter().map(|doc| doc_ca_flops(doc.length, &coeff)).sum();
        for a in [
            assign_fixed(&d, 4, tpd, &model, &coeff).unwrap(),
            assign_varlen(&d, 4, &model, &coeff).unwrap(),
            assign_wlb_candidate(&d, 4, 1, &model, &coeff).unwrap(),
        ] {
            prop_assert!(validate_chunking(&d, &a.chunks).is_ok());
            prop_assert_eq!(a.per_device_tokens.iter().sum::<u64>(), total);
            prop_assert_eq!(a.per_device_flops.iter().sum::<u128>(), expect);
        }
    }

    /// LPT on `sum l^2` is within Graham's `4/3 - 1/(3m)` of the best
    /// whole-document placement.
    #[test]
    fn lpt_is_within_grahams_bound(lens in prop::collection::vec(1u64..4096, 1..8), bins in 1usize..4) {
        let d = docs(&lens);
        let sq = |i: usize| (lens[i] as u128).pow(2);
        let lpt = lpt_bins(&d, bins).iter().map(|b| b.iter().map(|&i| sq(i)).sum::<u128>()).max().unwrap();
        let mut best = u128::MAX;
        for code in 0..bins.pow(lens.len() as u32) {
            let mut loads = vec![0u128; bins];
            let mut c = code;
            for i in 0..lens.len() {
                loads[c % bins] += sq(i);
                c /= bins;
            }
            best = best.min(*loads.iter().max().unwrap());
        }
        prop_assert!(3 * bins as u128 * lpt <= (4 * bins as u128 - 1) * best, "lpt {} best {}", lpt, best);
    }
}

#[test]
fn lpt_can_lose_to_first_fit_when_documents_split() {
    // First-fit splits doc 1 across both chunks and lowers the peak below what
    // any whole-document placement reaches.
    let coeff = CostCoefficients::new(1, 0, 1);
    let model = ModelConfig::llama_8b();
    let d = docs(&[3, 3, 2]);
    let fixed = assign_fixed(&d, 2, 4, &model, &coeff).unwrap();
    let varlen = assign_varlen(&d, 2, &model, &coeff).unwrap();
    assert_eq!(fixed.per_device_flops.iter().max(), Some(&12));
    assert_eq!(varlen.per_device_flops.iter().max(), Some(&13));
}
