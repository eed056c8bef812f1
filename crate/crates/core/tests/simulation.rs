//! Timeline invariants of the data-parallel simulator on random plans.

use cadsim_core::distca::plan_distca;
use cadsim_core::sim::{simulate_dp_iteration, EventKind, ExecutionPlan, OverlapMode, Resource, SimConfig, TimelineReport};
use cadsim_core::{assign_fixed, assign_per_doc_cp, ClusterConfig, CostCoefficients, Document, ModelConfig, SchedulerConfig, Tokens};
use proptest::prelude::*;

struct Setup {
    model: ModelConfig,
    coeff: CostCoefficients,
    cluster: ClusterConfig,
}

fn setup(devices: usize) -> Setup {
    let model = ModelConfig::llama_8b();
    let coeff = CostCoefficients::from_model(&model);
    Setup { model, coeff, cluster: ClusterConfig::h200(devices as u64) }
}

fn filling(total: Tokens, raw: &[Tokens]) -> Vec<Document> {
    let mut c: Vec<Tokens> = raw.iter().map(|r| r % total).filter(|&c| c > 0).collect();
    c.extend([0, total]);
    c.sort_unstable();
    c.dedup();
    c.windows(2).enumerate().map(|(i, w)| Document::new(i as u64, w[1] - w[0])).collect()
}

fn batch() -> impl Strategy<Value = (usize, Tokens, Vec<Document>)> {
    (2usize..=4, 8u64..=48, prop::collection::vec(any::<u64>(), 0..10)).prop_map(|(devices, tiles, raw)| {
        let tpd = tiles * 128;
        (devices, tpd, filling(tpd * devices as u64, &raw))
    })
}

fn run(s: &Setup, plan: &ExecutionPlan, mode: OverlapMode) -> TimelineReport {
    simulate_dp_iteration(plan, &s.model, &s.coeff, &s.cluster, &SimConfig::with_mode(mode))
}

fn distca(s: &Setup, devices: usize, tpd: Tokens, docs: &[Document]) -> ExecutionPlan {
    plan_distca(docs, devices, tpd, &s.model, &s.coeff, &SchedulerConfig::default()).unwrap().execution
}

/// Lower bound from total work spread perfectly over every device.
fn work_bound(s: &Setup, docs: &[Document], devices: usize, cfg: &SimConfig) -> f64 {
    let peak = s.cluster.device_peak_flops();
    let tokens: Tokens = docs.iter().map(|d| d.length).sum();
    let work: u128 = docs.iter().map(|d| (d.length as u128).pow(2)).sum();
    let linear = tokens as f64 * s.coeff.beta_linear as f64 / (s.cluster.mfu_linear * peak);
    let attention = s.coeff.alpha_ca as f64 * work as f64 / (s.cluster.mfu_attention * peak);
    s.model.num_layers as f64 * (1.0 + cfg.backward_ratio) * (linear + attention) / devices as f64
}

fn assert_streams_serial(r: &TimelineReport, mode: OverlapMode) -> Result<(), TestCaseError> {
    for d in &r.per_device {
        let on_compute = |e: &&cadsim_core::sim::Event| {
            mode == OverlapMode::SingleStream || e.resource == Resource::Compute || e.kind == EventKind::Allgather
        };
        for stream in [true, false] {
            let mut spans: Vec<(f64, f64)> =
                d.events.iter().filter(|e| on_compute(e) == stream).map(|e| (e.start, e.end)).collect();
            spans.sort_by(|a, b| a.0.total_cmp(&b.0));
            for w in spans.windows(2) {
                prop_assert!(w[1].0 >= w[0].1 - 1e-12, "device {} overlap {:?}", d.device, w);
            }
        }
    }
    Ok(())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn signal_ping_pong_single_stream_sandwich((devices, tpd, docs) in batch()) {
        let s = setup(devices);
        let plan = distca(&s, devices, tpd, &docs);
        let t = |m| run(&s, &plan, m).iteration_s;
        let (sg, pp, ss) = (t(OverlapMode::Signal), t(OverlapMode::PingPong), t(OverlapMode::SingleStream));
        prop_assert!(sg <= pp * (1.0 + 1e-12), "signal {} > ping-pong {}", sg, pp);
        prop_assert!(pp <= ss * (1.0 + 1e-12), "ping-pong {} > single-stream {}", pp, ss);
    }

    #[test]
    fn iteration_is_bounded_by_total_work((devices, tpd, docs) in batch()) {
        let s = setup(devices);
        let cfg = SimConfig::default();
        let bound = work_bound(&s, &docs, devices, &cfg);
        let plan = distca(&s, devices, tpd, &docs);
        prop_assert!(run(&s, &plan, OverlapMode::PingPong).iteration_s >= bound * (1.0 - 1e-9));
        let fixed = assign_fixed(&docs, devices, tpd, &s.model, &s.coeff).unwrap();
        prop_assert!(run(&s, &ExecutionPlan::from_baseline(&fixed), OverlapMode::PingPong).iteration_s >= bound * (1.0 - 1e-9));
    }

    #[test]
    fn report_totals_match_the_events((devices, tpd, docs) in batch(), mode in prop::sample::select(OverlapMode::ALL.to_vec())) {
        let s = setup(devices);
        let r = run(&s, &distca(&s, devices, tpd, &docs), mode);
        let latest = r.per_device.iter().map(|d| d.completion_s).fold(0.0, f64::max);
        prop_assert_eq!(r.iteration_s, latest);
        for d in &r.per_device {
            prop_assert!(d.idle_s >= 0.0 && d.idle_s <= r.iteration_s);
            let busy = d.busy_compute_s + d.busy_comm_s - d.overlapped_s;
            prop_assert!((r.iteration_s - busy - d.idle_s).abs() <= 1e-9 * r.iteration_s.max(1e-30));
        }
        assert_streams_serial(&r, mode)?;
        prop_assert_eq!(r.memory_divergence, 1.0);
    }

    #[test]
    fn per_doc_cp_streams_stay_serial((devices, tpd, docs) in batch()) {
        let s = setup(devices);
        let cp = if devices % 2 == 0 { 2 } else { 1 };
        let a = assign_per_doc_cp(&docs, devices, tpd, cp, &s.model, &s.coeff).unwrap();
        let plan = ExecutionPlan::from_baseline(&a);
        for mode in OverlapMode::ALL {
            assert_streams_serial(&run(&s, &plan, mode), mode)?;
        }
    }
}

#[test]
fn ping_pong_equals_single_stream_only_without_traffic() {
    let s = setup(2);
    let even: Vec<Document> = (0..4).map(|i| Document::new(i, 2048)).collect();
    let local = ExecutionPlan::from_baseline(&assign_fixed(&even, 2, 4096, &s.model, &s.coeff).unwrap());
    let (pp, ss) = (run(&s, &local, OverlapMode::PingPong), run(&s, &local, OverlapMode::SingleStream));
    assert_eq!(pp.total_wire_bytes, 0);
    assert_eq!(pp.iteration_s, ss.iteration_s);

    let skewed = vec![Document::new(0, 6144), Document::new(1, 2048)];
    let moved = distca(&s, 2, 4096, &skewed);
    let (pp, ss) = (run(&s, &moved, OverlapMode::PingPong), run(&s, &moved, OverlapMode::SingleStream));
    assert!(pp.total_wire_bytes > 0);
    assert!(pp.iteration_s < ss.iteration_s);
}
