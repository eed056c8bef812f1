//! Batch experiments: sample batches, plan every strategy, simulate, average.

use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::baselines::{
    assign_fixed, assign_per_doc_cp, assign_varlen, assign_wlb_candidate, cp_degrees, BaselineAssignment, Strategy,
};
use crate::cost::{ca_flops, CostCoefficients};
use crate::distca::plan_distca;
use crate::error::{Error, Result};
use crate::model::{derive_sizes, Bytes, ClusterConfig, Document, ModelConfig, Tokens};
use crate::scheduler::{write_plan_csv, SchedulerConfig};
use crate::sim::{simulate_dp_iteration, trace_json, ExecutionPlan, OverlapMode, SimConfig, TimelineReport};
use crate::workload::{batch_seed, sample_batch, LengthDistribution};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ModelSpec {
    Preset(String),
    Custom(ModelConfig),
}

impl ModelSpec {
    pub fn resolve(&self) -> Result<ModelConfig> {
        match self {
            ModelSpec::Preset(name) => match name.as_str() {
                "llama_8b" | "llama-8b" => Ok(ModelConfig::llama_8b()),
                "llama_34b" | "llama-34b" => Ok(ModelConfig::llama_34b()),
                other => Err(Error::config(format!("unknown model preset `{other}`"))),
            },
            ModelSpec::Custom(m) => derive_sizes(m),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ClusterSpec {
    Preset {
        preset: String,
        num_gpus: u64,
        #[serde(default)]
        tp: Option<u64>,
    },
    Custom(ClusterConfig),
}

impl ClusterSpec {
    pub fn resolve(&self) -> Result<ClusterConfig> {
        match self {
            ClusterSpec::Preset { preset, num_gpus, tp } => match preset.as_str() {
                "h200" => {
                    let mut c = ClusterConfig::h200(*num_gpus);
                    if let Some(tp) = tp {
                        c.tp = *tp;
                        c.dp = num_gpus / tp.max(&1);
                    }
                    Ok(c)
                }
                other => Err(Error::config(format!("unknown cluster preset `{other}`"))),
            },
            ClusterSpec::Custom(c) => Ok(c.clone()),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepAxis {
    Epsilon,
    CpDegree,
    MaxDocLen,
    Bandwidth,
}

impl SweepAxis {
    pub fn name(self) -> &'static str {
        match self {
            SweepAxis::Epsilon => "epsilon",
            SweepAxis::CpDegree => "cp_degree",
            SweepAxis::MaxDocLen => "max_doc_len",
            SweepAxis::Bandwidth => "bandwidth",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Sweep {
    pub axis: SweepAxis,
    pub values: Vec<f64>,
}

fn default_name() -> String {
    "experiment".into()
}
fn default_batches() -> usize {
    30
}
fn default_epsilon() -> f64 {
    SchedulerConfig::default().epsilon
}
fn default_e_threshold() -> f64 {
    SchedulerConfig::default().e_threshold
}
fn default_cp_degree() -> u64 {
    2
}
fn default_modes() -> Vec<OverlapMode> {
    vec![OverlapMode::PingPong]
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentSpec {
    #[serde(default = "default_name")]
    pub name: String,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_batches")]
    pub batches: usize,
    pub model: ModelSpec,
    pub cluster: ClusterSpec,
    pub distribution: LengthDistribution,
    /// Document lengths used for every batch instead of sampling.
    #[serde(default)]
    pub documents: Vec<Tokens>,
    /// Tokens each device computes per iteration (the chunk length).
    pub tokens_per_device: Tokens,
    pub strategies: Vec<String>,
    #[serde(default = "default_epsilon")]
    pub epsilon: f64,
    #[serde(default = "default_e_threshold")]
    pub e_threshold: f64,
    /// Degree used by `per_doc_cp`.
    #[serde(default = "default_cp_degree")]
    pub cp_degree: u64,
    #[serde(default = "default_modes")]
    pub modes: Vec<OverlapMode>,
    #[serde(default)]
    pub sim: SimConfig,
    #[serde(default)]
    pub sweep: Option<Sweep>,
}

impl ExperimentSpec {
    pub fn from_toml(text: &str) -> Result<Self> {
        Ok(toml::from_str(text)?)
    }

    pub fn strategies(&self) -> Result<Vec<Strategy>> {
        if self.strategies.is_empty() {
            return Err(Error::config("at least one strategy is required"));
        }
        self.strategies.iter().map(|s| s.parse()).collect()
    }

    /// Validated, fully-resolved configuration for one sweep point.
    pub fn resolve(&self, sweep_value: Option<f64>) -> Result<Resolved> {
        let model = self.model.resolve()?;
        model.validate()?;
        let mut cluster = self.cluster.resolve()?;
        let mut distribution = self.distribution.clone();
        let mut scheduler = SchedulerConfig {
            epsilon: self.epsilon,
            e_threshold: self.e_threshold,
            tile_size: cluster.tile_size,
            ..SchedulerConfig::default()
        };
        let mut cp_degree = self.cp_degree;
        if let (Some(sweep), Some(v)) = (&self.sweep, sweep_value) {
            match sweep.axis {
                SweepAxis::Epsilon => scheduler.epsilon = v,
                SweepAxis::CpDegree => cp_degree = v as u64,
                SweepAxis::MaxDocLen => distribution.max_doc_len = v as Tokens,
                SweepAxis::Bandwidth => cluster.interconnect_bandwidth = v,
            }
        }
        scheduler.tile_size = cluster.tile_size;
        if !(scheduler.epsilon >= 0.0) {
            return Err(Error::config("epsilon must be >= 0"));
        }
        if self.batches == 0 || self.tokens_per_device == 0 {
            return Err(Error::config("batches and tokens_per_device must be >= 1"));
        }
        if self.modes.is_empty() {
            return Err(Error::config("at least one overlap mode is required"));
        }
        distribution.validate()?;
        cluster.validate().map_err(|e| Error::Infeasible(e.to_string()))?;
        if cluster.num_gpus % cluster.tp != 0 {
            return Err(Error::Infeasible(format!("tp {} does not divide {} GPUs", cluster.tp, cluster.num_gpus)));
        }
        if cluster.pp > 1 {
            return Err(Error::Infeasible("batch experiments run data-parallel clusters only (pp = 1)".into()));
        }
        let devices = cluster.logical_devices();
        let total: Tokens = self.documents.iter().sum();
        if !self.documents.is_empty() && (self.documents.contains(&0) || total != self.tokens_per_device * devices as Tokens) {
            return Err(Error::config(format!(
                "documents must be non-empty and hold {} x {} tokens, got {total}",
                devices, self.tokens_per_device
            )));
        }
        let strategies = self.strategies()?;
        if strategies.contains(&Strategy::PerDocCp) && (cp_degree == 0 || devices % cp_degree as usize != 0) {
            return Err(Error::Infeasible(format!("cp_degree {cp_degree} does not divide {devices} devices")));
        }
        Ok(Resolved {
            coeff: CostCoefficients::from_model(&model),
            model,
            cluster,
            distribution,
            documents: self.documents.clone(),
            scheduler,
            cp_degree,
            devices,
            tokens_per_device: self.tokens_per_device,
            strategies,
        })
    }

    pub fn sweep_points(&self) -> Vec<Option<f64>> {
        match &self.sweep {
            Some(s) => s.values.iter().map(|&v| Some(v)).collect(),
            None => vec![None],
        }
    }

    pub fn validate(&self) -> Result<()> {
        if let Some(s) = &self.sweep {
            if s.values.is_empty() {
                return Err(Error::config("sweep values must not be empty"));
            }
        }
        for p in self.sweep_points() {
            self.resolve(p)?;
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct Resolved {
    pub model: ModelConfig,
    pub cluster: ClusterConfig,
    pub coeff: CostCoefficients,
    pub distribution: LengthDistribution,
    pub documents: Vec<Tokens>,
    pub scheduler: SchedulerConfig,
    pub cp_degree: u64,
    pub devices: usize,
    pub tokens_per_device: Tokens,
    pub strategies: Vec<Strategy>,
}

impl Resolved {
    pub fn memory_capacity(&self) -> Bytes {
        self.cluster.memory_capacity * self.cluster.tp
    }

    pub fn sample(&self, seed: u64, batch: usize) -> Result<Vec<Document>> {
        if !self.documents.is_empty() {
            return Ok(self.documents.iter().enumerate().map(|(i, &l)| Document::new(i as u64, l)).collect());
        }
        let dist = self.distribution.with_seed(batch_seed(seed, batch as u64));
        sample_batch(&dist, self.tokens_total())
    }

    fn tokens_total(&self) -> Tokens {
        self.tokens_per_device * self.devices as Tokens
    }
}

/// One strategy planned for one batch, ready to simulate under any mode.
#[derive(Clone, Debug)]
pub struct PlannedStrategy {
    pub strategy: Strategy,
    pub cp_degree: u64,
    pub execution: ExecutionPlan,
    /// Bytes moved per layer, all lanes.
    pub comm_bytes: Bytes,
    pub tolerance_met: bool,
    pub plan_csv: Option<Vec<u8>>,
}

fn from_baseline(a: &BaselineAssignment) -> PlannedStrategy {
    PlannedStrategy {
        strategy: a.strategy,
        cp_degree: a.cp_degree,
        execution: ExecutionPlan::from_baseline(a),
        comm_bytes: a.comm_bytes.iter().sum(),
        tolerance_met: true,
        plan_csv: None,
    }
}

fn simulate(r: &Resolved, plan: &ExecutionPlan, sim: &SimConfig) -> TimelineReport {
    simulate_dp_iteration(plan, &r.model, &r.coeff, &r.cluster, sim)
}

/// Plans `strategy` on `docs`. `wlb_ideal` sweeps the context-parallel
/// degree and keeps the fastest configuration that fits in memory.
pub fn plan_strategy(
    r: &Resolved,
    docs: &[Document],
    strategy: Strategy,
    sim: &SimConfig,
    with_csv: bool,
) -> Result<PlannedStrategy> {
    let (m, c, n, tpd) = (&r.model, &r.coeff, r.devices, r.tokens_per_device);
    Ok(match strategy {
        Strategy::Fixed => from_baseline(&assign_fixed(docs, n, tpd, m, c)?),
        Strategy::Varlen => from_baseline(&assign_varlen(docs, n, m, c)?),
        Strategy::PerDocCp => from_baseline(&assign_per_doc_cp(docs, n, tpd, r.cp_degree, m, c)?),
        Strategy::WlbIdeal => {
            let mut best: Option<(bool, f64, PlannedStrategy)> = None;
            for cp in cp_degrees(n) {
                let cand = from_baseline(&assign_wlb_candidate(docs, n, cp, m, c)?);
                let report = simulate(r, &cand.execution, sim);
                let oom = report.peak_memory() > r.memory_capacity();
                let key = (oom, report.iteration_s);
                if best.as_ref().map_or(true, |(o, t, _)| key < (*o, *t)) {
                    best = Some((oom, report.iteration_s, cand));
                }
            }
            best.expect("cp degree 1 always exists").2
        }
        Strategy::Distca => {
            let p = plan_distca(docs, n, tpd, m, c, &r.scheduler)?;
            let plan_csv = if with_csv {
                let mut buf = Vec::new();
                let tasks: Vec<_> = p.schedules.iter().flat_map(|s| s.tasks.iter().copied()).collect();
                write_plan_csv(&tasks, c, &mut buf)?;
                Some(buf)
            } else {
                None
            };
            PlannedStrategy {
                strategy,
                cp_degree: 1,
                comm_bytes: p.schedules.iter().map(|s| s.total_comm_bytes).sum(),
                tolerance_met: p.schedules.iter().all(|s| s.tolerance_met),
                execution: p.execution,
                plan_csv,
            }
        }
    })
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct BatchRow {
    pub sweep_axis: String,
    pub sweep_value: String,
    pub batch: usize,
    pub strategy: Strategy,
    pub mode: String,
    pub cp_degree: u64,
    pub iteration_s: f64,
    pub idle_fraction: f64,
    pub memory_divergence: f64,
    /// Max over min attention FLOPs per device.
    pub ca_flops_ratio: f64,
    pub wire_bytes: Bytes,
    pub comm_bytes_per_layer: Bytes,
    pub peak_memory: Bytes,
    pub oom: bool,
    pub tolerance_met: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SummaryRow {
    pub sweep_axis: String,
    pub sweep_value: String,
    pub strategy: Strategy,
    pub mode: String,
    pub batches: usize,
    pub mean_iteration_s: f64,
    pub mean_idle_fraction: f64,
    pub mean_memory_divergence: f64,
    pub mean_ca_flops_ratio: f64,
    pub mean_wire_bytes: f64,
    pub mean_comm_bytes_per_layer: f64,
    pub max_peak_memory: Bytes,
    pub oom_batches: usize,
    pub infeasible: bool,
}

#[derive(Clone, Debug, Default)]
pub struct ExperimentOutput {
    pub summary: Vec<SummaryRow>,
    pub batches: Vec<BatchRow>,
    /// `(relative file name, contents)` of plan exports and traces.
    pub artifacts: Vec<(String, Vec<u8>)>,
}

#[derive(Clone, Copy, Debug)]
pub struct RunOptions {
    pub jobs: usize,
    /// Collect per-batch plan exports and batch-0 traces.
    pub artifacts: bool,
}

impl Default for RunOptions {
    fn default() -> Self {
        Self {
            jobs: 1,
            artifacts: false,
        }
    }
}

fn ca_flops_ratio(plan: &ExecutionPlan, coeff: &CostCoefficients) -> f64 {
    let mut flops = vec![0u128; plan.num_devices()];
    for t in plan.lanes.iter().flat_map(|l| &l.tasks) {
        flops[t.assigned_server] += ca_flops(&t.item, coeff);
    }
    let (max, min) = (flops.iter().max().copied().unwrap_or(0), flops.iter().min().copied().unwrap_or(0));
    match (max, min) {
        (0, _) => 1.0,
        (_, 0) => f64::INFINITY,
        _ => max as f64 / min as f64,
    }
}

fn sweep_label(spec: &ExperimentSpec, value: Option<f64>) -> (String, String) {
    match (&spec.sweep, value) {
        (Some(s), Some(v)) => (s.axis.name().into(), v.to_string()),
        _ => (String::new(), String::new()),
    }
}

fn run_batch(
    spec: &ExperimentSpec,
    r: &Resolved,
    point: usize,
    value: Option<f64>,
    batch: usize,
    opts: &RunOptions,
) -> Result<(Vec<BatchRow>, Vec<(String, Vec<u8>)>)> {
    let docs = r.sample(spec.seed, batch)?;
    let (axis, label) = sweep_label(spec, value);
    let mut rows = Vec::new();
    let mut artifacts = Vec::new();
    for &strategy in &r.strategies {
        for &mode in &spec.modes {
            let sim = SimConfig { mode, ..spec.sim };
            let planned = plan_strategy(r, &docs, strategy, &sim, opts.artifacts && mode == spec.modes[0])?;
            let report = simulate(r, &planned.execution, &sim);
            if opts.artifacts {
                if let Some(csv) = &planned.plan_csv {
                    artifacts.push((format!("plans/p{point}_b{batch:03}_{strategy}.csv"), csv.clone()));
                }
                if batch == 0 {
                    let trace = serde_json::to_vec(&trace_json(&report))?;
                    artifacts.push((format!("traces/p{point}_b000_{strategy}_{}.json", mode.name()), trace));
                }
            }
            let peak_memory = report.peak_memory();
            rows.push(BatchRow {
                sweep_axis: axis.clone(),
                sweep_value: label.clone(),
                batch,
                strategy,
                mode: mode.name().into(),
                cp_degree: planned.cp_degree,
                iteration_s: report.iteration_s,
                idle_fraction: report.imbalance_idle_fraction,
                memory_divergence: report.memory_divergence,
                ca_flops_ratio: ca_flops_ratio(&planned.execution, &r.coeff),
                wire_bytes: report.total_wire_bytes,
                comm_bytes_per_layer: planned.comm_bytes,
                peak_memory,
                oom: peak_memory > r.memory_capacity(),
                tolerance_met: planned.tolerance_met,
            });
        }
    }
    Ok((rows, artifacts))
}

fn summarize(rows: &[BatchRow]) -> Vec<SummaryRow> {
    let mut out: Vec<SummaryRow> = Vec::new();
    let mut keys: Vec<(String, Strategy, String)> = Vec::new();
    for row in rows {
        let key = (row.sweep_value.clone(), row.strategy, row.mode.clone());
        if !keys.contains(&key) {
            keys.push(key);
        }
    }
    for (value, strategy, mode) in keys {
        let group: Vec<&BatchRow> = rows
            .iter()
            .filter(|r| r.sweep_value == value && r.strategy == strategy && r.mode == mode)
            .collect();
        let n = group.len() as f64;
        let mean = |f: &dyn Fn(&BatchRow) -> f64| group.iter().map(|r| f(r)).sum::<f64>() / n;
        let oom_batches = group.iter().filter(|r| r.oom).count();
        out.push(SummaryRow {
            sweep_axis: group[0].sweep_axis.clone(),
            sweep_value: value,
            strategy,
            mode,
            batches: group.len(),
            mean_iteration_s: mean(&|r| r.iteration_s),
            mean_idle_fraction: mean(&|r| r.idle_fraction),
            mean_memory_divergence: mean(&|r| r.memory_divergence),
            mean_ca_flops_ratio: mean(&|r| r.ca_flops_ratio),
            mean_wire_bytes: mean(&|r| r.wire_bytes as f64),
            mean_comm_bytes_per_layer: mean(&|r| r.comm_bytes_per_layer as f64),
            max_peak_memory: group.iter().map(|r| r.peak_memory).max().unwrap_or(0),
            oom_batches,
            infeasible: oom_batches > 0,
        });
    }
    out
}

/// Runs every sweep point, batch, strategy and mode. Batches run on up to
/// `opts.jobs` threads; results are merged in batch order.
pub fn run_experiment(spec: &ExperimentSpec, opts: &RunOptions) -> Result<ExperimentOutput> {
    spec.validate()?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(opts.jobs.max(1))
        .build()
        .map_err(|e| Error::config(e.to_string()))?;
    let mut output = ExperimentOutput::default();
    for (point, value) in spec.sweep_points().into_iter().enumerate() {
        let r = spec.resolve(value)?;
        let results: Vec<(Vec<BatchRow>, Vec<(String, Vec<u8>)>)> = pool.install(|| {
            (0..spec.batches)
                .into_par_iter()
                .map(|b| run_batch(spec, &r, point, value, b, opts))
                .collect::<Result<_>>()
        })?;
        for (rows, artifacts) in results {
            output.batches.extend(rows);
            output.artifacts.extend(artifacts);
        }
    }
    output.summary = summarize(&output.batches);
    Ok(output)
}

pub fn write_summary_csv<W: Write>(rows: &[SummaryRow], writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    for row in rows {
        w.serialize(row)?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_batches_csv<W: Write>(rows: &[BatchRow], writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    for row in rows {
        w.serialize(row)?;
    }
    w.flush()?;
    Ok(())
}

/// Fixed-width comparison table of the summary rows.
pub fn format_table(rows: &[SummaryRow]) -> String {
    let mut s = format!(
        "{:<12} {:<10} {:<14} {:>14} {:>8} {:>8} {:>8} {:>14} {:>4}\n",
        "sweep", "strategy", "mode", "iteration_s", "idle", "mem_div", "ca_ratio", "wire_bytes", "oom"
    );
    for r in rows {
        s.push_str(&format!(
            "{:<12} {:<10} {:<14} {:>14.6} {:>8.4} {:>8.4} {:>8.4} {:>14.0} {:>4}\n",
            r.sweep_value, r.strategy.name(), r.mode, r.mean_iteration_s, r.mean_idle_fraction,
            r.mean_memory_divergence, r.mean_ca_flops_ratio, r.mean_wire_bytes, r.oom_batches
        ));
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"
seed = 7
batches = 3
model = "llama_8b"
tokens_per_device = 4096
strategies = ["fixed", "distca"]

[cluster]
preset = "h200"
num_gpus = 4

[distribution]
kind = "fixed"
max_doc_len = 1024
"#;

    #[test]
    fn minimal_spec_parses_and_runs() {
        let spec = ExperimentSpec::from_toml(MINIMAL).unwrap();
        assert_eq!(spec.epsilon, 0.05);
        let out = run_experiment(&spec, &RunOptions::default()).unwrap();
        assert_eq!(out.summary.len(), 2);
        assert_eq!(out.batches.len(), 6);
        let fixed = &out.summary[0];
        assert!(fixed.mean_idle_fraction < 1e-9);
    }

    #[test]
    fn unknown_strategy_is_reported() {
        let text = MINIMAL.replace("\"distca\"", "\"ring\"");
        let spec = ExperimentSpec::from_toml(&text).unwrap();
        assert!(matches!(spec.validate(), Err(Error::UnknownStrategy(s)) if s == "ring"));
    }

    #[test]
    fn oversubscribed_cluster_is_infeasible() {
        let text = MINIMAL.replace("num_gpus = 4", "num_gpus = 4\ntp = 3");
        let spec = ExperimentSpec::from_toml(&text).unwrap();
        assert!(matches!(spec.validate(), Err(Error::Infeasible(_))));
    }

    #[test]
    fn explicit_documents_replace_sampling() {
        let text = MINIMAL.replace("num_gpus = 4", "num_gpus = 2").replace(
            "tokens_per_device = 4096",
            "tokens_per_device = 4096\ndocuments = [4096, 1024, 1024, 1024, 1024]",
        );
        let spec = ExperimentSpec::from_toml(&text).unwrap();
        let out = run_experiment(&spec, &RunOptions::default()).unwrap();
        let fixed = out.summary.iter().find(|r| r.strategy == Strategy::Fixed).unwrap();
        assert_eq!(fixed.mean_ca_flops_ratio, 4.0);
        assert_eq!(fixed.mean_memory_divergence, 1.0);
        let bad = ExperimentSpec::from_toml(&text.replace("4096, 1024,", "4096,")).unwrap();
        assert!(matches!(bad.validate(), Err(Error::Config(_))));
    }

    #[test]
    fn jobs_do_not_change_results() {
        let spec = ExperimentSpec::from_toml(MINIMAL).unwrap();
        let a = run_experiment(&spec, &RunOptions { jobs: 1, artifacts: false }).unwrap();
        let b = run_experiment(&spec, &RunOptions { jobs: 3, artifacts: false }).unwrap();
        assert_eq!(a.batches, b.batches);
    }
}
