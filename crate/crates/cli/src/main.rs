//! `cadsim`: run experiment specs, brute-force oracles and the shard bound
//! from the command line.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use cadsim_core::experiment::{
    format_table, run_experiment, write_batches_csv, write_summary_csv, ClusterSpec, ExperimentSpec, RunOptions,
};
use cadsim_core::oracle::{flops_enumeration, scheduler_oracle, v_oracle};
use cadsim_core::{derive_sizes, shard_count_upper_bound, ClusterConfig, Error, ModelConfig, SchedulerConfig};
use clap::{Parser, Subcommand, ValueEnum};
use sha2::{Digest, Sha256};

const EXIT_CODES: &str = "\
Exit codes:
  0  success
  1  internal error
  2  invalid command line
  3  spec, model or cluster file unreadable
  4  spec, model or cluster file does not parse
  5  invalid configuration
  6  unknown strategy
  7  infeasible cluster
  8  output directory not writable
  9  oracle disagrees with the implementation";

#[derive(Debug, Parser)]
#[command(name = "cadsim", version, about = "Core-attention disaggregation cluster simulator", after_help = EXIT_CODES)]
struct Cli {
    /// Output root; overridden by CADSIM_OUT when set.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    /// Seed overriding the spec's seed (and the oracles' default).
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads for batches.
    #[arg(long, global = true)]
    jobs: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Run an experiment spec and write CSVs, plans and traces.
    #[command(after_help = EXIT_CODES)]
    Run {
        /// Experiment spec (TOML).
        spec: PathBuf,
        /// Skip plan exports and traces.
        #[arg(long)]
        no_artifacts: bool,
    },
    /// Compare an implementation against its brute-force reference.
    #[command(after_help = EXIT_CODES)]
    Oracle {
        #[arg(value_enum)]
        name: OracleName,
        /// Random instances (v, scheduler).
        #[arg(long)]
        cases: Option<usize>,
        /// Longest document enumerated (flops).
        #[arg(long, default_value_t = 256)]
        max_len: u64,
    },
    /// Print the per-document shard bound.
    #[command(after_help = EXIT_CODES)]
    Bound {
        /// Preset (llama_8b, llama_34b) or model TOML file.
        #[arg(long, default_value = "llama_34b")]
        model: String,
        /// Preset as `h200[:gpus]` or cluster TOML file.
        #[arg(long, default_value = "h200:8")]
        cluster: String,
        /// Per-GPU link bandwidth in GiB/s, replacing the cluster's.
        #[arg(long)]
        bandwidth_gib: Option<f64>,
    },
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum OracleName {
    /// Closed-form minimal shard against tile-aligned grid search.
    V,
    /// Greedy scheduler against the exhaustive optimum.
    Scheduler,
    /// Causal work formula against cell-by-cell enumeration.
    Flops,
}

#[derive(Debug)]
struct Failure {
    code: u8,
    message: String,
}

impl Failure {
    fn new(code: u8, message: impl Into<String>) -> Self {
        Self { code, message: message.into() }
    }

    fn unreadable(path: &Path, e: std::io::Error) -> Self {
        Self::new(3, format!("cannot read {}: {e}", path.display()))
    }

    fn output(path: &Path, e: impl std::fmt::Display) -> Self {
        Self::new(8, format!("cannot write {}: {e}", path.display()))
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match &e {
            Error::Toml(_) => 4,
            Error::Config(_) | Error::Domain(_) | Error::Extrapolation { .. } => 5,
            Error::UnknownStrategy(_) => 6,
            Error::Infeasible(_) => 7,
            Error::Io(_) | Error::Csv(_) | Error::Json(_) => 1,
        };
        Self::new(code, e.to_string())
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let out = std::env::var_os("CADSIM_OUT").map(PathBuf::from).unwrap_or_else(|| cli.out.clone());
    let jobs = cli.jobs.unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()));
    let result = match &cli.command {
        Command::Run { spec, no_artifacts } => cmd_run(spec, &out, cli.seed, jobs, !no_artifacts),
        Command::Oracle { name, cases, max_len } => cmd_oracle(*name, *cases, *max_len, cli.seed.unwrap_or(0)),
        Command::Bound { model, cluster, bandwidth_gib } => cmd_bound(model, cluster, *bandwidth_gib),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}

fn read(path: &Path) -> Result<String, Failure> {
    fs::read_to_string(path).map_err(|e| Failure::unreadable(path, e))
}

fn write(path: &Path, bytes: &[u8]) -> Result<(), Failure> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Failure::output(dir, e))?;
    }
    fs::write(path, bytes).map_err(|e| Failure::output(path, e))
}

/// Runs `spec` and writes `<out>/<name>-<hash>/`, where the hash covers the
/// effective spec, seed override included.
fn cmd_run(path: &Path, out: &Path, seed: Option<u64>, jobs: usize, artifacts: bool) -> Result<(), Failure> {
    let text = read(path)?;
    let mut spec = ExperimentSpec::from_toml(&text)?;
    if let Some(seed) = seed {
        spec.seed = seed;
    }
    spec.validate()?;
    let effective = toml::to_string(&spec).map_err(|e| Failure::new(1, format!("cannot serialize spec: {e}")))?;
    let hash = hex::encode(Sha256::digest(effective.as_bytes()));
    let dir = out.join(format!("{}-{}", spec.name, &hash[..16]));

    let output = run_experiment(&spec, &RunOptions { jobs, artifacts })?;
    let mut summary = Vec::new();
    write_summary_csv(&output.summary, &mut summary)?;
    let mut batches = Vec::new();
    write_batches_csv(&output.batches, &mut batches)?;

    write(&dir.join("spec.toml"), effective.as_bytes())?;
    write(&dir.join("summary.csv"), &summary)?;
    write(&dir.join("batches.csv"), &batches)?;
    for (name, bytes) in &output.artifacts {
        write(&dir.join(name), bytes)?;
    }
    print!("{}", format_table(&output.summary));
    println!("wrote {}", dir.display());
    Ok(())
}

fn cmd_oracle(name: OracleName, cases: Option<usize>, max_len: u64, seed: u64) -> Result<(), Failure> {
    let ok = match name {
        OracleName::V => {
            let n = cases.unwrap_or(100);
            let r = v_oracle(n, seed, SchedulerConfig::default().tile_size);
            println!("queries            {n}");
            println!("max byte excess    {:.6}%", 100.0 * r.max_excess());
            println!("all admissible     {}", r.all_admissible());
            r.max_excess() <= 0.01 && r.all_admissible()
        }
        OracleName::Scheduler => {
            let n = cases.unwrap_or(1000);
            let r = scheduler_oracle(n, seed, &SchedulerConfig::default());
            let within = r.fraction_within(0.15);
            println!("instances          {n}");
            println!("within 15%         {:.2}%", 100.0 * within);
            println!("gap histogram (lower edge, count)");
            for (lo, count) in r.histogram(0.05) {
                println!("  {:>6.2}  {count}", lo);
            }
            within >= 0.95
        }
        OracleName::Flops => {
            let r = flops_enumeration(max_len);
            println!("ranges checked     {}", r.checked);
            println!("mismatches         {}", r.mismatches.len());
            for (l, s, e) in r.mismatches.iter().take(10) {
                println!("  doc {l} [{s}, {e})");
            }
            r.mismatches.is_empty()
        }
    };
    if ok {
        Ok(())
    } else {
        Err(Failure::new(9, "oracle check failed"))
    }
}

fn load_model(arg: &str) -> Result<ModelConfig, Failure> {
    match arg {
        "llama_8b" | "llama-8b" => Ok(ModelConfig::llama_8b()),
        "llama_34b" | "llama-34b" => Ok(ModelConfig::llama_34b()),
        path => {
            let model: ModelConfig = toml::from_str(&read(Path::new(path))?).map_err(|e| Failure::new(4, e.to_string()))?;
            Ok(derive_sizes(&model)?)
        }
    }
}

fn load_cluster(arg: &str) -> Result<ClusterConfig, Failure> {
    if let Some(rest) = arg.strip_prefix("h200") {
        let gpus = match rest.strip_prefix(':') {
            Some(n) => n.parse().map_err(|_| Failure::new(5, format!("bad GPU count in `{arg}`")))?,
            None if rest.is_empty() => 8,
            None => return load_cluster_file(arg),
        };
        return Ok(ClusterConfig::h200(gpus));
    }
    load_cluster_file(arg)
}

fn load_cluster_file(path: &str) -> Result<ClusterConfig, Failure> {
    let spec: ClusterSpec = toml::from_str(&read(Path::new(path))?).map_err(|e| Failure::new(4, e.to_string()))?;
    Ok(spec.resolve()?)
}

fn cmd_bound(model: &str, cluster: &str, bandwidth_gib: Option<f64>) -> Result<(), Failure> {
    let model = load_model(model)?;
    model.validate()?;
    let mut cluster = load_cluster(cluster)?;
    if let Some(b) = bandwidth_gib {
        cluster.interconnect_bandwidth = b * (1u64 << 30) as f64;
    }
    cluster.validate()?;
    let b = shard_count_upper_bound(&model, &cluster);
    println!("per-token FLOPs    {}", b.per_token_flops);
    println!("per-token time     {:.6e} s", b.token_time_s);
    println!("raw bound          {:.4}", b.raw_bound);
    match b.max_shards {
        _ if b.communication_bound => println!("shards             communication-bound: dispatch cannot be hidden"),
        Some(s) => println!("shards             {s}"),
        None => println!("shards             unbounded"),
    }
    Ok(())
}
