use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn specs() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../specs")
}

fn cadsim(args: &[&str], out: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_cadsim"))
        .args(args)
        .env_remove("CADSIM_OUT")
        .arg("--out")
        .arg(out)
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn run_dirs(out: &Path) -> Vec<PathBuf> {
    let mut dirs: Vec<PathBuf> = fs::read_dir(out).unwrap().map(|e| e.unwrap().path()).collect();
    dirs.sort();
    dirs
}

#[test]
fn run_writes_the_output_layout() {
    let tmp = tempfile::tempdir().unwrap();
    let spec = specs().join("minimal.toml");
    let o = cadsim(&["run", spec.to_str().unwrap(), "--jobs", "2"], tmp.path());
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(stdout(&o).contains("iteration_s"));
    let dirs = run_dirs(tmp.path());
    assert_eq!(dirs.len(), 1);
    let dir = &dirs[0];
    let name = dir.file_name().unwrap().to_str().unwrap();
    assert!(name.starts_with("minimal-") && name.len() == "minimal-".len() + 16, "{name}");
    for f in ["spec.toml", "summary.csv", "batches.csv"] {
        assert!(dir.join(f).is_file(), "missing {f}");
    }
    assert!(fs::read_dir(dir.join("plans")).unwrap().count() > 0);
    assert!(fs::read_dir(dir.join("traces")).unwrap().count() > 0);
    let summary = fs::read_to_string(dir.join("summary.csv")).unwrap();
    assert_eq!(summary.lines().count(), 3);
}

#[test]
fn same_seed_gives_identical_csvs() {
    let spec = specs().join("minimal.toml");
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    assert!(cadsim(&["run", spec.to_str().unwrap(), "--jobs", "1"], a.path()).status.success());
    assert!(cadsim(&["run", spec.to_str().unwrap(), "--jobs", "3"], b.path()).status.success());
    let (da, db) = (&run_dirs(a.path())[0], &run_dirs(b.path())[0]);
    assert_eq!(da.file_name(), db.file_name());
    for f in ["summary.csv", "batches.csv", "spec.toml"] {
        assert_eq!(fs::read(da.join(f)).unwrap(), fs::read(db.join(f)).unwrap(), "{f} differs");
    }
}

#[test]
fn seed_override_changes_the_run_directory() {
    let spec = specs().join("minimal.toml");
    let tmp = tempfile::tempdir().unwrap();
    assert!(cadsim(&["run", spec.to_str().unwrap()], tmp.path()).status.success());
    assert!(cadsim(&["run", spec.to_str().unwrap(), "--seed", "99"], tmp.path()).status.success());
    let dirs = run_dirs(tmp.path());
    assert_eq!(dirs.len(), 2);
    let seeded = dirs.iter().filter(|d| fs::read_to_string(d.join("spec.toml")).unwrap().contains("seed = 99"));
    assert_eq!(seeded.count(), 1);
}

#[test]
fn env_var_overrides_out_flag() {
    let (flag, env) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let spec = specs().join("minimal.toml");
    let o = Command::new(env!("CARGO_BIN_EXE_cadsim"))
        .args(["run", spec.to_str().unwrap(), "--no-artifacts", "--out"])
        .arg(flag.path())
        .env("CADSIM_OUT", env.path())
        .output()
        .unwrap();
    assert!(o.status.success());
    assert_eq!(run_dirs(env.path()).len(), 1);
    assert!(run_dirs(flag.path()).is_empty());
}

#[test]
fn intro_fixture_shows_four_to_one_attention() {
    let tmp = tempfile::tempdir().unwrap();
    let spec = specs().join("intro.toml");
    let o = cadsim(&["run", spec.to_str().unwrap(), "--no-artifacts"], tmp.path());
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let fixed = stdout(&o).lines().find(|l| l.contains(" fixed ")).unwrap().to_string();
    let cols: Vec<&str> = fixed.split_whitespace().collect();
    // strategy, mode, iteration_s, idle, mem_div, ca_ratio, ...
    assert_eq!(cols[0], "fixed");
    assert_eq!(cols[4], "1.0000", "{fixed}");
    assert_eq!(cols[5], "4.0000", "{fixed}");
}

#[test]
fn epsilon_sweep_has_one_row_per_value() {
    let tmp = tempfile::tempdir().unwrap();
    let text = fs::read_to_string(specs().join("epsilon_sweep.toml")).unwrap().replace("batches = 8", "batches = 2");
    let spec = tmp.path().join("sweep.toml");
    fs::write(&spec, text).unwrap();
    let out = tmp.path().join("out");
    assert!(cadsim(&["run", spec.to_str().unwrap(), "--no-artifacts"], &out).status.success());
    let summary = fs::read_to_string(run_dirs(&out)[0].join("summary.csv")).unwrap();
    assert_eq!(summary.lines().count(), 1 + 7);
    assert!(summary.lines().skip(1).all(|l| l.starts_with("epsilon,")));
}

fn exit_code(args: &[&str], spec_text: Option<&str>) -> i32 {
    let tmp = tempfile::tempdir().unwrap();
    let mut args: Vec<String> = args.iter().map(|s| s.to_string()).collect();
    if let Some(text) = spec_text {
        let p = tmp.path().join("spec.toml");
        fs::write(&p, text).unwrap();
        args.push(p.to_str().unwrap().to_string());
    }
    let refs: Vec<&str> = args.iter().map(String::as_str).collect();
    cadsim(&refs, &tmp.path().join("out")).status.code().unwrap()
}

#[test]
fn error_paths_have_distinct_exit_codes() {
    let minimal = fs::read_to_string(specs().join("minimal.toml")).unwrap();
    assert_eq!(exit_code(&["run", "/nonexistent/spec.toml"], None), 3);
    assert_eq!(exit_code(&["run"], Some("this is = = not toml")), 4);
    assert_eq!(exit_code(&["run"], Some(&minimal.replace("batches = 3", "batches = 0"))), 5);
    assert_eq!(exit_code(&["run"], Some(&minimal.replace("\"distca\"", "\"ring\""))), 6);
    assert_eq!(exit_code(&["run"], Some(&minimal.replace("num_gpus = 4", "num_gpus = 4\ntp = 3"))), 7);
    assert_eq!(exit_code(&["frobnicate"], None), 2);
}

#[test]
fn unwritable_output_is_exit_code_8() {
    let tmp = tempfile::tempdir().unwrap();
    let blocker = tmp.path().join("file");
    fs::write(&blocker, "").unwrap();
    let spec = specs().join("minimal.toml");
    let o = cadsim(&["run", spec.to_str().unwrap(), "--no-artifacts"], &blocker);
    assert_eq!(o.status.code(), Some(8));
}

#[test]
fn help_documents_every_exit_code() {
    let o = Command::new(env!("CARGO_BIN_EXE_cadsim")).arg("--help").output().unwrap();
    let help = stdout(&o);
    for code in 0..=9 {
        assert!(help.contains(&format!("\n  {code}  ")), "exit code {code} undocumented");
    }
}

#[test]
fn bound_reproduces_the_34b_example() {
    let tmp = tempfile::tempdir().unwrap();
    let o = cadsim(&["bound"], tmp.path());
    assert!(o.status.success());
    let text = stdout(&o);
    assert!(text.contains("1384120320"), "{text}");
    assert!(text.lines().any(|l| l.starts_with("shards") && l.trim_end().ends_with(" 31")), "{text}");
}

#[test]
fn bound_reads_model_and_cluster_files() {
    let tmp = tempfile::tempdir().unwrap();
    let model = specs().join("llama_34b.model.toml");
    let cluster = specs().join("h200_25gib.cluster.toml");
    let o = cadsim(&["bound", "--model", model.to_str().unwrap(), "--cluster", cluster.to_str().unwrap()], tmp.path());
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let shards: u64 = stdout(&o)
        .lines()
        .find(|l| l.starts_with("shards"))
        .and_then(|l| l.split_whitespace().last())
        .unwrap()
        .parse()
        .unwrap();
    assert!(shards < 31);
}

#[test]
fn starved_link_is_reported_as_communication_bound() {
    let tmp = tempfile::tempdir().unwrap();
    let o = cadsim(&["bound", "--bandwidth-gib", "0.001"], tmp.path());
    assert!(o.status.success());
    assert!(stdout(&o).contains("communication-bound"));
}

#[test]
fn oracles_pass() {
    let tmp = tempfile::tempdir().unwrap();
    for args in [&["oracle", "v"][..], &["oracle", "flops", "--max-len", "64"], &["oracle", "scheduler", "--cases", "200", "--seed", "5"]] {
        let o = cadsim(args, tmp.path());
        assert!(o.status.success(), "{args:?}: {}", stdout(&o));
    }
}
