use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use gflowlab::report::read_metrics;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_gflowlab"))
}

fn config(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs").join(name)
}

fn run(cmd: &mut Command) -> Output {
    let out = cmd.output().expect("binary runs");
    if !out.status.success() {
        eprintln!("stderr: {}", String::from_utf8_lossy(&out.stderr));
    }
    out
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn small_grid(cmd: &mut Command) -> &mut Command {
    cmd.args(["--set", "side=4", "--set", "iterations=300", "--set", "eval_every=100"])
}

#[test]
fn train_writes_three_files_and_records_overrides() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("a");
    let o = run(small_grid(bin().arg("train").arg("--config").arg(config("grid_std.cfg"))).args([
        "--seed",
        "1",
        "--set",
        "backward=uniform",
        "--out",
        out.to_str().unwrap(),
    ]));
    assert_eq!(o.status.code(), Some(0));
    let mut names: Vec<String> =
        fs::read_dir(&out).unwrap().map(|e| e.unwrap().file_name().to_string_lossy().into_owned()).collect();
    names.sort();
    assert_eq!(names, ["checkpoint.final", "config.resolved", "metrics.csv"]);

    let resolved = fs::read_to_string(out.join("config.resolved")).unwrap();
    assert!(resolved.contains("backward = uniform"));
    assert!(resolved.contains("seed = 1"));
    let rows = read_metrics(&fs::read_to_string(out.join("metrics.csv")).unwrap()).unwrap();
    assert_eq!(rows.iter().map(|r| r.iteration).collect::<Vec<_>>(), [0, 100, 200, 300]);
    assert!(rows.iter().all(|r| r.seed == 1 && r.lr_backward.is_none()));
    let ck = fs::read_to_string(out.join("checkpoint.final")).unwrap();
    assert!(ck.starts_with("gflowlab-checkpoint 1"));
    assert!(ck.contains("counter iteration 300"));
}

#[test]
fn resolved_config_reproduces_the_csv() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    let o = run(small_grid(bin().arg("train").arg("--config").arg(config("grid_std.cfg")))
        .args(["--seed", "4", "--out", a.to_str().unwrap()]));
    assert!(o.status.success());
    let o = run(bin().arg("train").arg("--config").arg(a.join("config.resolved")).args(["--out", b.to_str().unwrap()]));
    assert!(o.status.success());
    assert_eq!(fs::read(a.join("metrics.csv")).unwrap(), fs::read(b.join("metrics.csv")).unwrap());
    assert_eq!(fs::read(a.join("checkpoint.final")).unwrap(), fs::read(b.join("checkpoint.final")).unwrap());
}

#[test]
fn invalid_key_exits_1_naming_it() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(bin().args(["train", "--set", "learning_rate=0.1", "--out"]).arg(dir.path()));
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("learning_rate"));

    let o = run(bin().args(["train", "--set", "lr=fast", "--out"]).arg(dir.path()));
    assert_eq!(o.status.code(), Some(1));
    let o = run(bin().args(["train", "--bogus-flag"]));
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn numerical_abort_exits_2_and_keeps_partial_csv() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("nan");
    let o = run(bin()
        .arg("train")
        .arg("--config")
        .arg(config("diamond.cfg"))
        .args(["--set", "lr=1e300", "--set", "lr_log_z=1e300", "--out", out.to_str().unwrap()]));
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("iteration"));
    let rows = read_metrics(&fs::read_to_string(out.join("metrics.csv")).unwrap()).unwrap();
    assert_eq!(rows.len(), 1);
    assert!(!out.join("checkpoint.final").exists());
}

#[test]
fn default_output_root_comes_from_environment() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(bin()
        .env("GFLOWLAB_OUT", dir.path())
        .arg("train")
        .arg("--config")
        .arg(config("diamond.cfg"))
        .args(["--seed", "3", "--set", "iterations=10"]));
    assert!(o.status.success());
    assert!(dir.path().join("diamond-seed3").join("metrics.csv").exists());
}

#[test]
fn sweep_runs_the_product_and_summarises_best_checkpoints() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path().join("sweep");
    let o = run(bin()
        .arg("sweep")
        .arg("--config")
        .arg(config("grid_std.cfg"))
        .args(["--set", "side=3", "--set", "iterations=200", "--set", "eval_every=50"])
        .args(["--lrs", "1e-3,5e-3,1e-2", "--seeds", "0,1,2", "--jobs", "3", "--out", root.to_str().unwrap()]));
    assert_eq!(o.status.code(), Some(0));
    let mut runs: Vec<PathBuf> =
        fs::read_dir(&root).unwrap().map(|e| e.unwrap().path()).filter(|p| p.is_dir()).collect();
    runs.sort();
    assert_eq!(runs.len(), 9);

    let summary = fs::read_to_string(root.join("summary.csv")).unwrap();
    let lines: Vec<&str> = summary.lines().collect();
    assert_eq!(lines.len(), 4);
    let header: Vec<&str> = lines[0].split(',').collect();
    let col = |name: &str| header.iter().position(|h| *h == name).unwrap();
    for line in &lines[1..] {
        let f: Vec<&str> = line.split(',').collect();
        let lr = f[col("lr")];
        assert_eq!(f[col("backward")], "tlm");
        assert_eq!(f[col("seeds_ok")], "3");
        // Max over checkpoints per seed, then the mean over seeds.
        let mut best = Vec::new();
        for seed in 0..3 {
            let csv = fs::read_to_string(root.join(format!("lr{lr}-tlm-seed{seed}")).join("metrics.csv")).unwrap();
            let rows = read_metrics(&csv).unwrap();
            best.push(rows.iter().filter_map(|r| r.spearman).fold(f64::NEG_INFINITY, f64::max));
        }
        let expected = best.iter().sum::<f64>() / 3.0;
        let got: f64 = f[col("spearman")].parse().unwrap();
        assert!((got - expected).abs() < 1e-12, "lr {lr}: {got} vs {expected}");
    }
}

#[test]
fn sweep_rejects_empty_lists() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(bin().args(["sweep", "--lrs", "", "--out"]).arg(dir.path()));
    assert_eq!(o.status.code(), Some(1));
    let o = run(bin().args(["sweep", "--lrs", "1e-3", "--seeds", ",", "--out"]).arg(dir.path()));
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn sweep_fails_only_when_every_run_fails() {
    let dir = tempfile::tempdir().unwrap();
    let sweep = |lrs: &str, name: &str| {
        run(bin()
            .arg("sweep")
            .arg("--config")
            .arg(config("grid_std.cfg"))
            .args(["--set", "side=3", "--set", "iterations=50", "--lrs", lrs, "--out"])
            .arg(dir.path().join(name)))
    };
    let o = sweep("1e300,1e-3", "mixed");
    assert_eq!(o.status.code(), Some(0));
    let summary = fs::read_to_string(dir.path().join("mixed/summary.csv")).unwrap();
    assert!(summary.lines().any(|l| l.starts_with("1e300,tlm,0,1,")));
    assert!(summary.lines().any(|l| l.starts_with("0.001,tlm,1,0,")));

    let o = sweep("1e300", "all");
    assert_ne!(o.status.code(), Some(0));
}

#[test]
fn oracle_diamond_passes_every_check() {
    let o = run(bin().arg("oracle").arg("--config").arg(config("diamond.cfg")));
    assert_eq!(o.status.code(), Some(0));
    let text = String::from_utf8_lossy(&o.stdout);
    for check in ["proposition1", "alternation", "maxent", "marginal", "pinsker"] {
        assert!(text.contains(check), "missing {check}");
    }
    assert!(!text.contains("FAIL"));
}

#[test]
fn oracle_injected_fault_exits_3() {
    let o = run(bin()
        .arg("oracle")
        .arg("--config")
        .arg(config("diamond.cfg"))
        .args(["--checks", "proposition1", "--inject-fault", "0.5"]));
    assert_eq!(o.status.code(), Some(3));
    assert!(stderr(&o).contains("proposition1"));
}

#[test]
fn oracle_refuses_environments_above_the_cap() {
    let o = run(bin().arg("oracle").arg("--config").arg(config("bitseq.cfg")).args(["--set", "enumerate_cap=1000"]));
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stdout).is_empty());
}
