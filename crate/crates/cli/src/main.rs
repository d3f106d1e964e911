use std::fs::{self, File};
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use rayon::prelude::*;

use gflowlab::backward::BackwardKind;
use gflowlab::checkpoint::bundle_to_checkpoint;
use gflowlab::config::RunConfig;
use gflowlab::report::{MetricsRow, MetricsWriter};
use gflowlab::trainer::{build_environment, train};
use gflowlab::verify::{enumerable, run_suite, Suite, SuiteOptions};

const EXIT_CONFIG: u8 = 1;
const EXIT_NUMERICAL: u8 = 2;
const EXIT_TOLERANCE: u8 = 3;

#[derive(Parser)]
#[command(name = "gflowlab", version, about = "Tabular GFlowNet training and exact verification")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct ConfigArgs {
    /// Run configuration file; built-in defaults when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override one key, e.g. `--set backward=tlm`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Train one model and write metrics.csv, config.resolved and checkpoint.final.
    Train {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Overrides the config seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Output directory. Defaults to `$GFLOWLAB_OUT/<config>-seed<seed>`.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train every (learning rate, backward approach, seed) combination.
    Sweep {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Comma-separated learning rates.
        #[arg(long)]
        lrs: String,
        /// Comma-separated seeds. Defaults to the config seed.
        #[arg(long)]
        seeds: Option<String>,
        /// Comma-separated backward approaches. Defaults to the config value.
        #[arg(long)]
        backwards: Option<String>,
        /// Sweep root, one directory per run plus summary.csv. Defaults to `$GFLOWLAB_OUT/<config>-sweep`.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Concurrent runs.
        #[arg(long, default_value_t = 1)]
        jobs: usize,
    },
    /// Run exact identity suites on the configured environment.
    Oracle {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Comma-separated subset of proposition1, alternation, maxent, marginal, pinsker.
        #[arg(long)]
        checks: Option<String>,
        /// Random fixtures per suite.
        #[arg(long, default_value_t = 20)]
        samples: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Perturb the backward policy on one side of the value identity by this scale.
        #[arg(long, value_name = "SCALE")]
        inject_fault: Option<f64>,
    },
}

/// A failure carrying the process exit code it maps to.
struct Failure {
    code: u8,
    error: anyhow::Error,
}

impl Failure {
    fn config(error: anyhow::Error) -> Self {
        Self { code: EXIT_CONFIG, error }
    }
}

impl From<anyhow::Error> for Failure {
    fn from(error: anyhow::Error) -> Self {
        Self::config(error)
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(EXIT_CONFIG) } else { ExitCode::SUCCESS };
        }
    };
    let result = match cli.command {
        Command::Train { cfg, seed, out } => cmd_train(&cfg, seed, out),
        Command::Sweep { cfg, lrs, seeds, backwards, out, jobs } => {
            cmd_sweep(&cfg, &lrs, seeds.as_deref(), backwards.as_deref(), out, jobs)
        }
        Command::Oracle { cfg, checks, samples, seed, inject_fault } => {
            cmd_oracle(&cfg, checks.as_deref(), samples, seed, inject_fault)
        }
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {:#}", f.error);
            ExitCode::from(f.code)
        }
    }
}

fn load_config(args: &ConfigArgs) -> Result<RunConfig> {
    let mut cfg = match &args.config {
        Some(path) => {
            let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
            RunConfig::parse_text(&text).with_context(|| format!("parsing {}", path.display()))?
        }
        None => RunConfig::default(),
    };
    cfg.apply_overrides(&args.overrides)?;
    cfg.validate()?;
    Ok(cfg)
}

fn output_root() -> PathBuf {
    std::env::var_os("GFLOWLAB_OUT").map(PathBuf::from).unwrap_or_else(|| PathBuf::from("runs"))
}

fn config_stem(args: &ConfigArgs) -> String {
    args.config
        .as_ref()
        .and_then(|p| p.file_stem())
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "default".into())
}

/// Trains one configuration into `dir`, returning the evaluation rows.
fn run_into(cfg: &RunConfig, dir: &Path) -> Result<Vec<MetricsRow>, Failure> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    fs::write(dir.join("config.resolved"), cfg.to_text()).context("writing config.resolved")?;
    let csv = File::create(dir.join("metrics.csv")).context("creating metrics.csv")?;
    let mut writer = MetricsWriter::new(BufWriter::new(csv)).context("writing metrics.csv")?;
    let out = match train(cfg, Some(&mut writer)) {
        Ok(out) => out,
        Err(e) => {
            let code = if e.is_numerical() { EXIT_NUMERICAL } else { EXIT_CONFIG };
            return Err(Failure { code, error: anyhow::Error::new(e) });
        }
    };
    let ck = bundle_to_checkpoint(&out.bundle, &[("trajectories_sampled", out.trajectories_sampled), ("seed", cfg.seed)]);
    fs::write(dir.join("checkpoint.final"), ck.to_text()).context("writing checkpoint.final")?;
    Ok(out.rows)
}

fn cmd_train(args: &ConfigArgs, seed: Option<u64>, out: Option<PathBuf>) -> Result<(), Failure> {
    let mut cfg = load_config(args)?;
    if let Some(seed) = seed {
        cfg.seed = seed;
    }
    let dir = out.unwrap_or_else(|| output_root().join(format!("{}-seed{}", config_stem(args), cfg.seed)));
    let rows = run_into(&cfg, &dir)?;
    if let Some(last) = rows.last() {
        let l1 = last.l1_exact.map(|v| format!("{v:.4}")).unwrap_or_else(|| "-".into());
        println!("{}: {} iterations, l1_exact {l1}", dir.display(), last.iteration);
    }
    Ok(())
}

fn parse_list<T: std::str::FromStr>(what: &str, text: &str) -> Result<Vec<T>>
where
    T::Err: std::fmt::Display,
{
    let items: Vec<&str> = text.split(',').map(str::trim).filter(|s| !s.is_empty()).collect();
    if items.is_empty() {
        bail!("{what} list is empty");
    }
    items
        .into_iter()
        .map(|s| s.parse::<T>().map_err(|e| anyhow::anyhow!("bad {what} `{s}`: {e}")))
        .collect()
}

/// Per-seed summary of one run: best value over checkpoints for each tracked metric.
#[derive(Default, Clone, Copy)]
struct RunBest {
    spearman: Option<f64>,
    pearson: Option<f64>,
    modes_found: Option<f64>,
    l1_exact_min: Option<f64>,
    l1_exact_final: Option<f64>,
}

fn best_over_checkpoints(rows: &[MetricsRow]) -> RunBest {
    let max = |f: &dyn Fn(&MetricsRow) -> Option<f64>| {
        rows.iter().filter_map(f).filter(|v| v.is_finite()).fold(None, |acc: Option<f64>, v| Some(acc.map_or(v, |a| a.max(v))))
    };
    let min = |f: &dyn Fn(&MetricsRow) -> Option<f64>| {
        rows.iter().filter_map(f).filter(|v| v.is_finite()).fold(None, |acc: Option<f64>, v| Some(acc.map_or(v, |a| a.min(v))))
    };
    RunBest {
        spearman: max(&|r| r.spearman),
        pearson: max(&|r| r.pearson),
        modes_found: max(&|r| r.modes_found.map(|m| m as f64)),
        l1_exact_min: min(&|r| r.l1_exact),
        l1_exact_final: rows.last().and_then(|r| r.l1_exact),
    }
}

fn mean_of(values: impl Iterator<Item = Option<f64>>) -> String {
    let v: Vec<f64> = values.flatten().collect();
    if v.is_empty() {
        String::new()
    } else {
        gflowlab::report::format_float(v.iter().sum::<f64>() / v.len() as f64)
    }
}

const SUMMARY_HEADER: &str =
    "lr,backward,seeds_ok,seeds_failed,spearman,pearson,modes_found,l1_exact_min,l1_exact_final";

fn cmd_sweep(
    args: &ConfigArgs,
    lrs: &str,
    seeds: Option<&str>,
    backwards: Option<&str>,
    out: Option<PathBuf>,
    jobs: usize,
) -> Result<(), Failure> {
    let base = load_config(args)?;
    let lrs: Vec<f64> = parse_list("learning rate", lrs)?;
    let seeds: Vec<u64> = match seeds {
        Some(s) => parse_list("seed", s)?,
        None => vec![base.seed],
    };
    let backwards: Vec<BackwardKind> = match backwards {
        Some(b) => parse_list("backward", b)?,
        None => vec![base.backward],
    };
    let root = out.unwrap_or_else(|| output_root().join(format!("{}-sweep", config_stem(args))));
    fs::create_dir_all(&root).with_context(|| format!("creating {}", root.display()))?;

    let mut jobs_list = Vec::new();
    for &lr in &lrs {
        for &backward in &backwards {
            for &seed in &seeds {
                let mut cfg = base.clone();
                cfg.lr = lr;
                cfg.backward = backward;
                cfg.seed = seed;
                cfg.validate().map_err(|e| Failure::config(e.into()))?;
                let dir = root.join(format!("lr{lr:?}-{backward}-seed{seed}"));
                jobs_list.push((lr, backward, cfg, dir));
            }
        }
    }

    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.max(1))
        .build()
        .context("starting worker pool")?;
    let results: Vec<Result<RunBest, String>> = pool.install(|| {
        jobs_list
            .par_iter()
            .map(|(_, _, cfg, dir)| match run_into(cfg, dir) {
                Ok(rows) => Ok(best_over_checkpoints(&rows)),
                Err(f) => Err(format!("{}: {:#}", dir.display(), f.error)),
            })
            .collect()
    });

    let mut summary = String::from(SUMMARY_HEADER);
    summary.push('\n');
    let mut failures = 0;
    for &lr in &lrs {
        for &backward in &backwards {
            let group: Vec<&Result<RunBest, String>> = jobs_list
                .iter()
                .zip(&results)
                .filter(|((l, b, _, _), _)| *l == lr && *b == backward)
                .map(|(_, r)| r)
                .collect();
            let ok: Vec<RunBest> = group.iter().filter_map(|r| r.as_ref().ok().copied()).collect();
            for r in &group {
                if let Err(msg) = r {
                    failures += 1;
                    eprintln!("run failed: {msg}");
                }
            }
            summary.push_str(&format!(
                "{lr:?},{backward},{},{},{},{},{},{},{}\n",
                ok.len(),
                group.len() - ok.len(),
                mean_of(ok.iter().map(|b| b.spearman)),
                mean_of(ok.iter().map(|b| b.pearson)),
                mean_of(ok.iter().map(|b| b.modes_found)),
                mean_of(ok.iter().map(|b| b.l1_exact_min)),
                mean_of(ok.iter().map(|b| b.l1_exact_final)),
            ));
        }
    }
    fs::write(root.join("summary.csv"), &summary).context("writing summary.csv")?;
    print!("{summary}");
    if failures == results.len() {
        return Err(Failure { code: EXIT_NUMERICAL, error: anyhow::anyhow!("all {failures} runs failed") });
    }
    Ok(())
}

fn cmd_oracle(
    args: &ConfigArgs,
    checks: Option<&str>,
    samples: usize,
    seed: u64,
    fault: Option<f64>,
) -> Result<(), Failure> {
    let cfg = load_config(args)?;
    let suites: Vec<Suite> = match checks {
        Some(c) => parse_list("check", c)?,
        None => Suite::ALL.to_vec(),
    };
    let env = build_environment(&cfg).context("building environment")?;
    let trajs = enumerable(&env, cfg.enumerate_cap).context("environment is not enumerable")?;
    let opts = SuiteOptions { samples, seed, fault };
    let mut failed = Vec::new();
    for suite in suites {
        let report = run_suite(&env, &trajs, suite, &opts);
        for m in &report.measures {
            let verdict = if m.passed() { "ok  " } else { "FAIL" };
            println!("{verdict} {suite:<12} {:<42} {:.3e} (tolerance {:.0e})", m.label, m.value, m.tolerance);
        }
        failed.extend(report.failures().map(|m| format!("{suite}: {} = {:e}", m.label, m.value)));
    }
    if !failed.is_empty() {
        return Err(Failure {
            code: EXIT_TOLERANCE,
            error: anyhow::anyhow!("tolerance violated: {}", failed.join("; ")),
        });
    }
    Ok(())
}
