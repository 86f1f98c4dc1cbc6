//! Command-line front end: trace generation, grid runs and comparisons.

mod experiment;
mod grid;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use experiment::{ExperimentConfig, FixedTokens, Preset};
use kvsim::config::Policy;
use kvsim::simcore::{compare_runs, ComparisonRow, MetricsReport};
use kvsim::workload::write_trace;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

/// Settings are taken from flags first, then the config file, then defaults.
#[derive(Parser)]
#[command(name = "kvsim", version, about = "Simulate stateful LLM serving on a multi-node cluster")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a workload trace and print its summary.
    GenTrace {
        #[command(flatten)]
        exp: ExpArgs,
        /// Destination trace file.
        #[arg(short, long)]
        out: PathBuf,
    },
    /// Run every (policy, users) cell and write one directory per cell.
    Run {
        #[command(flatten)]
        exp: ExpArgs,
        /// Output root; cells go in `<policy>_<users>_<seed>` below it.
        #[arg(short, long)]
        out: Option<PathBuf>,
        /// Overwrite existing cell directories.
        #[arg(long)]
        force: bool,
        /// Worker threads.
        #[arg(short, long, default_value_t = default_jobs())]
        jobs: usize,
        /// Default output root when neither flag nor file gives one.
        #[arg(long, env = "KVSIM_OUTPUT_ROOT", default_value = "runs", hide_env_values = true)]
        output_root: PathBuf,
    },
    /// Tabulate reports against a baseline.
    Compare {
        /// Report files, or cell directories holding a report.json.
        #[arg(required = true, num_args = 2..)]
        reports: Vec<PathBuf>,
        /// Index of the baseline report.
        #[arg(short, long, default_value_t = 0)]
        baseline: usize,
        /// Write the table here instead of stdout.
        #[arg(short, long)]
        out: Option<PathBuf>,
    },
    /// Parse and check a config file, then print it with defaults filled in.
    ValidateConfig { config: PathBuf },
}

#[derive(Args)]
struct ExpArgs {
    /// Experiment config (TOML).
    #[arg(short, long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Comma-separated policies.
    #[arg(long, value_delimiter = ',')]
    policies: Option<Vec<Policy>>,
    /// Comma-separated concurrent user counts.
    #[arg(long, value_delimiter = ',')]
    users: Option<Vec<u32>>,
    #[arg(long)]
    nodes: Option<usize>,
    #[arg(long)]
    sessions: Option<usize>,
    #[arg(long, value_enum)]
    preset: Option<Preset>,
    /// Chat corpus to build sessions from.
    #[arg(long)]
    corpus: Option<PathBuf>,
    /// Replay this trace file.
    #[arg(long)]
    trace: Option<PathBuf>,
    /// Fraction of advisories to drop.
    #[arg(long)]
    miss: Option<f64>,
    /// Fraction of sessions marked high priority.
    #[arg(long)]
    priority_mix: Option<f64>,
    /// Replace every turn with PROMPT,RESPONSE tokens.
    #[arg(long, value_delimiter = ',', num_args = 2)]
    fixed_tokens: Option<Vec<u32>>,
}

impl ExpArgs {
    fn resolve(&self) -> Result<ExperimentConfig> {
        let mut cfg = ExperimentConfig::load_or_default(self.config.as_deref())?;
        let w = &mut cfg.workload;
        if let Some(v) = self.seed {
            cfg.seed = v;
        }
        if let Some(v) = &self.policies {
            cfg.policies = v.clone();
        }
        if let Some(v) = &self.users {
            w.users = v.clone();
        }
        if let Some(v) = self.nodes {
            cfg.cluster.nodes = v;
        }
        if let Some(v) = self.sessions {
            w.sessions = v;
        }
        if let Some(v) = self.preset {
            w.preset = v;
        }
        if let Some(v) = &self.corpus {
            w.corpus = Some(v.clone());
        }
        if let Some(v) = &self.trace {
            w.trace = Some(v.clone());
        }
        if let Some(v) = self.miss {
            w.miss_fraction = v;
        }
        if let Some(v) = self.priority_mix {
            w.priority_mix = v;
        }
        if let Some(v) = &self.fixed_tokens {
            w.fixed_tokens = Some(FixedTokens {
                prompt: v[0],
                response: v[1],
            });
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

fn default_jobs() -> usize {
    std::thread::available_parallelism().map_or(1, |n| n.get())
}

fn gen_trace(exp: &ExpArgs, out: &Path) -> Result<()> {
    let cfg = exp.resolve()?;
    let users = *cfg.user_counts()?.first().context("no user count")?;
    let trace = cfg.trace(users)?;
    write_trace(&trace, out)?;
    let lead = trace.mean_advisory_lead().map_or("n/a".to_string(), |s| format!("{s:.2}s"));
    println!("trace          {}", out.display());
    println!("sessions       {}", trace.sessions.len());
    println!("turns          {}", trace.total_turns());
    println!("multi-turn     {:.3}", trace.multi_turn_fraction());
    println!("users          {}", trace.concurrency_target);
    println!("advisories     {}", trace.advisory_count());
    println!("advisory lead  {lead}");
    Ok(())
}

fn run_cmd(exp: &ExpArgs, out: Option<PathBuf>, force: bool, jobs: usize, root: PathBuf) -> Result<bool> {
    let cfg = exp.resolve()?;
    let root = out.or_else(|| cfg.output_dir.clone()).unwrap_or(root);
    std::fs::create_dir_all(&root).with_context(|| format!("creating {}", root.display()))?;
    let results = grid::run_grid(&cfg, &root, jobs.max(1), force)?;
    let mut ok = true;
    println!("{:<28} {:>9} {:>9} {:>9} {:>10} {:>8}", "cell", "tpot ms", "ttft s", "req/s", "makespan s", "imbal");
    for r in &results {
        match &r.outcome {
            Ok(rep) => println!(
                "{:<28} {:>9.2} {:>9.3} {:>9.3} {:>10.1} {:>8.2}",
                r.cell.name(),
                rep.tpot_mean_s.map_or(f64::NAN, |t| t * 1e3),
                rep.ttft_mean_s,
                rep.requests_per_sec,
                rep.makespan_s,
                rep.load_imbalance.as_ref().map_or(f64::NAN, |i| i.max_ratio)
            ),
            Err(e) => {
                ok = false;
                println!("{:<28} FAILED: {e:#}", r.cell.name());
            }
        }
    }
    Ok(ok)
}

fn load_report(path: &Path) -> Result<MetricsReport> {
    let file = if path.is_dir() { path.join("report.json") } else { path.to_path_buf() };
    let text = std::fs::read_to_string(&file).with_context(|| format!("reading {}", file.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", file.display()))
}

fn comparison_csv(rows: &[ComparisonRow]) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r)?;
    }
    Ok(w.into_inner()?)
}

fn compare(paths: &[PathBuf], baseline: usize, out: Option<&Path>) -> Result<()> {
    let reports = paths.iter().map(|p| load_report(p)).collect::<Result<Vec<_>>>()?;
    let rows = match compare_runs(&reports, baseline) {
        Ok(rows) => rows,
        Err(kvsim::simcore::CompareError::HashMismatch { index, .. }) => {
            let base = paths.get(baseline).map_or("?".into(), |p| p.display().to_string());
            bail!("{} was produced from a different trace than {base}", paths[index].display());
        }
        Err(e) => return Err(e.into()),
    };
    let table = comparison_csv(&rows)?;
    match out {
        Some(p) => grid::write_atomic(p, &table)?,
        None => print!("{}", String::from_utf8_lossy(&table)),
    }
    Ok(())
}

fn validate_config(path: &Path) -> Result<()> {
    let cfg = ExperimentConfig::load(path)?;
    cfg.validate()?;
    print!("{}", cfg.to_toml()?);
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result = match cli.cmd {
        Cmd::GenTrace { exp, out } => gen_trace(&exp, &out).map(|_| true),
        Cmd::Run {
            exp,
            out,
            force,
            jobs,
            output_root,
        } => run_cmd(&exp, out, force, jobs, output_root),
        Cmd::Compare { reports, baseline, out } => compare(&reports, baseline, out.as_deref()).map(|_| true),
        Cmd::ValidateConfig { config } => validate_config(&config).map(|_| true),
    };
    match result {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
