//! `sagin`: calibrate, train, evaluate and compare mobility-management policies.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use sagin::baselines::PolicyKind;
use sagin::config::{Precision, RunConfig};
use sagin::metrics::{aggregate, calibrate_rate_bounds, write_summaries, write_trace, MetricSummary};
use sagin::scenario::deploy_scenario;
use sagin::trainer::{compare, evaluate, peek_checkpoint, write_training_log, EpisodeLog, Trainer};
use sagin::Scalar;

const CHECKPOINT_FILE: &str = "ckpt.json";

#[derive(Parser)]
#[command(name = "sagin", version, about = "UAV mobility management in a space-air-ground network")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Measure rate normalization bounds under a random flight policy and store them in the config.
    Calibrate(CalibrateArgs),
    /// Train one policy and write its checkpoint and training log.
    Train(TrainArgs),
    /// Evaluate a checkpoint greedily and print metric summaries as JSON lines.
    Eval(EvalArgs),
    /// Train and evaluate several policies on shared scenario draws.
    Compare(CompareArgs),
    /// Dump the per-step trace of evaluation rollouts as CSV.
    ExportTrace(ExportArgs),
}

#[derive(Args)]
struct ConfigArg {
    /// Run configuration (TOML). Defaults to the built-in desk-scale scenario.
    #[arg(long)]
    config: Option<PathBuf>,
}

impl ConfigArg {
    fn load(&self) -> Result<RunConfig> {
        match &self.config {
            Some(p) => RunConfig::load(p).with_context(|| format!("loading {}", p.display())),
            None => Ok(RunConfig::scaled()),
        }
    }
}

#[derive(Args)]
struct CalibrateArgs {
    #[command(flatten)]
    config: ConfigArg,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    /// Random-policy episodes in the sweep.
    #[arg(long, default_value_t = 10)]
    episodes: usize,
    /// Where to write the calibrated config (default: overwrite `--config`, or `<out dir>/config.toml`).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    config: ConfigArg,
    #[arg(long, default_value = "hdrl")]
    policy: PolicyKind,
    /// Overrides the configured seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Overrides the configured episode budget.
    #[arg(long)]
    episodes: Option<usize>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Continue from this checkpoint instead of starting fresh.
    #[arg(long)]
    resume: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    /// Checkpoint file, or a training output directory containing one.
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long, default_value_t = 10)]
    episodes: usize,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    /// Evaluate a different composition over the checkpoint's agents (e.g. `maxsinr-csac`).
    #[arg(long)]
    policy: Option<PolicyKind>,
    /// Also write the summaries to `<out>/summary.jsonl`.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct CompareArgs {
    #[command(flatten)]
    config: ConfigArg,
    /// Comma-separated policy names.
    #[arg(long, value_delimiter = ',', default_value = "hdrl,sl,direct-rl,rsrp-csac,maxrate-csac,ddqn-sac,ddqn-sl")]
    policies: Vec<PolicyKind>,
    /// Seed for training and for the shared evaluation draws.
    #[arg(long, default_value_t = 1)]
    seed: u64,
    /// Evaluation episodes per policy.
    #[arg(long, default_value_t = 10)]
    episodes: usize,
    /// Overrides the configured training episode budget.
    #[arg(long)]
    train_episodes: Option<usize>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct ExportArgs {
    /// Checkpoint to roll out. Without it, `--policy` must be rule-based.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[command(flatten)]
    config: ConfigArg,
    #[arg(long)]
    policy: Option<PolicyKind>,
    #[arg(long, default_value_t = 1)]
    episodes: usize,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    /// Trace file (default: `<out dir>/trace.csv`).
    #[arg(long)]
    out: Option<PathBuf>,
}

fn out_dir(flag: Option<PathBuf>) -> PathBuf {
    flag.or_else(|| std::env::var_os("SAGIN_OUT_DIR").map(PathBuf::from)).unwrap_or_else(|| PathBuf::from("runs"))
}

fn checkpoint_path(p: &Path) -> PathBuf {
    if p.is_dir() {
        p.join(CHECKPOINT_FILE)
    } else {
        p.to_path_buf()
    }
}

fn print_summaries(rows: &[MetricSummary]) -> Result<()> {
    let mut out = std::io::stdout().lock();
    for r in rows {
        writeln!(out, "{}", serde_json::to_string(r)?)?;
    }
    Ok(())
}

fn log_progress(kind: PolicyKind, log: &EpisodeLog, total: usize) {
    let ep = log.episode + 1;
    if ep.is_multiple_of(50) || ep == total {
        eprintln!(
            "[{kind}] episode {ep}/{total}: top return {:.2}, lower return {:.2}, qos {:.3}, switches {}",
            log.top_return, log.low_return, log.qos_ratio, log.switches
        );
    }
}

fn calibrate(args: CalibrateArgs) -> Result<()> {
    let mut cfg = args.config.load()?;
    let world = deploy_scenario(&cfg.scenario)?.into();
    let bounds = calibrate_rate_bounds(&world, &cfg.env, args.episodes, args.seed)?;
    cfg.env.rate_bounds = Some(bounds);
    let target = match (args.out, &args.config.config) {
        (Some(p), _) => p,
        (None, Some(p)) => p.clone(),
        (None, None) => {
            let dir = out_dir(None);
            fs::create_dir_all(&dir)?;
            dir.join("config.toml")
        }
    };
    cfg.save(&target)?;
    println!("{}", serde_json::json!({ "min_bps": bounds.min_bps, "max_bps": bounds.max_bps, "config": target }));
    Ok(())
}

fn train_with<T: Scalar>(mut trainer: Trainer<T>, dir: &Path) -> Result<()> {
    let ckpt = dir.join(CHECKPOINT_FILE);
    let diagnostic = dir.join("diagnostic.json");
    let total = trainer.state.config.train.episodes;
    let kind = trainer.state.kind;
    while !trainer.is_finished() {
        match trainer.train_episode(None) {
            Ok(log) => log_progress(kind, &log, total),
            Err(e @ sagin::Error::Training(_)) => {
                trainer.save_checkpoint(&diagnostic)?;
                return Err(e).context(format!("diagnostic checkpoint written to {}", diagnostic.display()));
            }
            Err(e) => return Err(e.into()),
        }
    }
    trainer.save_checkpoint(&ckpt)?;
    write_training_log(&dir.join("training_log.csv"), &trainer.state.logs)?;
    trainer.state.config.save(&dir.join("config.toml"))?;
    println!("{}", serde_json::json!({ "checkpoint": ckpt, "episodes": trainer.state.logs.len() }));
    Ok(())
}

fn train(args: TrainArgs) -> Result<()> {
    let dir = out_dir(args.out);
    fs::create_dir_all(&dir)?;
    if let Some(resume) = args.resume {
        let path = checkpoint_path(&resume);
        let (_, precision) = peek_checkpoint(&path)?;
        return match precision {
            Precision::F32 => train_with(resume_trainer::<f32>(&path, args.episodes)?, &dir),
            Precision::F64 => train_with(resume_trainer::<f64>(&path, args.episodes)?, &dir),
        };
    }
    let mut cfg = args.config.load()?;
    if let Some(s) = args.seed {
        cfg.train.seed = s;
    }
    if let Some(n) = args.episodes {
        cfg.train.episodes = n;
    }
    match cfg.train.precision {
        Precision::F32 => train_with(Trainer::<f32>::new(args.policy, cfg)?, &dir),
        Precision::F64 => train_with(Trainer::<f64>::new(args.policy, cfg)?, &dir),
    }
}

fn resume_trainer<T: Scalar>(path: &Path, episodes: Option<usize>) -> Result<Trainer<T>> {
    let mut t = Trainer::<T>::load_checkpoint(path)?;
    if let Some(n) = episodes {
        t.state.config.train.episodes = n;
    }
    Ok(t)
}

fn eval_with<T: Scalar>(path: &Path, args: &EvalArgs) -> Result<()> {
    let t = Trainer::<T>::load_checkpoint(path)?;
    let kind = args.policy.unwrap_or(t.state.kind);
    let e = evaluate(t.world(), &t.state.config, kind, &t.state.agents, args.episodes, args.seed, false)?;
    let mut rows = e.per_run;
    rows.push(aggregate(kind.name(), &rows)?);
    print_summaries(&rows)?;
    if let Some(dir) = &args.out {
        fs::create_dir_all(dir)?;
        write_summaries(&dir.join("summary.jsonl"), &rows)?;
    }
    Ok(())
}

fn eval(args: EvalArgs) -> Result<()> {
    let path = checkpoint_path(&args.checkpoint);
    match peek_checkpoint(&path).with_context(|| format!("reading {}", path.display()))?.1 {
        Precision::F32 => eval_with::<f32>(&path, &args),
        Precision::F64 => eval_with::<f64>(&path, &args),
    }
}

fn compare_cmd(args: CompareArgs) -> Result<()> {
    let mut cfg = args.config.load()?;
    cfg.train.seed = args.seed;
    if let Some(n) = args.train_episodes {
        cfg.train.episodes = n;
    }
    if args.policies.is_empty() {
        bail!("no policies given");
    }
    let total = cfg.train.episodes;
    let progress = |k: PolicyKind, l: &EpisodeLog| log_progress(k, l, total);
    let results = match cfg.train.precision {
        Precision::F32 => compare::<f32>(&cfg, &args.policies, args.episodes, args.seed, progress)?,
        Precision::F64 => compare::<f64>(&cfg, &args.policies, args.episodes, args.seed, progress)?,
    };
    let mut table = csv::Writer::from_writer(Vec::new());
    table.write_record(["policy", "metric", "value"])?;
    for r in &results {
        let a = &r.aggregate;
        for (metric, value) in [
            ("avg_link_rate_bps", a.avg_link_rate_bps),
            ("switch_count", a.switch_count),
            ("qos_satisfaction_ratio", a.qos_satisfaction_ratio),
            ("flight_time_s", a.flight_time_s),
        ] {
            table.write_record([r.kind.name(), metric, &value.to_string()])?;
        }
    }
    let table = table.into_inner()?;
    std::io::stdout().write_all(&table)?;
    let dir = out_dir(args.out);
    fs::create_dir_all(&dir)?;
    fs::write(dir.join("compare.csv"), &table)?;
    let all: Vec<MetricSummary> =
        results.iter().flat_map(|r| r.per_run.iter().chain([&r.aggregate])).cloned().collect();
    write_summaries(&dir.join("summary.jsonl"), &all)?;
    Ok(())
}

fn export_with<T: Scalar>(args: &ExportArgs, path: &Path) -> Result<()> {
    let trainer = match &args.checkpoint {
        Some(c) => Trainer::<T>::load_checkpoint(&checkpoint_path(c))?,
        None => {
            let kind = args.policy.unwrap_or(PolicyKind::StraightLine);
            if kind.is_trainable() {
                bail!("policy {kind} needs --checkpoint");
            }
            Trainer::<T>::new(kind, args.config.load()?)?
        }
    };
    let kind = args.policy.unwrap_or(trainer.state.kind);
    let e =
        evaluate(trainer.world(), &trainer.state.config, kind, &trainer.state.agents, args.episodes, args.seed, true)?;
    write_trace(path, &e.trace)?;
    println!("{}", serde_json::json!({ "trace": path, "rows": e.trace.len() }));
    Ok(())
}

fn export_trace(args: ExportArgs) -> Result<()> {
    let path = match &args.out {
        Some(p) => p.clone(),
        None => {
            let dir = out_dir(None);
            fs::create_dir_all(&dir)?;
            dir.join("trace.csv")
        }
    };
    let precision = match &args.checkpoint {
        Some(c) => peek_checkpoint(&checkpoint_path(c))?.1,
        None => args.config.load()?.train.precision,
    };
    match precision {
        Precision::F32 => export_with::<f32>(&args, &path),
        Precision::F64 => export_with::<f64>(&args, &path),
    }
}

fn main() -> Result<()> {
    match Cli::parse().command {
        Command::Calibrate(a) => calibrate(a),
        Command::Train(a) => train(a),
        Command::Eval(a) => eval(a),
        Command::Compare(a) => compare_cmd(a),
        Command::ExportTrace(a) => export_trace(a),
    }
}
