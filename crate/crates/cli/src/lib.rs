//! `sbmcl` command-line driver.
//!
//! Exit codes: 0 success, 1 usage/configuration/checkpoint error,
//! 2 meta-training divergence. The worker thread count is read from
//! `SBMCL_THREADS` (default: all cores).

pub mod config;

use std::ffi::OsString;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand, ValueEnum};
use sbmcl_core::episode::{Domain, EpisodeId, EpisodeSource, Split, StreamSpec};
use sbmcl_core::harness::{
    curve_csv, meta_eval, meta_train_with, metrics_csv, metrics_json, run_baseline, sweep_generalization, BaselineConfig,
    BaselineKind, EvalOptions, HarnessError,
};
use sbmcl_core::io::{load_checkpoint, save_checkpoint};
use sbmcl_core::models::{PredictMode, StreamPath};

use config::RunConfigFile;

pub const THREADS_ENV: &str = "SBMCL_THREADS";

#[derive(Debug, Parser)]
#[command(name = "sbmcl", version, about = "Meta-continual learning with sequential Bayesian posteriors")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum ModeArg {
    Mc,
    Map,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum KindArg {
    Online,
    Offline,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum SplitArg {
    MetaTrain,
    MetaTest,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Meta-train a model; writes the checkpoint and `<out>.loss.csv`.
    MetaTrain {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        steps: Option<usize>,
        /// Print the loss to stderr every this many steps (0 disables).
        #[arg(long, default_value_t = 100)]
        log_every: usize,
    },
    /// Evaluate a checkpoint on meta-test episodes; prints one CSV row.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        /// Tasks per episode (default: the training setting).
        #[arg(long)]
        tasks: Option<usize>,
        /// Shots per task (default: the training setting).
        #[arg(long)]
        shots: Option<usize>,
        /// Episode count (default: the checkpoint's eval_episodes, normally 512).
        #[arg(long)]
        episodes: Option<u64>,
        #[arg(long, value_enum, default_value_t = ModeArg::Mc)]
        mode: ModeArg,
    },
    /// Evaluate every (tasks, shots) grid point without retraining.
    Sweep {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long, value_delimiter = ',')]
        tasks_grid: Option<Vec<usize>>,
        #[arg(long, value_delimiter = ',')]
        shots_grid: Option<Vec<usize>>,
        #[arg(long)]
        episodes: Option<u64>,
        #[arg(long, value_enum, default_value_t = ModeArg::Mc)]
        mode: ModeArg,
        /// CSV destination; a JSON summary is written to `<out>.json`. Prints to stdout when absent.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train plain networks from scratch on each meta-test stream.
    Baseline {
        #[arg(long, value_enum)]
        kind: KindArg,
        #[arg(long, default_value = "sine", value_parser = parse_domain)]
        domain: Domain,
        #[arg(long, default_value_t = 10)]
        tasks: usize,
        #[arg(long, default_value_t = 10)]
        shots: usize,
        #[arg(long, default_value_t = 512)]
        episodes: u64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        lr: Option<f64>,
        /// Offline step cap.
        #[arg(long)]
        max_steps: Option<usize>,
    },
    /// Print one generated episode in the line-oriented text format.
    DumpEpisode {
        #[arg(long, value_parser = parse_domain)]
        domain: Domain,
        #[arg(long, default_value_t = 10)]
        tasks: usize,
        #[arg(long, default_value_t = 10)]
        shots: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 0)]
        index: u64,
        #[arg(long, value_enum, default_value_t = SplitArg::MetaTest)]
        split: SplitArg,
    },
    /// Parse, validate and print a configuration file with every key filled in.
    EchoConfig {
        #[arg(long)]
        config: PathBuf,
    },
}

fn parse_domain(s: &str) -> Result<Domain, String> {
    Domain::parse(s).ok_or_else(|| format!("unknown domain `{s}` (expected sine, synth-classify or synth-density)"))
}

struct Failure {
    code: i32,
    message: String,
}

impl Failure {
    fn config(message: impl Into<String>) -> Self {
        Failure { code: 1, message: message.into() }
    }
}

impl From<HarnessError> for Failure {
    fn from(e: HarnessError) -> Self {
        let code = if matches!(e, HarnessError::Diverged { .. }) { 2 } else { 1 };
        Failure { code, message: e.to_string() }
    }
}

fn mode_of(m: ModeArg) -> PredictMode {
    match m {
        ModeArg::Mc => PredictMode::DEFAULT_MC,
        ModeArg::Map => PredictMode::Map,
    }
}

fn write_file(path: &Path, contents: &[u8]) -> Result<(), Failure> {
    std::fs::write(path, contents).map_err(|e| Failure::config(format!("cannot write {}: {e}", path.display())))
}

fn with_suffix(path: &Path, suffix: &str) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

fn configure_threads() -> Result<(), Failure> {
    let Ok(value) = std::env::var(THREADS_ENV) else { return Ok(()) };
    let n: usize = value
        .trim()
        .parse()
        .ok()
        .filter(|&n| n >= 1)
        .ok_or_else(|| Failure::config(format!("{THREADS_ENV} must be a positive integer, got `{value}`")))?;
    // A pool may already exist when `run` is called repeatedly in one process.
    let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    Ok(())
}

fn execute(cmd: Command, out: &mut dyn Write, err: &mut dyn Write) -> Result<(), Failure> {
    let io = |e: std::io::Error| Failure::config(format!("write failed: {e}"));
    match cmd {
        Command::MetaTrain { config, out: ckpt_path, seed, steps, log_every } => {
            let text = std::fs::read_to_string(&config)
                .map_err(|e| Failure::config(format!("cannot read config {}: {e}", config.display())))?;
            let mut cfg = RunConfigFile::parse(&text).map_err(|e| Failure::config(format!("{}: {e}", config.display())))?;
            if let Some(s) = seed {
                cfg.seed = s;
            }
            if let Some(s) = steps {
                cfg.steps = s;
            }
            let meta = cfg.to_meta();
            meta.validate()?;
            let outcome = meta_train_with(&meta, |step, loss| {
                if log_every > 0 && step % log_every == 0 {
                    let _ = writeln!(err, "step {step} loss {loss:.6}");
                }
            })?;
            save_checkpoint(&ckpt_path, &outcome.checkpoint).map_err(|e| Failure::config(e.to_string()))?;
            write_file(&with_suffix(&ckpt_path, ".loss.csv"), curve_csv(&outcome.curve).as_bytes())?;
            writeln!(err, "wrote {}", ckpt_path.display()).map_err(io)?;
        }
        Command::Eval { ckpt, tasks, shots, episodes, mode } => {
            let c = load_checkpoint(&ckpt).map_err(|e| Failure::config(format!("{}: {e}", ckpt.display())))?;
            let opts = EvalOptions { mode: mode_of(mode), path: StreamPath::Sequential };
            let row = meta_eval(
                &c,
                tasks.unwrap_or(c.config.num_tasks),
                shots.unwrap_or(c.config.shots),
                episodes.unwrap_or(c.config.eval_episodes),
                opts,
            )?;
            out.write_all(metrics_csv(&[row]).as_bytes()).map_err(io)?;
        }
        Command::Sweep { ckpt, tasks_grid, shots_grid, episodes, mode, out: dest } => {
            let c = load_checkpoint(&ckpt).map_err(|e| Failure::config(format!("{}: {e}", ckpt.display())))?;
            let tasks = tasks_grid.unwrap_or_else(|| vec![c.config.num_tasks]);
            let shots = shots_grid.unwrap_or_else(|| vec![c.config.shots]);
            let opts = EvalOptions { mode: mode_of(mode), path: StreamPath::Sequential };
            let rows = sweep_generalization(&c, &tasks, &shots, episodes.unwrap_or(c.config.eval_episodes), opts)?;
            let csv = metrics_csv(&rows);
            match dest {
                Some(path) => {
                    write_file(&path, csv.as_bytes())?;
                    write_file(&with_suffix(&path, ".json"), metrics_json(&rows).as_bytes())?;
                }
                None => out.write_all(csv.as_bytes()).map_err(io)?,
            }
        }
        Command::Baseline { kind, domain, tasks, shots, episodes, seed, lr, max_steps } => {
            let kind = match kind {
                KindArg::Online => BaselineKind::Online,
                KindArg::Offline => BaselineKind::Offline,
            };
            let mut cfg = BaselineConfig::of(kind);
            if let Some(lr) = lr {
                cfg.lr = lr;
            }
            if let Some(m) = max_steps {
                cfg.max_steps = m;
            }
            let spec = StreamSpec::new(domain, tasks, shots, seed);
            let row = run_baseline(&spec, episodes, &cfg)?;
            out.write_all(metrics_csv(&[row]).as_bytes()).map_err(io)?;
        }
        Command::DumpEpisode { domain, tasks, shots, seed, index, split } => {
            let split = match split {
                SplitArg::MetaTrain => Split::MetaTrain,
                SplitArg::MetaTest => Split::MetaTest,
            };
            let spec = StreamSpec::new(domain, tasks, shots, seed);
            spec.validate().map_err(|e| Failure::config(e.to_string()))?;
            let source = EpisodeSource::new(spec, split, index + 1);
            let ep = source.episode(index).map_err(|e| Failure::config(e.to_string()))?;
            debug_assert_eq!(ep.id, EpisodeId::new(split, index));
            out.write_all(ep.to_text().as_bytes()).map_err(io)?;
        }
        Command::EchoConfig { config } => {
            let text = std::fs::read_to_string(&config)
                .map_err(|e| Failure::config(format!("cannot read config {}: {e}", config.display())))?;
            let cfg = RunConfigFile::parse(&text).map_err(|e| Failure::config(format!("{}: {e}", config.display())))?;
            out.write_all(cfg.echo().as_bytes()).map_err(io)?;
        }
    }
    Ok(())
}

/// Runs the CLI with `args` (including the program name) and returns the exit code.
pub fn run<I, T>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = write!(err, "{e}");
            return if e.use_stderr() { 1 } else { 0 };
        }
    };
    let result = configure_threads().and_then(|_| execute(cli.command, out, err));
    match result {
        Ok(()) => 0,
        Err(f) => {
            let _ = writeln!(err, "error: {}", f.message);
            f.code
        }
    }
}
