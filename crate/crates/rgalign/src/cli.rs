//! Command-line front end. Exit codes: 0 success, 1 invalid usage or
//! configuration, 2 failure while running.

use std::ffi::OsString;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use rgalign_core::align::AlignMode;
use rgalign_core::bestofn::Strategy;

use crate::config::PipelineConfig;
use crate::error::{AppError, AppResult};
use crate::io::{metrics_csv, read_json};
use crate::pipeline::{Round, Run, CONFIG};

#[derive(Debug, Parser)]
#[command(name = "rgalign", version, about = "Ranking-guided query alignment pipeline on synthetic data")]
pub struct Cli {
    #[command(flatten)]
    pub global: GlobalArgs,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct GlobalArgs {
    /// Seed for every random choice of the run [default: 0, or the config file's seed]
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory [default: $RGALIGN_OUT/seed-<SEED>, or runs/seed-<SEED>]
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Threads for per-user evaluation and candidate scoring; results do not depend on it
    #[arg(long, global = true, default_value_t = 1)]
    pub workers: usize,
    /// JSON pipeline configuration; flags override its values [default: <OUT>/config.json if present]
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Weight of the user-intent similarity in the ranker score [default: 0.7]
    #[arg(long, global = true)]
    pub omega: Option<f64>,
    /// InfoNCE temperature [default: 0.05]
    #[arg(long, global = true)]
    pub tau: Option<f64>,
    /// DPO temperature [default: 0.1]
    #[arg(long, global = true)]
    pub beta: Option<f64>,
    /// Weight of the contrastive term in the joint loss [default: 1.0]
    #[arg(long = "lambda-cl", global = true)]
    pub lambda_cl: Option<f64>,
    /// Weight of the causal LM term in the joint loss [default: 0.01]
    #[arg(long = "lambda-causal", global = true)]
    pub lambda_causal: Option<f64>,
    /// Embedding-noise scale during alignment [default: 5]
    #[arg(long = "neftune-alpha", global = true)]
    pub neftune_alpha: Option<f64>,
}

#[derive(Debug, Args)]
pub struct RoundArg {
    /// Closed-loop round whose Stage-2/3 directories are used
    #[arg(long, default_value_t = 1)]
    pub iteration: usize,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate the synthetic knowledge base, datasets and oracle file
    GenData,
    /// Train the baseline, the reward model and QE-Rec (Stage 1)
    TrainStage1,
    /// Generate and reward-score teacher and baseline candidates
    GenCandidates(RoundArg),
    /// Select winners and build preference pairs
    Select {
        /// Best-of-N strategy: v1, v2, v3 or v4 [default: the config's strategy, v1]
        #[arg(long, value_parser = parse_strategy)]
        strategy: Option<Strategy>,
        #[command(flatten)]
        round: RoundArg,
    },
    /// Align the reasoner on the selected data
    Align {
        /// Alignment mode: sft, sft-dpo or sft-cl [default: sft-cl]
        #[arg(long, value_parser = parse_mode)]
        mode: Option<AlignMode>,
        #[command(flatten)]
        round: RoundArg,
    },
    /// Retrain the ranker on the aligned reasoner's queries (Stage 3)
    Calibrate {
        /// Alignment mode whose reasoner is used [default: sft-cl]
        #[arg(long, value_parser = parse_mode)]
        mode: Option<AlignMode>,
        #[command(flatten)]
        round: RoundArg,
    },
    /// Evaluate a ranker checkpoint on the eval split
    Eval {
        /// Ranker checkpoint, e.g. <OUT>/stage1/qerec.json
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Write the comparison table
    Report,
    /// Run every stage, the report and the manifest
    RunAll {
        /// Closed-loop rounds of Stages 2 and 3 [default: 1]
        #[arg(long)]
        iterations: Option<usize>,
    },
}

fn parse_strategy(s: &str) -> Result<Strategy, String> {
    Strategy::parse(s).map_err(|e| e.to_string())
}

fn parse_mode(s: &str) -> Result<AlignMode, String> {
    AlignMode::parse(s).ok_or_else(|| format!("unknown mode `{s}` (expected sft, sft-dpo or sft-cl)"))
}

fn default_out(seed: u64) -> PathBuf {
    let root = std::env::var_os("RGALIGN_OUT").map(PathBuf::from).unwrap_or_else(|| PathBuf::from("runs"));
    root.join(format!("seed-{seed}"))
}

/// Config file, then flag overrides.
fn resolve(global: &GlobalArgs, iterations: Option<usize>) -> AppResult<(PipelineConfig, PathBuf)> {
    let from_file = |p: &Path| read_json::<PipelineConfig>(p).map_err(|e| AppError::Invalid(e.to_string()));
    let mut cfg = match (&global.config, &global.out) {
        (Some(p), _) => from_file(p)?,
        (None, Some(out)) if out.join(CONFIG).exists() => from_file(&out.join(CONFIG))?,
        _ => PipelineConfig::default(),
    };
    let seed = global.seed.unwrap_or(cfg.seed);
    cfg.apply_seed(seed);
    if let Some(v) = global.omega {
        cfg.qerec.omega = v;
    }
    if let Some(v) = global.tau {
        cfg.align.tau = v;
    }
    if let Some(v) = global.beta {
        cfg.align.beta = v;
    }
    if let Some(v) = global.lambda_cl {
        cfg.align.lambda_cl = v;
    }
    if let Some(v) = global.lambda_causal {
        cfg.align.lambda_causal = v;
    }
    if let Some(v) = global.neftune_alpha {
        cfg.align.neftune_alpha = v;
    }
    if let Some(n) = iterations {
        cfg.iterations = n;
    }
    let out = global.out.clone().unwrap_or_else(|| default_out(seed));
    Ok((cfg, out))
}

fn execute(cli: Cli, stdout: &mut dyn Write) -> AppResult<()> {
    let iterations = match &cli.command {
        Command::RunAll { iterations } => *iterations,
        _ => None,
    };
    let (cfg, out) = resolve(&cli.global, iterations)?;
    let mut say = |s: String| {
        let _ = writeln!(stdout, "{s}");
    };
    let primary = cfg.align.mode;
    let strategy = cfg.strategy;
    let run = Run::new(cfg, &out, cli.global.workers)?;
    match cli.command {
        Command::GenData => {
            run.gen_data()?;
            say(format!("wrote datasets to {}", out.display()));
        }
        Command::TrainStage1 => say(metrics_csv(&run.stage1()?)),
        Command::GenCandidates(r) => say(format!("{} candidate sets", run.gen_candidates(Round(r.iteration))?)),
        Command::Select { strategy: s, round } => {
            let summary = run.select(Round(round.iteration), s.unwrap_or(strategy))?;
            say(format!(
                "{}: kept {}, discarded {}, {} pairs",
                summary.strategy.as_str(),
                summary.stats.kept,
                summary.stats.discarded,
                summary.n_pairs
            ));
        }
        Command::Align { mode, round } => {
            let s = run.align(Round(round.iteration), mode.unwrap_or(primary))?;
            say(format!(
                "{}: held-out reward {:.4} -> {:.4}{}",
                s.mode.as_str(),
                s.reward_eval_before,
                s.reward_eval_after,
                if s.fallback { " (no pairs: SFT only)" } else { "" }
            ));
        }
        Command::Calibrate { mode, round } => say(metrics_csv(&run.calibrate(Round(round.iteration), mode.unwrap_or(primary))?)),
        Command::Eval { checkpoint } => say(metrics_csv(&[run.eval_checkpoint(&checkpoint)?])),
        Command::Report => {
            run.report()?;
            say(crate::io::read_text(&run.path(crate::pipeline::REPORT_TXT))?);
        }
        Command::RunAll { .. } => {
            run.run_all()?;
            say(crate::io::read_text(&run.path(crate::pipeline::REPORT_TXT))?);
        }
    }
    Ok(())
}

/// Parses `args` (program name first), runs the command and returns the
/// process exit code.
pub fn run_cli<I, T>(args: I, stdout: &mut dyn Write, stderr: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            let text = e.render().to_string();
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => {
                    let _ = write!(stdout, "{text}");
                    0
                }
                _ => {
                    let _ = write!(stderr, "{text}");
                    1
                }
            };
        }
    };
    match execute(cli, stdout) {
        Ok(()) => 0,
        Err(e) => {
            let _ = writeln!(stderr, "error: {e}");
            e.exit_code()
        }
    }
}
