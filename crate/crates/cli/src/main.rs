use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use nests6_cli::commands::{self, Context, EvalRequest};
use nests6_cli::config::RunConfig;
use nests6_cli::{exit_code, EXIT_USAGE};
use nests6_core::data::DriftKind;
use nests6_core::Result;

#[derive(Parser)]
#[command(name = "nests6", version, about = "Selective state-space traffic forecaster with nested memory")]
struct Cli {
    /// Run configuration (TOML). Defaults apply when omitted.
    #[arg(short, long, global = true)]
    config: Option<PathBuf>,
    /// Maximum worker threads.
    #[arg(long, global = true, default_value_t = 1)]
    workers: usize,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(clap::Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    horizon: Option<usize>,
    /// none, scale_offset, spatial_shift or volatility.
    #[arg(long, value_parser = parse_drift)]
    drift: Option<DriftKind>,
    #[arg(long)]
    no_memory: bool,
    /// Also write a per-pixel RMSE heatmap.
    #[arg(long)]
    per_pixel_map: bool,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a synthetic grid series.
    Synth {
        #[arg(short, long)]
        output: Option<PathBuf>,
    },
    /// Train and write the best checkpoint plus a training log.
    Train,
    /// One-step (or --horizon) metrics on the configured split.
    Eval(EvalArgs),
    /// Autoregressive rollout; eval with the rollout horizon.
    Rollout(EvalArgs),
    /// All drift kinds with and without memory.
    Drift {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Analytic MAC ledger.
    Macs {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Grid size as HxW.
        #[arg(long, value_parser = parse_grid)]
        grid: Option<(usize, usize)>,
    },
    /// Print the effective configuration.
    Config,
}

fn parse_drift(s: &str) -> std::result::Result<DriftKind, String> {
    DriftKind::parse(s).map_err(|e| e.to_string())
}

fn parse_grid(s: &str) -> std::result::Result<(usize, usize), String> {
    let (h, w) = s.split_once(['x', 'X']).ok_or_else(|| format!("expected HxW, got {s:?}"))?;
    let n = |v: &str| v.trim().parse::<usize>().map_err(|e| format!("{v:?}: {e}"));
    Ok((n(h)?, n(w)?))
}

impl From<EvalArgs> for EvalRequest {
    fn from(a: EvalArgs) -> Self {
        EvalRequest {
            checkpoint: a.checkpoint,
            horizon: a.horizon,
            drift: a.drift,
            no_memory: a.no_memory,
            per_pixel_map: a.per_pixel_map,
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    let cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    let ctx = Context::new(cfg, cli.workers)?;
    match cli.cmd {
        Cmd::Synth { output } => commands::cmd_synth(&ctx, output.as_deref()).map(drop),
        Cmd::Train => commands::cmd_train(&ctx).map(drop),
        Cmd::Eval(a) => commands::cmd_eval(&ctx, &a.into()).map(drop),
        Cmd::Rollout(a) => commands::cmd_rollout(&ctx, &a.into()).map(drop),
        Cmd::Drift { checkpoint } => commands::cmd_drift(&ctx, checkpoint.as_deref()).map(drop),
        Cmd::Macs { checkpoint, grid } => commands::cmd_macs(&ctx, checkpoint.as_deref(), grid).map(drop),
        Cmd::Config => {
            print!("{}", ctx.cfg.to_toml());
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { 0 };
            let _ = e.print();
            return ExitCode::from(code as u8);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            let code = exit_code(&e);
            ExitCode::from(code as u8)
        }
    }
}

