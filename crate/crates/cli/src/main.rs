//! `lsgc` — linguistic steganalysis at desk scale.
//!
//! Verbs: `synth` (build cover/stego corpora), `prepare` (filter, balance,
//! 6:2:2 split), `train` (fine-tune one mode), `eval` (score a checkpoint,
//! or repeat training across seeds), `bench` (time generation vs
//! classification), `ablate-r` (adapter-rank sweep), `gradcheck` (64-bit
//! finite-difference verification), `report` (re-render stored results).

mod commands;
mod config;
mod error;
mod manifest;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use lsgc_core::model::Mode;

use commands::Ctx;
use config::Config;
use error::CliError;

#[derive(Parser)]
#[command(name = "lsgc", version, about = "Two-mode linguistic steganalysis toolkit")]
struct Cli {
    /// Configuration file (line-oriented `key = value` with [sections]).
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Master seed; overrides the config's per-command seed.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Output directory for artifacts and the run manifest.
    #[arg(long, global = true)]
    out: Option<PathBuf>,

    /// Pipeline mode; overrides the config.
    #[arg(long, global = true, value_parser = ["gen", "cls"])]
    mode: Option<String>,

    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Synthesize cover and stego corpora at one or more concealment dials.
    Synth,
    /// Filter, balance, and split corpora 6:2:2 into train/val/test.
    Prepare,
    /// Fine-tune the selected mode on prepared splits.
    Train,
    /// Evaluate a checkpoint, or rerun training across several seeds.
    Eval,
    /// Train both modes on identical data and compare wall-clock time.
    Bench,
    /// Sweep the adapter rank and tabulate accuracy per mode.
    #[command(name = "ablate-r")]
    AblateR,
    /// Run the 64-bit finite-difference gradient verification suite.
    Gradcheck,
    /// Render a stored report file (or directory holding report.json).
    Report {
        /// Report JSON file or artifact directory.
        path: PathBuf,
    },
}

/// Caps the worker pool when LSGC_THREADS is set; otherwise the library
/// default (one worker per core) stands.
fn cap_threads() {
    if let Ok(v) = std::env::var("LSGC_THREADS") {
        if let Ok(n) = v.parse::<usize>() {
            if n >= 1 {
                let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
            }
        }
    }
}

fn ctx_for(cli: &Cli, verb: &str) -> Result<Ctx, CliError> {
    let config_path = cli
        .config
        .as_ref()
        .ok_or_else(|| CliError::Usage(format!("{verb} needs --config")))?;
    let config = Config::load(config_path)?;
    let out = cli
        .out
        .clone()
        .ok_or_else(|| CliError::Usage(format!("{verb} needs --out")))?;
    let mode = match cli.mode.as_deref() {
        None => None,
        Some("gen") => Some(Mode::Gen),
        Some("cls") => Some(Mode::Cls),
        Some(other) => {
            return Err(CliError::Usage(format!("unknown mode {other:?}")));
        }
    };
    let mut argv = format!("lsgc {verb} --config {}", config_path.display());
    if let Some(s) = cli.seed {
        argv.push_str(&format!(" --seed {s}"));
    }
    if let Some(m) = mode {
        argv.push_str(&format!(" --mode {m}"));
    }
    Ok(Ctx {
        config,
        out,
        seed: cli.seed,
        mode,
        argv,
    })
}

fn run(cli: &Cli) -> Result<(), CliError> {
    match &cli.cmd {
        Cmd::Synth => commands::cmd_synth(&ctx_for(cli, "synth")?),
        Cmd::Prepare => commands::cmd_prepare(&ctx_for(cli, "prepare")?),
        Cmd::Train => commands::cmd_train(&ctx_for(cli, "train")?),
        Cmd::Eval => commands::cmd_eval(&ctx_for(cli, "eval")?),
        Cmd::Bench => commands::cmd_bench(&ctx_for(cli, "bench")?),
        Cmd::AblateR => commands::cmd_ablate_r(&ctx_for(cli, "ablate-r")?),
        Cmd::Gradcheck => commands::cmd_gradcheck(),
        Cmd::Report { path } => commands::cmd_report(path),
    }
}

fn main() -> ExitCode {
    cap_threads();
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
