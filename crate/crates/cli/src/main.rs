//! `seg3d` — train, run, and inspect the 3D instance segmentation pipeline.
//!
//! Verbs: generate | train | infer | eval | export | verify. All verbs read
//! the same TOML run configuration (every field optional) and exit with
//! 0 on success, 1 on usage/config errors, 2 on data errors, 3 on numeric
//! failures.

mod commands;
mod config;
mod predictions;
mod verify;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use seg3d_core::Result;

use config::RunConfig;

#[derive(Parser)]
#[command(name = "seg3d", about = "Query-based 3D instance segmentation on voxel grids")]
struct Cli {
    /// Path to a TOML run configuration; defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Seed for commands with their own randomness (generate, infer).
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,

    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Write procedurally generated scenes to a directory.
    Generate {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 8)]
        count: usize,
    },
    /// Train a model on a directory of scenes and save the checkpoint.
    Train {
        #[arg(long)]
        scenes: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Also append per-step loss lines to this file.
        #[arg(long)]
        log: Option<PathBuf>,
    },
    /// Run a checkpoint on one scene and write a predictions file.
    Infer {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        scene: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Override the query count (rejected for parametric query init).
        #[arg(long)]
        queries: Option<usize>,
        /// Skip the DBSCAN mask-splitting step.
        #[arg(long)]
        no_dbscan: bool,
    },
    /// Score predictions against annotated scenes (files or directories).
    Eval {
        #[arg(long)]
        predictions: PathBuf,
        #[arg(long)]
        scenes: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Color a scene by predicted instances and write a PLY mesh file.
    Export {
        #[arg(long)]
        predictions: PathBuf,
        #[arg(long)]
        scene: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run a built-in verification suite.
    Verify {
        /// grad | hungarian | metrics | geometry
        #[arg(long)]
        suite: String,
    },
}

fn run(cli: Cli) -> Result<()> {
    let cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    match cli.cmd {
        Cmd::Generate { out, count } => commands::cmd_generate(&cfg, &out, count, cli.seed),
        Cmd::Train { scenes, out, log } => {
            commands::cmd_train(&cfg, &scenes, &out, log.as_deref())
        }
        Cmd::Infer { checkpoint, scene, out, queries, no_dbscan } => {
            commands::cmd_infer(&cfg, &checkpoint, &scene, &out, queries, no_dbscan, cli.seed)
        }
        Cmd::Eval { predictions, scenes, out } => {
            commands::cmd_eval(&predictions, &scenes, out.as_deref())
        }
        Cmd::Export { predictions, scene, out } => {
            commands::cmd_export(&predictions, &scene, &out)
        }
        Cmd::Verify { suite } => {
            let outcome = verify::run_suite(&suite)?;
            println!("{}", outcome.report());
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            // let clap print help/version normally, map real parse errors to 1
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e);
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
