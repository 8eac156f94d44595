//! Command line surface: `gen-data`, `train`, `distill`, `rollout` and
//! `evaluate`, each driven by a `key=value` configuration.

mod commands;
mod config;

use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};

use crate::error::{Error, Result};

pub use config::RunConfig;

#[derive(Parser, Debug)]
#[command(name = "flowcast", version, about = "Flow matching surrogates for dynamical systems")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
    /// Config file of key=value lines.
    #[arg(long, global = true, value_name = "PATH")]
    pub config: Option<PathBuf>,
    #[arg(long, global = true, default_value_t = 0, value_name = "U64")]
    pub seed: u64,
    /// Output directory.
    #[arg(long, global = true, value_name = "DIR")]
    pub out: Option<PathBuf>,
    /// Overwrite an existing, non-empty output directory.
    #[arg(long, global = true)]
    pub force: bool,
    /// Override one config key; may be repeated.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    pub set: Vec<String>,
}

#[derive(Subcommand, Debug, Clone, Copy, PartialEq, Eq)]
pub enum Command {
    /// Simulate trajectories and write train/test FMDS files.
    GenData,
    /// Train a flow matching (`fm`) or deterministic (`det`) model.
    Train,
    /// Distill a trained flow: direct, progressive, rectify, add or wgan.
    Distill,
    /// Roll a trained sampler forward from test states.
    Rollout,
    /// Per-step metrics and spectra of a rollout against the real data.
    Evaluate,
}

impl Command {
    fn defaults(self) -> &'static [(&'static str, &'static str)] {
        match self {
            Command::GenData => commands::GEN_DATA_KEYS,
            Command::Train => commands::TRAIN_KEYS,
            Command::Distill => commands::DISTILL_KEYS,
            Command::Rollout => commands::ROLLOUT_KEYS,
            Command::Evaluate => commands::EVALUATE_KEYS,
        }
    }
}

/// Process exit code for an error: 2 validation, 3 numerical, 4 I/O.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::NonFinite(_) | Error::Unstable(_) => 3,
        Error::Io(_) | Error::Format(_) => 4,
        Error::Shape(_) | Error::Invalid(_) | Error::MissingParam(_) => 2,
    }
}

/// Cap the global thread pool from `FMF_THREADS`.
pub fn init_threads() -> Result<()> {
    if let Ok(v) = std::env::var("FMF_THREADS") {
        let n: usize = v.parse().map_err(|_| Error::invalid(format!("FMF_THREADS=`{v}` is not a count")))?;
        // A pool that is already built keeps its size.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n.max(1)).build_global();
    }
    Ok(())
}

fn prepare_out(out: &Path, force: bool) -> Result<()> {
    if out.exists() {
        let non_empty = std::fs::read_dir(out)?.next().is_some();
        if non_empty && !force {
            return Err(Error::invalid(format!("output directory {} is not empty; pass --force", out.display())));
        }
    }
    std::fs::create_dir_all(out)?;
    Ok(())
}

/// Run one parsed invocation.
pub fn run(cli: &Cli) -> Result<()> {
    let mut cfg = RunConfig::new(cli.command.defaults());
    if let Some(p) = &cli.config {
        cfg.apply_file(p)?;
    }
    for kv in &cli.set {
        cfg.apply_override(kv)?;
    }
    let out = cli.out.clone().ok_or_else(|| Error::invalid("--out DIR is required"))?;
    prepare_out(&out, cli.force)?;
    let ctx = commands::Context { cfg, seed: cli.seed, out };
    match cli.command {
        Command::GenData => commands::gen_data(ctx),
        Command::Train => commands::train(ctx),
        Command::Distill => commands::distill(ctx),
        Command::Rollout => commands::rollout(ctx),
        Command::Evaluate => commands::evaluate(ctx),
    }
}

/// Entry point of the binary: parse, run, report, and return the exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    let result = init_threads().and_then(|_| run(&cli));
    match result {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}
