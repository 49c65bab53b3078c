//! Command-line front end: data generation, training, generation,
//! verification and cost analysis over one flat config format.
//!
//! Exit codes: 0 success, 1 verification failure, 2 configuration error,
//! 3 I/O or file-format error, 4 numeric divergence.

pub mod commands;
pub mod config;

use std::ffi::OsString;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

use scalevar::model::MaskKind;
use scalevar::verify::VerifyOptions;
use scalevar::Error;

use crate::commands::{AnalyzeRequest, GenerateRequest};
use crate::config::RunConfig;

pub const EXIT_OK: i32 = 0;
pub const EXIT_VERIFY: i32 = 1;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_IO: i32 = 3;
pub const EXIT_NUMERIC: i32 = 4;

#[derive(Debug, Parser)]
#[command(name = "scalevar", version, about = "Scale-wise dynamic-depth token generation")]
pub struct Cli {
    /// Flat `key = value` config file.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Override a config key, e.g. `--set policy.d=2`. Repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write the training and validation shards.
    GenData,
    /// Run progressive training.
    Train,
    /// Sample pyramids from a checkpoint.
    Generate(GenerateArgs),
    /// KV-cache and FLOPs sweep plus the layer-nesting audit.
    Analyze(AnalyzeArgs),
    /// Run the property suite.
    Verify(VerifyArgs),
}

#[derive(Debug, Args)]
pub struct GenerateArgs {
    /// Subnet depths, comma-separated; each must be supported.
    #[arg(long = "d", value_delimiter = ',')]
    pub d: Vec<usize>,
    #[arg(long = "N")]
    pub bridge: Option<usize>,
    #[arg(long)]
    pub count: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Also write every token map as a binary graymap.
    #[arg(long)]
    pub pgm: bool,
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct AnalyzeArgs {
    #[arg(long = "D", default_value_t = 30)]
    pub depth: usize,
    #[arg(long, value_delimiter = ',', default_value = "2,4,8,16,30")]
    pub depths: Vec<usize>,
    #[arg(long = "Ns", value_delimiter = ',', default_value = "6,7,8,9,10")]
    pub bridges: Vec<usize>,
    /// `large`, `toy`, or comma-separated side lengths.
    #[arg(long, default_value = "large")]
    pub schedule: String,
    #[arg(long, default_value_t = 1920)]
    pub width: usize,
    /// Also write the report to this file.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct VerifyArgs {
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long, default_value_t = 20)]
    pub pyramids: usize,
    #[arg(long, default_value_t = 100)]
    pub fd_coordinates: usize,
    /// Test hook: run the causality check without the block-causal mask.
    #[arg(long, hide = true)]
    pub corrupt_mask: bool,
}

pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Io { .. } | Error::Format { .. } => EXIT_IO,
        Error::Numeric(_) => EXIT_NUMERIC,
        _ => EXIT_CONFIG,
    }
}

fn execute(cli: Cli) -> Result<i32, Error> {
    let load = || RunConfig::load(cli.config.as_deref(), &cli.overrides);
    match &cli.command {
        Command::GenData => {
            let s = commands::gen_data(&load()?)?;
            println!("train {} samples -> {}", s.train.1, s.train.0.display());
            println!("val {} samples -> {}", s.val.1, s.val.0.display());
        }
        Command::Train => {
            let cfg = load()?;
            let h = commands::train(&cfg)?;
            println!("trained {} epochs, metrics -> {}", h.epochs.len(), cfg.metrics_path().display());
            for c in h.checkpoints.iter().chain([&cfg.checkpoint_path()]) {
                println!("checkpoint {}", c.display());
            }
        }
        Command::Generate(a) => {
            let req = GenerateRequest {
                depths: a.d.clone(),
                bridge: a.bridge,
                count: a.count,
                seed: a.seed,
                pgm: a.pgm,
                checkpoint: a.checkpoint.clone(),
            };
            for p in commands::generate(&load()?, &req)? {
                println!("wrote {}", p.display());
            }
        }
        Command::Analyze(a) => {
            let req = AnalyzeRequest {
                depth: a.depth,
                depths: a.depths.clone(),
                bridges: a.bridges.clone(),
                schedule: commands::parse_schedule(&a.schedule)?,
                width: a.width,
            };
            let report = commands::analyze(&req)?;
            if let Some(p) = &a.out {
                std::fs::write(p, &report).map_err(|e| Error::io(p, e))?;
            }
            print!("{report}");
        }
        Command::Verify(a) => {
            let opts = VerifyOptions {
                seed: match a.seed {
                    Some(s) => s,
                    None => config::global_seed()?,
                },
                mask: if a.corrupt_mask { MaskKind::Unmasked } else { MaskKind::BlockCausal },
                pyramids: a.pyramids,
                fd_coordinates: a.fd_coordinates,
            };
            let checks = commands::verify(&opts)?;
            for c in &checks {
                println!("{}", commands::format_check(c));
            }
            if checks.iter().any(|c| !c.passed) {
                return Ok(EXIT_VERIFY);
            }
        }
    }
    Ok(EXIT_OK)
}

/// Parses `args` (program name first) and runs the command, returning
/// the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_CONFIG } else { EXIT_OK };
        }
    };
    match execute(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}
