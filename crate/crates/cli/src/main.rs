mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use lpt_core::Error;

use config::Loaded;

/// Train latent prompt Transformers and shift them toward high-scoring sequences.
#[derive(Parser)]
#[command(name = "lpt", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// Run configuration (TOML). Built-in defaults when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Checkpoint to start from.
    #[arg(long, global = true)]
    checkpoint: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Overrides the configured output directory.
    #[arg(long, global = true)]
    output_dir: Option<PathBuf>,
    /// Validate inputs and print the resolved configuration without computing.
    #[arg(long, global = true)]
    dry_run: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Fit prior and generator on sequences alone.
    Pretrain(Common),
    /// Fit all parts on sequences with properties.
    Finetune(Common),
    /// Run gradual distribution shifting against the configured oracles.
    Sgds(Common),
    /// Draw sequences, optionally conditioned on target property values.
    Sample {
        #[command(flatten)]
        common: Common,
        /// Target values in raw units, comma separated, one per objective.
        #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
        y: Option<Vec<f64>>,
        #[arg(long, default_value_t = 10)]
        count: usize,
        #[arg(long, default_value_t = 1.0)]
        temperature: f64,
    },
    /// Report likelihood and property-prediction quality on the configured corpus.
    Eval(Common),
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Checkpoint(_) => 3,
        Error::Oracle(_) => 4,
        Error::NumericFailure(_) | Error::NonScalarLoss(_) | Error::ShapeMismatch { .. } => 5,
        _ => 2,
    }
}

fn load(c: &Common) -> lpt_core::Result<Loaded> {
    let mut cfg = match &c.config {
        Some(p) => Loaded::load(p)?,
        None => Loaded::defaults(),
    };
    if let Some(s) = c.seed {
        cfg.cfg.seed = s;
    }
    if let Some(d) = &c.output_dir {
        cfg.cfg.output_dir = d.clone();
    }
    cfg.validate()?;
    Ok(cfg)
}

fn run(cli: Cli) -> lpt_core::Result<()> {
    match cli.command {
        Command::Pretrain(c) => commands::cmd_pretrain(load(&c)?, c.checkpoint.as_deref(), c.dry_run),
        Command::Finetune(c) => commands::cmd_finetune(load(&c)?, c.checkpoint.as_deref(), c.dry_run),
        Command::Sgds(c) => commands::cmd_sgds(load(&c)?, c.checkpoint.as_deref(), c.dry_run),
        Command::Sample {
            common: c,
            y,
            count,
            temperature,
        } => commands::cmd_sample(load(&c)?, c.checkpoint.as_deref(), y, count, temperature, c.dry_run),
        Command::Eval(c) => commands::cmd_eval(load(&c)?, c.checkpoint.as_deref(), c.dry_run),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
