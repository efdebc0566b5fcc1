use std::io::Write;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use scd_core::commands::{self, ExitStatus, Overrides};
use scd_core::experiment::Preset;

/// Stochastic channel decorrelation for Siamese matching networks.
#[derive(Parser)]
#[command(name = "scd", version)]
struct Cli {
    #[command(subcommand)]
    verb: Verb,
}

#[derive(Subcommand)]
enum Verb {
    /// Train one model and write metrics, reports and checkpoints.
    Train(Common),
    /// Train with and without SCD from the same seed and compare.
    AbCompare(Common),
    /// Print activation sizes of the embedding.
    Shapes(Common),
    /// Finite-difference check of every differentiable operation.
    Gradcheck,
    /// Correlation report of a saved checkpoint.
    Report {
        #[command(flatten)]
        common: Common,
        /// Checkpoint file; defaults to <out>/checkpoint.bin.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
}

#[derive(Args)]
struct Common {
    /// Experiment config (JSON).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override the training seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Override the output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Built-in defaults to use when no config file is given.
    #[arg(long, value_enum)]
    preset: Option<PresetArg>,
}

#[derive(Clone, Copy, ValueEnum)]
enum PresetArg {
    Table1,
    Desk,
}

impl From<Common> for Overrides {
    fn from(c: Common) -> Self {
        Overrides {
            config: c.config,
            seed: c.seed,
            out: c.out,
            preset: c.preset.map(|p| match p {
                PresetArg::Table1 => Preset::Table1,
                PresetArg::Desk => Preset::Desk,
            }),
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let mut out = std::io::stdout().lock();
    let result = match cli.verb {
        Verb::Train(c) => commands::cmd_train(&c.into(), &mut out),
        Verb::AbCompare(c) => commands::cmd_ab_compare(&c.into(), &mut out),
        Verb::Shapes(c) => commands::cmd_shapes(&c.into(), &mut out),
        Verb::Gradcheck => commands::cmd_gradcheck(&mut out),
        Verb::Report { common, checkpoint } => commands::cmd_report(&common.into(), checkpoint.as_deref(), &mut out),
    };
    let _ = out.flush();
    let status = result.unwrap_or_else(|e| {
        eprintln!("error: {e}");
        ExitStatus::Invalid
    });
    ExitCode::from(status.code() as u8)
}
