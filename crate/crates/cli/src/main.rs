use std::path::PathBuf;
use std::process::ExitCode;

use clap::error::ErrorKind;
use clap::{Parser, Subcommand, ValueEnum};
use lawin::analysis::suite::Level;
use lawin::data::SynthConfig;
use lawin_cli::commands::{self, EvalArgs, Exit, FlopsArgs, TrainArgs};

/// Large window attention segmentation: training, evaluation, cost model
/// and verification.
#[derive(Parser)]
#[command(name = "lawin", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum CheckLevel {
    Quick,
    Full,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model from a JSON run config.
    Train {
        config: PathBuf,
        /// Overrides `train.seed`.
        #[arg(long)]
        seed: Option<u64>,
        /// Output directory for checkpoints, metrics.tsv and config.json.
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate a checkpoint on a dataset directory.
    Eval {
        checkpoint: PathBuf,
        dataset: PathBuf,
        /// Directory for predicted masks and report.json.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Run config; defaults to config.json next to the checkpoint.
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Print analytic and measured attention costs.
    Flops {
        /// Run config supplying P, D and the ratios; the full-size pyramid otherwise.
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 128)]
        height: usize,
        #[arg(long, default_value_t = 128)]
        width: usize,
        /// Channel count C; defaults to the pyramid dim.
        #[arg(long)]
        channels: Option<usize>,
        /// Patch size P; defaults to the pyramid patch.
        #[arg(long)]
        patch: Option<usize>,
        /// Side of the instrumented runs, rounded up to a multiple of P.
        #[arg(long, default_value_t = 32)]
        measure_size: usize,
        /// Channel cap for the instrumented runs.
        #[arg(long, default_value_t = 64)]
        measure_channels: usize,
        /// Write the TSV table here instead of stdout.
        #[arg(long)]
        tsv: Option<PathBuf>,
    },
    /// Run the verification suite; exits 3 if any property fails.
    Check {
        #[arg(long, value_enum, default_value_t = CheckLevel::Quick)]
        level: CheckLevel,
    },
    /// Generate a synthetic dataset of shapes with exact masks.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 64)]
        n: usize,
        #[arg(long, default_value_t = 32)]
        size: usize,
        #[arg(long, default_value_t = 3)]
        classes: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

fn run(cli: Cli) -> anyhow::Result<Exit> {
    match cli.command {
        Command::Train { config, seed, out } => commands::cmd_train(&TrainArgs { config, seed, out }),
        Command::Eval {
            checkpoint,
            dataset,
            out,
            config,
        } => commands::cmd_eval(&EvalArgs {
            checkpoint,
            dataset,
            out,
            config,
        }),
        Command::Flops {
            config,
            height,
            width,
            channels,
            patch,
            measure_size,
            measure_channels,
            tsv,
        } => commands::cmd_flops(&FlopsArgs {
            config,
            height,
            width,
            channels,
            patch,
            measure_size,
            measure_channels,
            tsv,
        }),
        Command::Check { level } => Ok(commands::cmd_check(match level {
            CheckLevel::Quick => Level::Quick,
            CheckLevel::Full => Level::Full,
        })),
        Command::Synth {
            out,
            n,
            size,
            classes,
            seed,
        } => commands::cmd_synth(
            &out,
            &SynthConfig {
                count: n,
                size,
                num_classes: classes,
                seed,
            },
        ),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            let ok = matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion);
            return ExitCode::from(if ok { 0 } else { Exit::Usage as u8 });
        }
    };
    let code = match run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            match e.downcast_ref::<lawin::Error>() {
                Some(lawin::Error::NonFiniteLoss { .. }) => Exit::NumericalAbort,
                _ => Exit::Usage,
            }
        }
    };
    ExitCode::from(code as u8)
}
