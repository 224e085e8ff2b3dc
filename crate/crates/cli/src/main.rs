//! `factr`: train, evaluate and analyse FaCTR forecasters.
//!
//! Exit status is 0 on success, 1 for invalid input or usage and 2 when a
//! run fails.

mod commands;
mod config;
mod output;

use std::fmt;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use factr_core::eval::ScalingComponent;
use factr_core::model::Variant;
use factr_core::train::TransferMode;

use commands::Overrides;

/// Input the user can fix: a bad flag, config value or file.
#[derive(Debug)]
pub struct Invalid(pub String);

impl fmt::Display for Invalid {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Invalid {}

#[derive(Parser, Debug)]
#[command(name = "factr", version, about = "FaCTR multivariate forecasting")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train a forecaster and evaluate it on the test split.
    Train(RunArgs),
    /// Evaluate a checkpoint on the test split.
    Eval(EvalArgs),
    /// Masked-patch pretraining of an encoder.
    Pretrain(RunArgs),
    /// Train a new head on a frozen pretrained encoder.
    Probe(TransferArgs),
    /// Probe, then train every parameter.
    Finetune(TransferArgs),
    /// Generate the synthetic retail dataset.
    Synth(SynthArgs),
    /// Export attention and channel-influence maps for one test window.
    Inspect(InspectArgs),
    /// Write forecast-versus-actual tables and plots for test windows.
    Dump(DumpArgs),
    /// Audit parameter counts of a configuration or checkpoint.
    Params(ParamsArgs),
    /// Time the quadratic blocks over a size sweep.
    Bench(BenchArgs),
}

#[derive(Args, Debug)]
struct OverrideArgs {
    /// Seed; falls back to the config, then FACTR_SEED, then 0.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    horizon: Option<usize>,
    /// Sharpness-aware neighborhood radius.
    #[arg(long)]
    rho: Option<f64>,
    /// temporal-only, plus-fm or full.
    #[arg(long)]
    variant: Option<Variant>,
    /// Fraction of patches hidden during pretraining.
    #[arg(long)]
    mask_ratio: Option<f64>,
}

impl From<&OverrideArgs> for Overrides {
    fn from(a: &OverrideArgs) -> Self {
        Overrides {
            seed: a.seed,
            horizon: a.horizon,
            rho: a.rho,
            variant: a.variant,
            mask_ratio: a.mask_ratio,
        }
    }
}

#[derive(Args, Debug)]
struct RunArgs {
    #[arg(long)]
    config: PathBuf,
    /// Output directory; defaults to the config's `out`.
    #[arg(long)]
    out: Option<PathBuf>,
    #[command(flatten)]
    overrides: OverrideArgs,
    /// Write into an existing output.
    #[arg(long)]
    force: bool,
}

#[derive(Args, Debug)]
struct TransferArgs {
    /// Pretrained encoder checkpoint.
    #[arg(long)]
    checkpoint: PathBuf,
    #[command(flatten)]
    run: RunArgs,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Run configuration; defaults to run_config.json beside the checkpoint.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Report errors in the original units instead of z-scores.
    #[arg(long)]
    raw: bool,
    #[arg(long)]
    force: bool,
}

#[derive(Args, Debug)]
struct InspectArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Test window index.
    #[arg(long, default_value_t = 0)]
    window: usize,
    #[arg(long)]
    force: bool,
}

#[derive(Args, Debug)]
struct DumpArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Comma-separated test window indices.
    #[arg(long, value_delimiter = ',', default_value = "0")]
    windows: Vec<usize>,
    #[arg(long)]
    force: bool,
}

#[derive(Args, Debug)]
struct SynthArgs {
    #[arg(long, default_value_t = 1095)]
    days: usize,
    #[arg(long)]
    seed: Option<u64>,
    /// CSV file to write.
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    force: bool,
}

#[derive(Args, Debug)]
struct ParamsArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[command(flatten)]
    overrides: OverrideArgs,
    #[arg(long)]
    force: bool,
}

#[derive(Args, Debug)]
struct BenchArgs {
    /// fm or temporal; both when omitted.
    #[arg(long, value_delimiter = ',')]
    component: Vec<ScalingComponent>,
    /// Comma-separated sizes; defaults span an 8x range.
    #[arg(long, value_delimiter = ',')]
    sizes: Option<Vec<usize>>,
    #[arg(long, default_value_t = 5)]
    repetitions: usize,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    force: bool,
}

fn dispatch(command: Command) -> anyhow::Result<()> {
    use commands::*;
    match command {
        Command::Train(a) => train_cmd(TrainArgs {
            config: &a.config,
            out: a.out.as_deref(),
            overrides: (&a.overrides).into(),
            force: a.force,
        }),
        Command::Pretrain(a) => pretrain_cmd(PretrainArgs {
            config: &a.config,
            out: a.out.as_deref(),
            overrides: (&a.overrides).into(),
            force: a.force,
        }),
        Command::Probe(a) => transfer(a, TransferMode::Probe),
        Command::Finetune(a) => transfer(a, TransferMode::Finetune),
        Command::Eval(a) => eval_cmd(EvalArgs {
            checkpoint: &a.checkpoint,
            config: a.config.as_deref(),
            out: a.out.as_deref(),
            raw: a.raw,
            force: a.force,
        }),
        Command::Inspect(a) => inspect_cmd(InspectArgs {
            checkpoint: &a.checkpoint,
            config: a.config.as_deref(),
            out: a.out.as_deref(),
            window: a.window,
            force: a.force,
        }),
        Command::Dump(a) => dump_cmd(DumpArgs {
            checkpoint: &a.checkpoint,
            config: a.config.as_deref(),
            out: a.out.as_deref(),
            windows: &a.windows,
            force: a.force,
        }),
        Command::Synth(a) => synth_cmd(SynthArgs {
            days: a.days,
            seed: a.seed,
            out: &a.out,
            force: a.force,
        }),
        Command::Params(a) => params_cmd(ParamsArgs {
            config: a.config.as_deref(),
            checkpoint: a.checkpoint.as_deref(),
            out: a.out.as_deref(),
            overrides: (&a.overrides).into(),
            force: a.force,
        }),
        Command::Bench(a) => {
            let components = if a.component.is_empty() {
                vec![ScalingComponent::Fm, ScalingComponent::Temporal]
            } else {
                a.component
            };
            bench_cmd(BenchArgs {
                components: &components,
                sizes: a.sizes.as_deref(),
                repetitions: a.repetitions,
                out: a.out.as_deref(),
                force: a.force,
            })
        }
    }
}

fn transfer(a: TransferArgs, mode: TransferMode) -> anyhow::Result<()> {
    commands::transfer_cmd(commands::TransferArgs {
        config: &a.run.config,
        checkpoint: &a.checkpoint,
        out: a.run.out.as_deref(),
        overrides: (&a.run.overrides).into(),
        force: a.run.force,
        mode,
    })
}

fn is_validation(err: &anyhow::Error) -> bool {
    err.chain().any(|e| {
        e.is::<Invalid>() || e.downcast_ref::<factr_core::Error>().is_some_and(factr_core::Error::is_validation)
    })
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match dispatch(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(if is_validation(&e) { 1 } else { 2 })
        }
    }
}
