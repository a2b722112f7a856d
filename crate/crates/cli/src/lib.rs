//! Command-line surface of the helpz toolkit.
//!
//! Exit codes: 0 success, 1 invalid input or data, 2 usage error,
//! 3 numerical failure.

mod commands;

use std::ffi::OsString;
use std::io::Write;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use helpz::attnselect::Strategy;
use helpz::baselines::{AttentionSignal, ErrorSignal, HumanLayout};
use helpz::justifier::GradCamVariant;
use helpz::{Split, VarianceMode};

pub const EXIT_OK: i32 = 0;
pub const EXIT_INVALID: i32 = 1;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_NUMERICAL: i32 = 3;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error(transparent)]
    Core(#[from] helpz::Error),
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Invalid(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Core(e) if e.is_numerical() => EXIT_NUMERICAL,
            CliError::Core(helpz::Error::InvalidParameter(_)) | CliError::Usage(_) => EXIT_USAGE,
            CliError::Core(_) | CliError::Invalid(_) => EXIT_INVALID,
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Core(e.into())
    }
}

pub type CliResult<T> = std::result::Result<T, CliError>;

#[derive(Debug, Parser)]
#[command(
    name = "helpz",
    version,
    about = "Evaluate how helpful heatmap explanations are"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Validate a record file and resolve its stack references.
    Ingest(IngestArgs),
    /// Compute relevance and HELP_Z reports.
    Eval(EvalArgs),
    /// Choose attention heads or layers by validation helpfulness.
    Select(SelectArgs),
    /// Train the failure-predicting justifier.
    TrainJustifier(TrainArgs),
    /// Write GradCAM error maps from a trained justifier.
    GenErrormaps(ErrorMapArgs),
    /// Generate a synthetic dataset.
    Synth(SynthArgs),
    /// Validate HELP_Z against simulated users.
    Simulate(SimulateArgs),
}

#[derive(Debug, Args)]
pub struct DataArgs {
    /// Record file (one JSON object per line).
    #[arg(long)]
    pub data: PathBuf,
    /// Attention-stack file overriding the paths in stack references.
    #[arg(long)]
    pub stacks: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct IngestArgs {
    #[command(flatten)]
    pub input: DataArgs,
    /// Where to write the validated dataset; written only if every record is valid.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum ModeArg {
    Attention,
    Error,
    Joint,
    All,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum SplitArg {
    Train,
    Val,
    Test,
    All,
}

impl SplitArg {
    pub fn split(self) -> Option<Split> {
        match self {
            SplitArg::Train => Some(Split::Train),
            SplitArg::Val => Some(Split::Val),
            SplitArg::Test => Some(Split::Test),
            SplitArg::All => None,
        }
    }
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[command(flatten)]
    pub input: DataArgs,
    #[arg(long, value_enum, default_value_t = ModeArg::All)]
    pub mode: ModeArg,
    #[arg(long, value_enum, default_value_t = SplitArg::Test)]
    pub split: SplitArg,
    #[arg(long, default_value_t = VarianceMode::Pooled)]
    pub variance: VarianceMode,
    /// JSON report; a CSV twin is written next to it.
    #[arg(long)]
    pub report: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SelectArgs {
    #[command(flatten)]
    pub input: DataArgs,
    #[arg(long, default_value_t = Strategy::BestSingle)]
    pub strategy: Strategy,
    /// Split whose labels drive the selection.
    #[arg(long, default_value_t = Split::Val)]
    pub val_split: Split,
    /// Dataset with the chosen map written onto every record.
    #[arg(long)]
    pub out: PathBuf,
    /// JSON selection report with per-candidate scores; a CSV twin is written next to it.
    #[arg(long)]
    pub report: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub input: DataArgs,
    #[arg(long)]
    pub seed: u64,
    #[arg(long, default_value_t = 150)]
    pub epochs: usize,
    #[arg(long, default_value_t = 0.5)]
    pub lr: f64,
    /// Weight of the J-Att loss term.
    #[arg(long, default_value_t = 1.0)]
    pub lambda_att: f64,
    #[arg(long, default_value_t = helpz::justifier::DEFAULT_HIDDEN)]
    pub hidden: usize,
    #[arg(long, default_value_t = helpz::justifier::DEFAULT_CONV_CHANNELS)]
    pub conv_channels: usize,
    /// Parameter file to write.
    #[arg(long)]
    pub out: PathBuf,
    /// Per-epoch loss trace (CSV).
    #[arg(long)]
    pub trace: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ErrorMapArgs {
    #[command(flatten)]
    pub input: DataArgs,
    /// Trained justifier parameters.
    #[arg(long)]
    pub params: PathBuf,
    #[arg(long, value_enum, default_value_t = SplitArg::All)]
    pub split: SplitArg,
    #[arg(long, default_value_t = GradCamVariant::ChannelWeighted)]
    pub variant: GradCamVariant,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum HeadsArg {
    /// Only a designated attention map.
    None,
    /// Precomputed per-head maps.
    Maps,
    /// Full attention stacks in a binary sidecar.
    Stack,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long, default_value_t = 400)]
    pub n: usize,
    #[arg(long, default_value_t = AttentionSignal::RelevantWhenCorrect)]
    pub signal: AttentionSignal,
    #[arg(long, default_value_t = ErrorSignal::None)]
    pub error_signal: ErrorSignal,
    #[arg(long, default_value_t = 0.5)]
    pub p_correct: f64,
    #[arg(long, default_value_t = 4)]
    pub channels: usize,
    #[arg(long, default_value_t = 0.0)]
    pub noise: f64,
    /// Fraction of records whose explanations behave like the other class.
    #[arg(long, default_value_t = 0.0)]
    pub flip: f64,
    #[arg(long, default_value_t = HumanLayout::Random)]
    pub human_layout: HumanLayout,
    #[arg(long, value_enum, default_value_t = HeadsArg::None)]
    pub heads: HeadsArg,
    #[arg(long, default_value_t = 4)]
    pub layers: usize,
    #[arg(long, default_value_t = 12)]
    pub heads_per_layer: usize,
    #[arg(long, default_value_t = 115)]
    pub tokens: usize,
    /// Informative head as "layer.head".
    #[arg(long, default_value = "1.2")]
    pub planted: String,
    #[arg(long, default_value_t = 0.5)]
    pub train_fraction: f64,
    #[arg(long, default_value_t = 0.2)]
    pub val_fraction: f64,
    #[arg(long)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    #[command(flatten)]
    pub input: DataArgs,
    #[arg(long, default_value_t = helpz::Mode::Attention)]
    pub mode: helpz::Mode,
    #[arg(long, value_enum, default_value_t = SplitArg::All)]
    pub split: SplitArg,
    /// Attention threshold; the median relevance when omitted.
    #[arg(long, allow_negative_numbers = true)]
    pub user_tau: Option<f64>,
    /// Error / joint threshold; the median relevance when omitted.
    #[arg(long, allow_negative_numbers = true)]
    pub user_tau_err: Option<f64>,
    #[arg(long, default_value_t = 0.1)]
    pub epsilon: f64,
    #[arg(long, default_value_t = 50)]
    pub subsets: usize,
    #[arg(long, default_value_t = 80)]
    pub subset_size: usize,
    #[arg(long, default_value_t = 5)]
    pub bins: usize,
    #[arg(long, default_value_t = 0.1)]
    pub mix_min: f64,
    #[arg(long, default_value_t = 0.9)]
    pub mix_max: f64,
    #[arg(long)]
    pub seed: u64,
    /// JSON validation report; a CSV of the binned curve is written next to it.
    #[arg(long)]
    pub report: Option<PathBuf>,
    /// CSV of per-subset HELP_Z and accuracy.
    #[arg(long)]
    pub points: Option<PathBuf>,
    /// CSV of the relevance vs predicted-correctness curve.
    #[arg(long)]
    pub relevance_curve: Option<PathBuf>,
}

/// Parses `args` (including the program name) and runs the command,
/// writing human-readable output to `out` and errors to `err`.
pub fn run<I, T>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            if e.use_stderr() {
                let _ = write!(err, "{}", e.render());
                return EXIT_USAGE;
            }
            let _ = write!(out, "{}", e.render());
            return EXIT_OK;
        }
    };
    match commands::dispatch(cli.command, out) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            let _ = writeln!(err, "error: {e}");
            e.exit_code()
        }
    }
}
