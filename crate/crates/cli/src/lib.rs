//! Command-line experiments for attribank: continual training runs,
//! cross-dataset runs, gradient checks, ablation sweeps and report merging.
//!
//! Exit codes: 0 success, 1 configuration error, 2 data error, 3 numeric
//! failure. Diagnostics go to standard error.

use std::ffi::OsString;
use std::io::Write;
use std::path::PathBuf;

use clap::builder::{PossibleValuesParser, TypedValueParser};
use clap::{Args, Parser, Subcommand, ValueEnum};

use attribank::trainer::Mode;

pub mod cdcl;
pub mod config;
pub mod error;
pub mod fixtures;
pub mod gradcheck;
pub mod manifest;
pub mod report;
pub mod sweep;
pub mod table;
pub mod train;

pub use error::CliError;

#[derive(Debug, Parser)]
#[command(name = "attribank", version, about = "Rehearsal-free continual learning with an attribute bank")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train on a task stream and record the accuracy matrix.
    Train(TrainArgs),
    /// Cross-dataset protocol: scratch and sequential runs for every mode.
    Cdcl(CdclArgs),
    /// Compare analytic gradients with central differences.
    Gradcheck(GradcheckArgs),
    /// One training run per value of a hyperparameter.
    Sweep(SweepArgs),
    /// Merge run directories into one table.
    Report(ReportArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Format {
    Csv,
    Json,
}

fn mode_parser() -> impl clap::builder::TypedValueParser<Value = Mode> {
    PossibleValuesParser::new(["attriclip", "shared_prompt", "zero_shot"])
        .map(|s| s.parse::<Mode>().expect("listed mode"))
}

#[derive(Debug, Clone, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, value_parser = mode_parser())]
    pub mode: Option<Mode>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Continue from a checkpoint written by an earlier run.
    #[arg(long)]
    pub resume: Option<PathBuf>,
    /// Printed summary format (default: text).
    #[arg(long, value_enum)]
    pub format: Option<Format>,
}

#[derive(Debug, Clone, Args)]
pub struct CdclArgs {
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Run one mode instead of all three.
    #[arg(long, value_parser = mode_parser())]
    pub mode: Option<Mode>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long, value_enum)]
    pub format: Option<Format>,
}

#[derive(Debug, Clone, Args)]
pub struct GradcheckArgs {
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Bank size.
    #[arg(long, default_value_t = 4)]
    pub n: usize,
    /// Prompt length.
    #[arg(long, default_value_t = 3)]
    pub m: usize,
    /// Embedding width.
    #[arg(long, default_value_t = 16)]
    pub d: usize,
    /// Number of classes.
    #[arg(long, default_value_t = 3)]
    pub k: usize,
    #[arg(long, default_value_t = 2)]
    pub batch: usize,
    #[arg(long, value_enum)]
    pub format: Option<Format>,
    /// Negative control: damage the analytic key gradient before comparing.
    #[arg(long, hide = true)]
    pub corrupt_gradient: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Axis {
    #[value(name = "M", alias = "m")]
    M,
    #[value(name = "N", alias = "n")]
    N,
    #[value(name = "C", alias = "c")]
    C,
    #[value(name = "lambda_k")]
    LambdaK,
    #[value(name = "lambda_p")]
    LambdaP,
    #[value(name = "distance")]
    Distance,
}

impl Axis {
    pub fn name(self) -> &'static str {
        match self {
            Axis::M => "M",
            Axis::N => "N",
            Axis::C => "C",
            Axis::LambdaK => "lambda_k",
            Axis::LambdaP => "lambda_p",
            Axis::Distance => "distance",
        }
    }
}

#[derive(Debug, Clone, Args)]
pub struct SweepArgs {
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long, value_enum)]
    pub axis: Axis,
    /// Comma-separated values.
    #[arg(long, value_delimiter = ',', num_args = 1.., required = true)]
    pub values: Vec<String>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, value_parser = mode_parser())]
    pub mode: Option<Mode>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long, value_enum)]
    pub format: Option<Format>,
}

#[derive(Debug, Clone, Args)]
pub struct ReportArgs {
    /// Run directories written by train, cdcl or sweep.
    pub runs: Vec<PathBuf>,
    /// Recompute FT/BT from the bundled transcribed tables.
    #[arg(long)]
    pub fixtures: bool,
    /// Also write report.csv and report.txt here.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long, value_enum)]
    pub format: Option<Format>,
}

/// Parse `args` and run; returns the process exit code.
pub fn run_from_args<I, T>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let text = e.render().to_string();
            let _ = if code == 0 { write!(out, "{text}") } else { write!(err, "{text}") };
            return code;
        }
    };
    match dispatch(cli.command, out, err) {
        Ok(()) => 0,
        Err(e) => {
            let _ = writeln!(err, "error: {e}");
            e.exit_code()
        }
    }
}

pub fn dispatch(command: Command, out: &mut dyn Write, err: &mut dyn Write) -> Result<(), CliError> {
    match command {
        Command::Train(a) => train::cmd_train(&a, out),
        Command::Cdcl(a) => cdcl::cmd_cdcl(&a, out),
        Command::Gradcheck(a) => gradcheck::cmd_gradcheck(&a, out),
        Command::Sweep(a) => sweep::cmd_sweep(&a, out, err),
        Command::Report(a) => report::cmd_report(&a, out, err),
    }
}

pub(crate) fn emit(out: &mut dyn Write, text: &str) -> Result<(), CliError> {
    out.write_all(text.as_bytes())
        .map_err(|e| CliError::Data(format!("standard output: {e}")))
}
