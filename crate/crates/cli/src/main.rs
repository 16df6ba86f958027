//! `nsp`: reproducible experiments over the nsp-core pipeline.

mod commands;
mod error;
mod output;
mod report;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use error::CliError;

#[derive(Parser)]
#[command(name = "nsp", version, about = "Neural signal processing pipeline experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic trace with labels, or a reach session.
    #[command(subcommand)]
    Gen(GenCommand),
    /// Estimate thresholds and detect spike windows.
    Detect(DetectArgs),
    /// Train one sorter per channel.
    TrainSorter(TrainSorterArgs),
    /// Classify detected windows into sorted events.
    Sort(SortArgs),
    /// Score sorters against ground-truth labels.
    EvalSort(EvalSortArgs),
    /// Train a KF or EOKF decoder on the training trials of a session.
    TrainDecoder(TrainDecoderArgs),
    /// Decode velocities from sorted events or session counts.
    Decode(DecodeArgs),
    /// Run the cycle-level architecture model over a trace.
    Simulate(SimulateArgs),
    /// Per-step operation counts of the filters.
    Bench(BenchArgs),
    /// Collect every artifact of a directory into one report.
    Report(ReportArgs),
}

#[derive(Subcommand)]
pub enum GenCommand {
    Trace(GenTraceArgs),
    Session(GenSessionArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum DifficultyArg {
    Easy,
    Medium,
    Hard,
}

#[derive(Args, Serialize)]
pub struct GenTraceArgs {
    #[arg(long)]
    #[serde(skip)]
    pub out: PathBuf,
    #[arg(long)]
    #[serde(skip)]
    pub labels: PathBuf,
    #[arg(long, default_value_t = 96)]
    pub channels: usize,
    #[arg(long, default_value_t = 3)]
    pub neurons_per_channel: usize,
    #[arg(long, value_enum, default_value_t = DifficultyArg::Medium)]
    pub difficulty: DifficultyArg,
    /// Overrides the difficulty's SNR.
    #[arg(long)]
    pub snr_db: Option<f64>,
    #[arg(long, default_value_t = 10.0)]
    pub rate_hz: f64,
    #[arg(long, default_value_t = 1.0)]
    pub duration_s: f64,
    #[arg(long, default_value_t = 30_000)]
    pub sample_rate: u32,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Args, Serialize)]
pub struct GenSessionArgs {
    #[arg(long)]
    #[serde(skip)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 40)]
    pub neurons: usize,
    #[arg(long, default_value_t = 10)]
    pub trials_per_target: usize,
    #[arg(long, default_value_t = 100)]
    pub bin_ms: u32,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Args, Serialize)]
pub struct DetectArgs {
    #[arg(long)]
    #[serde(skip)]
    pub trace: PathBuf,
    #[arg(long)]
    #[serde(skip)]
    pub out: PathBuf,
    #[arg(long)]
    #[serde(skip)]
    pub thresholds: PathBuf,
    /// Threshold multiplier on the noise estimate.
    #[arg(long, default_value_t = nsp_core::detect::DEFAULT_K)]
    pub k: f64,
    #[arg(long, default_value_t = nsp_core::detect::DEFAULT_PRE_SAMPLES)]
    pub pre: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum SorterModeArg {
    Online,
    Offline,
    L1,
}

#[derive(Args, Serialize)]
pub struct TrainSorterArgs {
    #[arg(long, value_enum)]
    pub mode: SorterModeArg,
    #[arg(long)]
    #[serde(skip)]
    pub windows: PathBuf,
    #[arg(long)]
    #[serde(skip)]
    pub thresholds: PathBuf,
    /// Required for offline and l1.
    #[arg(long)]
    #[serde(skip)]
    pub labels: Option<PathBuf>,
    /// Pick the best sample pair per channel instead of peak/trough.
    #[arg(long)]
    pub sweep_features: bool,
    /// Output directory, one model file per channel.
    #[arg(long)]
    #[serde(skip)]
    pub out: PathBuf,
}

#[derive(Args, Serialize)]
pub struct SortArgs {
    #[arg(long)]
    #[serde(skip)]
    pub models: PathBuf,
    #[arg(long)]
    #[serde(skip)]
    pub windows: PathBuf,
    #[arg(long)]
    #[serde(skip)]
    pub out: PathBuf,
}

#[derive(Args, Serialize)]
pub struct EvalSortArgs {
    #[arg(long)]
    #[serde(skip)]
    pub models: PathBuf,
    #[arg(long)]
    #[serde(skip)]
    pub windows: PathBuf,
    #[arg(long)]
    #[serde(skip)]
    pub labels: PathBuf,
    /// Per-channel accuracy CSV.
    #[arg(long)]
    #[serde(skip)]
    pub out: PathBuf,
    #[arg(long)]
    #[serde(skip)]
    pub confusion: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum FilterArg {
    Kf,
    Eokf,
}

#[derive(Args, Serialize)]
pub struct TrainDecoderArgs {
    #[arg(long)]
    #[serde(skip)]
    pub session: PathBuf,
    #[arg(long, value_enum)]
    pub filter: FilterArg,
    #[arg(long)]
    #[serde(skip)]
    pub out: PathBuf,
    /// Where to record the train/test trial split.
    #[arg(long)]
    #[serde(skip)]
    pub split_out: Option<PathBuf>,
    #[arg(long, default_value_t = 0.8)]
    pub train_fraction: f64,
    #[arg(long, default_value_t = 2)]
    pub state_dim: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitArg {
    Implant,
    Monolithic,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ArithArg {
    Float,
    Fixed,
}

#[derive(Args, Serialize)]
pub struct DecodeArgs {
    #[arg(long)]
    #[serde(skip)]
    pub model: PathBuf,
    /// Sorted events (JSON lines).
    #[arg(long, conflicts_with = "session", required_unless_present = "session")]
    #[serde(skip)]
    pub events: Option<PathBuf>,
    /// Session whose counts are decoded and compared with its velocities.
    #[arg(long)]
    #[serde(skip)]
    pub session: Option<PathBuf>,
    /// Split file from train-decoder; decodes its test trials only.
    #[arg(long, requires = "session")]
    #[serde(skip)]
    pub trials: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = SplitArg::Implant)]
    pub split: SplitArg,
    #[arg(long, value_enum, default_value_t = ArithArg::Float)]
    pub arith: ArithArg,
    #[arg(long, default_value_t = 100)]
    pub bin_ms: u32,
    #[arg(long, default_value_t = 30_000)]
    pub sample_rate: u32,
    /// Seed for placing session counts in time on the implant path;
    /// defaults to the session's seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Decoded CSV `bin,vx,vy`.
    #[arg(long)]
    #[serde(skip)]
    pub out: PathBuf,
    /// Reconstruction metrics; needs --session.
    #[arg(long, requires = "session")]
    #[serde(skip)]
    pub metrics: Option<PathBuf>,
}

#[derive(Args, Serialize)]
pub struct SimulateArgs {
    #[arg(long)]
    #[serde(skip)]
    pub trace: PathBuf,
    #[arg(long)]
    #[serde(skip)]
    pub models: PathBuf,
    /// EOKF decoder model providing the ensemble.
    #[arg(long)]
    #[serde(skip)]
    pub decoder: PathBuf,
    /// Flat TOML mirroring the simulator config; defaults if omitted.
    #[arg(long)]
    #[serde(skip)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    #[serde(skip)]
    pub counters: PathBuf,
    #[arg(long)]
    #[serde(skip)]
    pub decoded: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum BenchFilter {
    Kf,
    Eokf,
    Both,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MethodArg {
    Inverse,
    Substitution,
}

#[derive(Args, Serialize)]
pub struct BenchArgs {
    #[arg(long, value_enum, default_value_t = BenchFilter::Both)]
    pub filter: BenchFilter,
    /// Comma-separated ensemble sizes.
    #[arg(long, value_delimiter = ',', default_value = "20")]
    pub neurons: Vec<usize>,
    #[arg(long, default_value_t = 2)]
    pub state_dim: usize,
    /// How the standard filter handles its innovation covariance.
    #[arg(long, value_enum, default_value_t = MethodArg::Inverse)]
    pub method: MethodArg,
    #[arg(long)]
    #[serde(skip)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Serialize)]
pub struct ReportArgs {
    #[arg(long)]
    #[serde(skip)]
    pub dir: PathBuf,
    /// Base name of the report files inside --dir.
    #[arg(long, default_value = "report")]
    pub name: String,
}

fn init_threads() -> Result<(), CliError> {
    if let Ok(v) = std::env::var("NSP_THREADS") {
        let n: usize = v
            .parse()
            .ok()
            .filter(|&n| n > 0)
            .ok_or_else(|| CliError::Usage(format!("NSP_THREADS={v:?} is not a positive integer")))?;
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| CliError::Usage(e.to_string()))?;
    }
    Ok(())
}

fn run(cli: Cli) -> Result<(), CliError> {
    init_threads()?;
    match cli.command {
        Command::Gen(GenCommand::Trace(a)) => commands::gen_trace(&a),
        Command::Gen(GenCommand::Session(a)) => commands::gen_session(&a),
        Command::Detect(a) => commands::detect(&a),
        Command::TrainSorter(a) => commands::train_sorter(&a),
        Command::Sort(a) => commands::sort(&a),
        Command::EvalSort(a) => commands::eval_sort(&a),
        Command::TrainDecoder(a) => commands::train_decoder(&a),
        Command::Decode(a) => commands::decode(&a),
        Command::Simulate(a) => commands::simulate(&a),
        Command::Bench(a) => commands::bench(&a),
        Command::Report(a) => report::report(&a),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("nsp: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
