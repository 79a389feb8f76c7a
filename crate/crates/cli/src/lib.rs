//! The `rankforge` command line: parse, score, evaluate, sample, build SFT
//! data and run the policy-gradient simulator over JSONL files.

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use thiserror::Error;

pub mod commands;
pub mod config;
pub mod io;
pub mod selftest;

/// A failed invocation. Usage faults exit 2, data faults exit 1.
#[derive(Debug, Error)]
pub enum Fault {
    #[error("{0}")]
    Usage(String),
    #[error("{message}")]
    Data { message: String, records: Vec<String> },
}

impl Fault {
    pub fn data(message: impl Into<String>) -> Self {
        Fault::Data { message: message.into(), records: Vec::new() }
    }

    pub fn records(message: impl Into<String>, records: Vec<String>) -> Self {
        Fault::Data { message: message.into(), records }
    }

    pub fn exit_code(&self) -> i32 {
        match self {
            Fault::Usage(_) => 2,
            Fault::Data { .. } => 1,
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "rankforge", version, about = "Reranker reward, evaluation and data tooling", args_override_self = true)]
pub struct RunConfig {
    #[command(flatten)]
    pub global: GlobalArgs,

    /// Run the built-in worked examples and exit.
    #[arg(long)]
    pub self_test: bool,

    #[command(subcommand)]
    pub command: Option<Command>,
}

#[derive(Debug, Clone, Args)]
pub struct GlobalArgs {
    /// TOML file mirroring the command-line flags.
    #[arg(long, global = true, value_name = "FILE")]
    pub config: Option<PathBuf>,

    #[arg(long, global = true, default_value = "warn", value_name = "LEVEL")]
    pub log_level: log::LevelFilter,

    /// Log malformed input lines and continue instead of aborting.
    #[arg(long, global = true)]
    pub skip_bad_lines: bool,

    /// Directory that relative output paths are resolved against.
    #[arg(long, global = true, value_name = "DIR")]
    pub out_dir: Option<PathBuf>,

    #[arg(long, global = true, default_value_t = 0)]
    pub seed: u64,

    /// Weight of the result reward in the composite total.
    #[arg(long, global = true, default_value_t = 1.0)]
    pub w_result: f64,

    /// Weight of the format reward in the composite total.
    #[arg(long, global = true, default_value_t = 1.0)]
    pub w_format: f64,
}

impl GlobalArgs {
    pub fn out_path(&self, p: &Path) -> PathBuf {
        match &self.out_dir {
            Some(dir) if p.is_relative() => dir.join(p),
            _ => p.to_path_buf(),
        }
    }
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Parse raw model outputs into structured responses.
    Parse(ParseArgs),
    /// Score predictions against a dataset.
    Reward(RewardArgs),
    /// Recall@k per subset with macro and micro averages.
    Eval(EvalArgs),
    /// Draw a resolution-balanced subset of a dataset.
    Sample(SampleArgs),
    /// Build supervised fine-tuning records.
    BuildSft(BuildSftArgs),
    /// Run the ranking-policy training simulator.
    TrainSim(TrainSimArgs),
}

#[derive(Debug, Args)]
pub struct ParseArgs {
    /// JSONL of `{"query_id", "raw_output"}`.
    #[arg(long)]
    pub predictions: PathBuf,
    /// Output JSONL, standard output if omitted.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct RewardArgs {
    #[arg(long)]
    pub dataset: PathBuf,
    /// Raw or parsed prediction JSONL.
    #[arg(long)]
    pub predictions: PathBuf,
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Aggregate summary JSON.
    #[arg(long)]
    pub summary: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ReportFormat {
    Table,
    Json,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub dataset: PathBuf,
    #[arg(long)]
    pub predictions: PathBuf,
    /// Cutoffs, comma separated.
    #[arg(long, value_delimiter = ',', default_value = "1,3,5")]
    pub k: Vec<usize>,
    #[arg(long, value_enum, default_value_t = ReportFormat::Table)]
    pub format: ReportFormat,
    /// Run label, defaults to the predictions file stem.
    #[arg(long)]
    pub run_id: Option<String>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SampleArgs {
    #[arg(long)]
    pub dataset: PathBuf,
    #[arg(long, default_value_t = rankforge::sampler::DEFAULT_TOTAL)]
    pub total: usize,
    #[arg(long, default_value_t = rankforge::sampler::DEFAULT_BINS)]
    pub bins: usize,
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Plan JSON with bin boundaries, sizes and allocations.
    #[arg(long)]
    pub plan: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum GeneratorArg {
    Mock,
    Live,
}

#[derive(Debug, Args)]
pub struct BuildSftArgs {
    #[arg(long)]
    pub dataset: PathBuf,
    #[arg(long, value_enum, default_value_t = GeneratorArg::Mock)]
    pub mode: GeneratorArg,
    /// Chat-completion endpoint for live mode.
    #[arg(long)]
    pub endpoint: Option<String>,
    #[arg(long, default_value = "gpt-4o")]
    pub model: String,
    #[arg(long, default_value_t = 60)]
    pub timeout_secs: u64,
    #[arg(long, default_value_t = 2)]
    pub max_retries: u32,
    /// Ask the generator to rewrite each chain for fluency.
    #[arg(long)]
    pub refine: bool,
    /// Samples built in parallel, which bounds in-flight live requests.
    #[arg(long, default_value_t = 4)]
    pub concurrency: usize,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ModeArg {
    Instance,
    Feature,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ShapeArg {
    Cube,
    Flat,
}

#[derive(Debug, Args)]
pub struct TrainSimArgs {
    #[arg(long, value_enum, default_value_t = ModeArg::Instance)]
    pub mode: ModeArg,
    #[arg(long, default_value_t = 8)]
    pub n: usize,
    #[arg(long, default_value_t = 2)]
    pub golden: usize,
    #[arg(long, default_value_t = rankforge::grpo::DEFAULT_GROUP_SIZE)]
    pub group_size: usize,
    #[arg(long, default_value_t = 0.5)]
    pub lr: f64,
    #[arg(long, default_value_t = 500)]
    pub steps: usize,
    #[arg(long, value_enum, default_value_t = ShapeArg::Cube)]
    pub reward: ShapeArg,
    /// Probability that a rollout's text is corrupted.
    #[arg(long, default_value_t = 0.0)]
    pub emit_noise: f64,
    /// Label noise on the informative feature (feature mode).
    #[arg(long, default_value_t = 0.0)]
    pub feature_noise: f64,
    #[arg(long, default_value_t = 1.0)]
    pub temperature: f64,
    #[arg(long, default_value_t = 0.1)]
    pub init_scale: f64,
    #[arg(long, default_value_t = 32)]
    pub eval_instances: usize,
    /// Per-step JSONL log.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Run summary JSON, standard output if omitted.
    #[arg(long)]
    pub summary: Option<PathBuf>,
}

/// Parses `argv` (program name first), runs it and returns the exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString>,
{
    let args: Vec<OsString> = argv.into_iter().map(Into::into).collect();
    let args = match config::expand(args) {
        Ok(a) => a,
        Err(f) => return report(&f),
    };
    let cfg = match RunConfig::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    let _ = env_logger::Builder::new()
        .filter_level(cfg.global.log_level)
        .format_timestamp(None)
        .try_init();

    if cfg.self_test {
        return selftest::run_and_print();
    }
    let Some(command) = &cfg.command else {
        use clap::CommandFactory;
        let _ = RunConfig::command().print_help();
        return 2;
    };
    match commands::dispatch(&cfg.global, command) {
        Ok(()) => 0,
        Err(f) => report(&f),
    }
}

fn report(fault: &Fault) -> i32 {
    match fault {
        Fault::Usage(m) => eprintln!("error: {m}\n\nFor more information, try '--help'."),
        Fault::Data { message, records } => {
            eprintln!("error: {message}");
            for r in records {
                eprintln!("  {r}");
            }
        }
    }
    fault.exit_code()
}
