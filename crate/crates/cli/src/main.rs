//! `gengrade`: sample, train, parse, grade and serve from one binary.
//!
//! Exit codes: 0 success, 2 usage, 3 bad input data, 4 internal failure.
//! Errors go to stderr as one JSON object.

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use gengrade_core::Exec;

#[derive(Parser)]
#[command(name = "gengrade", version, about = "Generative grading of student solutions")]
pub struct Cli {
    /// Seed for every random choice.
    #[arg(long, global = true, env = "GENGRADE_SEED", default_value_t = 0)]
    pub seed: u64,
    /// Log progress to stderr.
    #[arg(long, short, global = true)]
    pub verbose: bool,
    /// Run data-parallel work on one thread.
    #[arg(long, global = true)]
    pub sequential: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand)]
pub enum Command {
    /// Draw a dataset from a grammar.
    Sample(SampleArgs),
    /// Diversity analytics of a dataset.
    Analyze(AnalyzeArgs),
    /// Dataset statistics and Zipf partitions.
    #[command(subcommand)]
    Dataset(DatasetCommand),
    /// Train an inference model.
    Train(TrainArgs),
    /// Infer decision traces for solutions.
    Parse(ParseArgs),
    /// Nearest dataset neighbours by token edit distance.
    Knn(KnnArgs),
    /// Labels, neighbour, diff and highlights for each solution.
    Feedback(ModelInput),
    /// Rank decision nodes by how often solutions disagree with them.
    Diagnose(ModelInput),
    /// Label accuracy and F1 by frequency region.
    Eval(EvalArgs),
    /// Run the grading service.
    Serve(ServeArgs),
    /// Static checks of a grammar.
    Validate(GrammarArg),
}

#[derive(Args)]
pub struct GrammarArg {
    #[arg(long)]
    pub grammar: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
pub enum Policy {
    Iid,
    Uniform,
    Adaptive,
}

#[derive(Args)]
pub struct SampleArgs {
    #[arg(long)]
    pub grammar: PathBuf,
    #[arg(long, value_enum, default_value = "iid")]
    pub policy: Policy,
    /// Adaptive penalty rate.
    #[arg(long, default_value_t = 0.001)]
    pub r: f64,
    /// Adaptive depth decay.
    #[arg(long, default_value_t = 0.95)]
    pub d: f64,
    #[arg(short, long)]
    pub n: usize,
    /// Output file; stdout if absent.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args)]
pub struct AnalyzeArgs {
    pub dataset: PathBuf,
    /// Write uniqueness, Good-Turing and Zipf series here as CSV.
    #[arg(long)]
    pub curves: Option<PathBuf>,
    /// Grammar for per-window mean trace probability.
    #[arg(long)]
    pub grammar: Option<PathBuf>,
    #[arg(long, default_value_t = 1000)]
    pub window: usize,
}

#[derive(Subcommand)]
pub enum DatasetCommand {
    Stats { dataset: PathBuf },
    Partition {
        dataset: PathBuf,
        /// Head size.
        #[arg(long, default_value_t = 10)]
        k: usize,
    },
}

#[derive(Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub grammar: PathBuf,
    #[arg(long)]
    pub dataset: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 256)]
    pub hidden: usize,
    #[arg(long, default_value_t = 32)]
    pub embed: usize,
    #[arg(long, default_value_t = 4)]
    pub layers: usize,
    #[arg(long, default_value_t = 20)]
    pub epochs: usize,
    #[arg(long, default_value_t = 64)]
    pub batch: usize,
    #[arg(long, default_value_t = 5e-4)]
    pub lr: f64,
    #[arg(long, default_value_t = 1e-7)]
    pub wd: f64,
}

#[derive(Clone, Copy, ValueEnum)]
pub enum Mode {
    Greedy,
    Beam,
    Sample,
}

#[derive(Args)]
pub struct ModelInput {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub grammar: PathBuf,
    /// Solutions separated by `---` lines, or `.ndjson`.
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args)]
pub struct ParseArgs {
    #[command(flatten)]
    pub io: ModelInput,
    #[arg(long, value_enum, default_value = "greedy")]
    pub mode: Mode,
    #[arg(long, default_value_t = 10)]
    pub beam_width: usize,
}

#[derive(Args)]
pub struct KnnArgs {
    #[arg(long)]
    pub dataset: PathBuf,
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long, default_value_t = 1)]
    pub k: usize,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub grammar: PathBuf,
    /// NDJSON of `{"text", "labels"}`.
    #[arg(long)]
    pub gold: PathBuf,
    /// Zipf head size.
    #[arg(long, default_value_t = 10)]
    pub k: usize,
    /// Dataset for the nearest-neighbour baseline.
    #[arg(long)]
    pub dataset: Option<PathBuf>,
    /// Simulated held-out records for the exact-reconstruction rate.
    #[arg(long)]
    pub heldout: Option<PathBuf>,
}

#[derive(Args)]
pub struct ServeArgs {
    #[arg(long, default_value_t = 8080)]
    pub port: u16,
    #[arg(long, default_value = "127.0.0.1")]
    pub host: String,
    /// Needed for assisted sessions.
    #[arg(long, requires = "grammar")]
    pub model: Option<PathBuf>,
    #[arg(long)]
    pub grammar: Option<PathBuf>,
    /// Item source files; each is named by its file stem.
    #[arg(long, required = true)]
    pub items: Vec<PathBuf>,
    #[arg(long, default_value = "gengrade-sessions")]
    pub data_dir: PathBuf,
    #[arg(long)]
    pub gold: Option<PathBuf>,
    /// Allowed CORS origin; any if absent.
    #[arg(long)]
    pub cors_origin: Option<String>,
}

pub enum Failure {
    Data(String),
    Internal(String),
}

impl Failure {
    fn parts(&self) -> (&'static str, &str, u8) {
        match self {
            Failure::Data(m) => ("data", m, 3),
            Failure::Internal(m) => ("internal", m, 4),
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = if cli.verbose { "info" } else { "warn" };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    let exec = if cli.sequential { Exec::Sequential } else { Exec::default() };
    match commands::run(cli.command, cli.seed, exec) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            let (kind, message, code) = f.parts();
            eprintln!("{}", serde_json::json!({ "error": kind, "message": message }));
            ExitCode::from(code)
        }
    }
}
