use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use rankcert::calibrate::ALPHA_GRID;
use rankcert::ScoreKind;

#[derive(Debug, Parser)]
#[command(name = "rankcert", version, about = "Conformal reliability certificates for sampled answers")]
pub struct Cli {
    /// Run seed; every random choice derives from it.
    #[arg(long, global = true, default_value_t = 0)]
    pub seed: u64,

    /// Output directory for JSON, CSV and JSONL artifacts.
    #[arg(long, global = true, default_value = "out")]
    pub out: PathBuf,

    /// Comma-separated miscoverage levels reported per run.
    #[arg(long, global = true, value_delimiter = ',', default_values_t = ALPHA_GRID.to_vec())]
    pub alpha_grid: Vec<f64>,

    /// Nonconformity score: rank, cumprob, lac or aps.
    #[arg(long, global = true, default_value = "rank", value_parser = parse_score)]
    pub score: ScoreKind,

    /// Name of the environment variable holding the HTTP backend bearer token.
    #[arg(long, global = true)]
    pub auth_env: Option<String>,

    #[command(subcommand)]
    pub command: Command,
}

fn parse_score(s: &str) -> Result<ScoreKind, String> {
    s.parse().map_err(|e: rankcert::Error| e.to_string())
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Calibrate on a dataset split and write certificate.json and coverage.json.
    Certify(CertifyArgs),
    /// Score held-out items against an existing certificate.
    Evaluate(EvaluateArgs),
    /// Mode error and coverage for each K, reusing sample prefixes.
    SweepK(SweepArgs),
    /// Sample until the stopping rule certifies the mode, then calibrate.
    Sequential(SequentialArgs),
    /// Run one synthetic validation experiment.
    Synthetic(SyntheticArgs),
    /// Merge coverage.json files into one comparison table.
    Report(ReportArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum BackendArg {
    Synthetic,
    Http,
}

#[derive(Debug, Args)]
pub struct SourceArgs {
    /// JSONL dataset. Required for the http backend; synthetic runs generate one when absent.
    #[arg(long)]
    pub dataset: Option<PathBuf>,

    /// Sampling backend.
    #[arg(long, value_enum, default_value_t = BackendArg::Synthetic)]
    pub backend: BackendArg,

    /// HTTP endpoint receiving one POST per sample.
    #[arg(long)]
    pub endpoint: Option<String>,

    /// JSON request body with {query}, {temperature} and {model} placeholders.
    #[arg(long, conflicts_with = "template_file")]
    pub template: Option<String>,

    /// File containing the request template.
    #[arg(long)]
    pub template_file: Option<PathBuf>,

    /// JSON pointer to the answer text in each response.
    #[arg(long, default_value = "/text")]
    pub response_pointer: String,

    /// Model identifier sent to the backend and recorded in the cache key.
    #[arg(long, default_value = "synthetic-agent")]
    pub model: String,

    /// Sampling temperature.
    #[arg(long, default_value_t = 0.7)]
    pub temperature: f64,

    /// Attempts per sample before the item is marked failed.
    #[arg(long, default_value_t = 5)]
    pub max_attempts: u32,

    /// Response cache directory (default: <out>/cache).
    #[arg(long)]
    pub cache: Option<PathBuf>,

    /// Bypass the response cache.
    #[arg(long)]
    pub no_cache: bool,

    /// Minimum fraction of items that must complete.
    #[arg(long, default_value_t = 0.9)]
    pub min_success: f64,

    /// Synthetic backend accuracy for items without their own p_star.
    #[arg(long, default_value_t = 0.7)]
    pub p_star: f64,

    /// Synthetic backend relative weights of the wrong answers.
    #[arg(long, value_delimiter = ',', default_values_t = vec![1.0, 1.0, 1.0])]
    pub wrong_weights: Vec<f64>,

    /// Calibration items (synthetic default 200; a dataset defaults to a 50/50 split).
    #[arg(long)]
    pub n_cal: Option<usize>,

    /// Test items (synthetic default 500).
    #[arg(long)]
    pub n_test: Option<usize>,

    /// Generated synthetic data only: this many calibration items always
    /// answer correctly and the rest never do.
    #[arg(long)]
    pub cal_correct: Option<usize>,
}

#[derive(Debug, Args)]
pub struct CertifyArgs {
    #[command(flatten)]
    pub source: SourceArgs,

    /// Samples per item.
    #[arg(long, short = 'k', default_value_t = 10)]
    pub k: usize,

    /// Miscoverage level of the certificate.
    #[arg(long, default_value_t = 0.1)]
    pub alpha: f64,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    #[command(flatten)]
    pub source: SourceArgs,

    /// certificate.json from a previous certify run.
    #[arg(long)]
    pub certificate: PathBuf,
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    #[command(flatten)]
    pub source: SourceArgs,

    /// Comma-separated sample counts.
    #[arg(long, value_delimiter = ',', default_values_t = vec![1, 2, 5, 10, 20])]
    pub ks: Vec<usize>,

    /// Miscoverage level used for the coverage column.
    #[arg(long, default_value_t = 0.1)]
    pub alpha: f64,
}

#[derive(Debug, Args)]
pub struct SequentialArgs {
    #[command(flatten)]
    pub source: SourceArgs,

    /// Failure probability of the stopping rule.
    #[arg(long, default_value_t = 0.05)]
    pub delta: f64,

    /// Minimum samples before the rule is checked.
    #[arg(long, default_value_t = 3)]
    pub k0: usize,

    /// Sample budget per item.
    #[arg(long, default_value_t = 20)]
    pub k_max: usize,

    /// Miscoverage level of the certificate.
    #[arg(long, default_value_t = 0.1)]
    pub alpha: f64,
}

#[derive(Debug, Args)]
pub struct SyntheticArgs {
    /// Experiment: coverage, variance, biasvar, setsize, entropy or canon.
    pub experiment: String,

    /// Replications (coverage, biasvar) or runs (setsize).
    #[arg(long)]
    pub reps: Option<usize>,

    /// Monte Carlo trials per point (variance, canon, biasvar).
    #[arg(long)]
    pub trials: Option<usize>,

    /// Samples per item (coverage, biasvar, setsize, entropy).
    #[arg(long, short = 'k')]
    pub k: Option<usize>,
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    /// coverage.json files to merge.
    #[arg(required = true)]
    pub inputs: Vec<PathBuf>,

    /// Comma-separated row labels (default: input paths).
    #[arg(long, value_delimiter = ',')]
    pub labels: Option<Vec<String>>,
}
