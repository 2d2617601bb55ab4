//! `nocbench`: one binary orchestrating the day/night place-recognition
//! pipeline. Machine-readable output is JSON Lines on stdout; every run
//! echoes its fully resolved configuration first, so any result is
//! reproducible from its own log.
//!
//! Exit codes: 0 success, 2 usage error, 3 data error, 4 numeric
//! divergence.

mod ops;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Debug, Parser)]
#[command(name = "nocbench", version, about)]
struct Cli {
    /// Verbosity of JSON event output.
    #[arg(long, global = true, value_enum, default_value_t = LogLevel::Info)]
    log_level: LogLevel,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum LogLevel {
    /// Config echo and final results only.
    Quiet,
    /// Also per-step training events.
    Info,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic places dataset (manifest + images).
    Synth(SynthArgs),
    /// Apply the night-style transform to a dataset.
    GenNight(GenNightArgs),
    /// Train a day model from scratch with the cosine-margin loss.
    Pretrain(PretrainArgs),
    /// Cache day descriptors from a pretrained model, keyed by record id.
    CacheDay(CacheDayArgs),
    /// Fine-tune a night model with the combined margin + inherited
    /// knowledge objective.
    Finetune(FinetuneArgs),
    /// Encode a dataset into a descriptor database.
    BuildDb(BuildDbArgs),
    /// Rank database hits for each query.
    Query(QueryArgs),
    /// recall@N evaluation with the distance criterion.
    Evaluate(EvaluateArgs),
    /// Image-faithfulness metrics (pixel L2, PSNR, SSIM).
    Metrics(MetricsArgs),
    /// Solar elevation and day/twilight/night classification.
    Solar(SolarArgs),
    /// Run the full ablation grid on a synthetic dataset.
    Ablate(AblateArgs),
}

#[derive(Debug, Args)]
struct SynthArgs {
    /// Synth config JSON; defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory (manifest.jsonl + images/).
    #[arg(long)]
    out: PathBuf,
    /// Root seed override; flags win over config values.
    #[arg(long)]
    seed: Option<u64>,
    /// Emit inline procedural image refs instead of PNG files.
    #[arg(long)]
    inline: bool,
}

#[derive(Debug, Args)]
struct GenNightArgs {
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Night transform params JSON; defaults apply when omitted.
    #[arg(long)]
    params: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Debug, Args)]
struct PretrainArgs {
    #[arg(long)]
    manifest: PathBuf,
    /// Train config JSON: {"encoder": {...}, "train": {...}}.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Checkpoint output path (JSON header; tensor blob side-car at
    /// <out>.bin).
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
}

#[derive(Debug, Args)]
struct CacheDayArgs {
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    model: PathBuf,
    /// Descriptor-database output path.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct FinetuneArgs {
    /// Night-style training manifest.
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    pretrained: PathBuf,
    /// Day descriptor cache built by cache-day.
    #[arg(long)]
    cache: PathBuf,
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
}

#[derive(Debug, Args)]
struct BuildDbArgs {
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Worker-count ceiling; 1 guarantees bit-reproducibility (the result
    /// is identical for any value here).
    #[arg(long, default_value_t = 1)]
    threads: usize,
}

#[derive(Debug, Args)]
struct QueryArgs {
    #[arg(long)]
    db: PathBuf,
    #[arg(long)]
    queries: PathBuf,
    /// Day model checkpoint.
    #[arg(long)]
    model: PathBuf,
    /// Night model checkpoint; defaults to the day model.
    #[arg(long)]
    night_model: Option<PathBuf>,
    #[arg(long, default_value_t = 5)]
    k: usize,
    /// Original-database mode: all queries search the day-model database.
    #[arg(long, default_value_t = true, action = clap::ArgAction::Set)]
    od: bool,
    /// Night-model database, required when --od false.
    #[arg(long)]
    night_db: Option<PathBuf>,
    #[arg(long, allow_hyphen_values = true, default_value_t = 0.0)]
    day_elev: f64,
    #[arg(long, allow_hyphen_values = true, default_value_t = -6.0)]
    night_elev: f64,
}

#[derive(Debug, Args)]
struct EvaluateArgs {
    #[arg(long)]
    db: PathBuf,
    /// Manifest the database was built from (ground-truth positions).
    #[arg(long)]
    db_manifest: PathBuf,
    #[arg(long)]
    queries: PathBuf,
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    night_model: Option<PathBuf>,
    /// Comma-separated recall cutoffs.
    #[arg(long, value_delimiter = ',', default_values_t = vec![1, 5, 10])]
    ns: Vec<usize>,
    #[arg(long, default_value_t = 25.0)]
    threshold_m: f64,
    #[arg(long, default_value_t = true, action = clap::ArgAction::Set)]
    od: bool,
    #[arg(long)]
    night_db: Option<PathBuf>,
    /// Also write the report as JSON.
    #[arg(long)]
    json: Option<PathBuf>,
    #[arg(long, allow_hyphen_values = true, default_value_t = 0.0)]
    day_elev: f64,
    #[arg(long, allow_hyphen_values = true, default_value_t = -6.0)]
    night_elev: f64,
}

#[derive(Debug, Args)]
struct MetricsArgs {
    /// First image (pair mode).
    #[arg(long, requires = "b", conflicts_with_all = ["manifest", "against"])]
    a: Option<PathBuf>,
    /// Second image (pair mode).
    #[arg(long)]
    b: Option<PathBuf>,
    /// Reference dataset manifest (dataset mode; pairs records by id).
    #[arg(long, requires = "against")]
    manifest: Option<PathBuf>,
    /// Comparison dataset manifest.
    #[arg(long)]
    against: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct SolarArgs {
    #[arg(long, allow_hyphen_values = true)]
    lat: f64,
    #[arg(long, allow_hyphen_values = true)]
    lon: f64,
    /// UTC timestamp, RFC 3339 (e.g. 2024-03-20T12:07:00Z).
    #[arg(long)]
    utc: String,
    #[arg(long, allow_hyphen_values = true, default_value_t = 0.0)]
    day_elev: f64,
    #[arg(long, allow_hyphen_values = true, default_value_t = -6.0)]
    night_elev: f64,
}

#[derive(Debug, Args)]
struct AblateArgs {
    /// Ablation config JSON; defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Also write the ablation report as JSON.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let quiet = cli.log_level == LogLevel::Quiet;
    let result = match cli.command {
        Command::Synth(args) => ops::synth(args),
        Command::GenNight(args) => ops::gen_night(args),
        Command::Pretrain(args) => ops::pretrain(args, quiet),
        Command::CacheDay(args) => ops::cache_day(args),
        Command::Finetune(args) => ops::finetune(args, quiet),
        Command::BuildDb(args) => ops::build_db(args),
        Command::Query(args) => ops::query(args),
        Command::Evaluate(args) => ops::evaluate(args),
        Command::Metrics(args) => ops::metrics(args),
        Command::Solar(args) => ops::solar(args),
        Command::Ablate(args) => ops::ablate(args),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::from(err.exit_code())
        }
    }
}
