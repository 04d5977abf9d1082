mod commands;
mod data;

use std::fmt;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use s2dloc::config::RunConfig;

#[derive(Parser, Debug)]
#[command(
    name = "s2dloc",
    version,
    about = "Sparse-to-dense hypercolumn matching for visual localization"
)]
struct Cli {
    /// Worker threads [default: all hardware threads]
    #[arg(long, global = true, value_name = "N")]
    threads: Option<usize>,
    /// `key = value` run configuration; flags take precedence
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic scene directory
    Synth(SynthArgs),
    /// Validate references, fit PCA on their global descriptors and write a database
    BuildDb(BuildDbArgs),
    /// Localize every query in a query list against a database
    Localize(LocalizeArgs),
    /// Recall of a results file against ground-truth poses
    Evaluate(EvaluateArgs),
    /// Time the matching and pose stages on random data
    Bench(BenchArgs),
}

#[derive(Copy, Clone, Debug, ValueEnum)]
enum Background {
    Orthogonal,
    RandomUnit,
}

#[derive(Args, Debug)]
struct SynthArgs {
    /// Output directory
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 200)]
    landmarks: usize,
    #[arg(long, default_value_t = 20)]
    refs: usize,
    #[arg(long, default_value_t = 10)]
    queries: usize,
    /// Side of the landmark cube, meters
    #[arg(long, default_value_t = 10.0)]
    extent: f64,
    #[arg(long, default_value_t = 512)]
    width: u32,
    #[arg(long, default_value_t = 512)]
    height: u32,
    #[arg(long, default_value_t = 400.0)]
    focal: f64,
    /// Image pixels per dense cell
    #[arg(long, default_value_t = 4)]
    stride: u32,
    #[arg(long, default_value_t = 64)]
    channels: usize,
    #[arg(long, default_value_t = 0.0, allow_negative_numbers = true)]
    noise_sigma: f64,
    #[arg(long, default_value_t = 0.0, allow_negative_numbers = true)]
    outlier_fraction: f64,
    #[arg(long, value_enum, default_value_t = Background::Orthogonal)]
    background: Background,
}

fn parse_flag_bool(s: &str) -> Result<bool, String> {
    match s {
        "true" | "1" | "on" | "yes" => Ok(true),
        "false" | "0" | "off" | "no" => Ok(false),
        _ => Err(format!("expected a boolean, got {s:?}")),
    }
}

/// Overrides for every `RunConfig` field.
#[derive(Args, Debug, Default)]
struct ConfigFlags {
    #[arg(long)]
    n_neighbors: Option<usize>,
    #[arg(long, allow_negative_numbers = true)]
    alpha: Option<f64>,
    #[arg(long, allow_negative_numbers = true)]
    fraction: Option<f64>,
    #[arg(long, allow_negative_numbers = true)]
    inlier_threshold_px: Option<f64>,
    #[arg(long)]
    min_inliers: Option<usize>,
    #[arg(long, allow_negative_numbers = true)]
    confidence: Option<f64>,
    #[arg(long)]
    max_iterations: Option<usize>,
    /// RANSAC seed
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, value_parser = parse_flag_bool)]
    refinement: Option<bool>,
    #[arg(long)]
    pca_dim: Option<usize>,
    #[arg(long, value_parser = parse_flag_bool)]
    fallback_retrieval_pose: Option<bool>,
    #[arg(long, value_parser = parse_flag_bool)]
    subpixel: Option<bool>,
}

impl ConfigFlags {
    fn apply(&self, c: &mut RunConfig) {
        macro_rules! set {
            ($($f:ident),*) => {$(
                if let Some(v) = self.$f {
                    c.$f = v;
                }
            )*};
        }
        set!(
            n_neighbors,
            alpha,
            fraction,
            inlier_threshold_px,
            min_inliers,
            confidence,
            max_iterations,
            seed,
            refinement,
            pca_dim,
            fallback_retrieval_pose,
            subpixel
        );
    }
}

#[derive(Args, Debug)]
struct BuildDbArgs {
    /// Reference manifest, e.g. `references.txt` from `synth`
    #[arg(long)]
    manifest: PathBuf,
    /// Output directory
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    flags: ConfigFlags,
}

#[derive(Args, Debug)]
struct LocalizeArgs {
    /// Database manifest written by `build-db` (a plain reference manifest also works)
    #[arg(long)]
    db: PathBuf,
    /// Query list
    #[arg(long)]
    queries: PathBuf,
    /// Results CSV
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    flags: ConfigFlags,
}

#[derive(Args, Debug)]
struct EvaluateArgs {
    #[arg(long)]
    results: PathBuf,
    /// Ground-truth poses, `id qw qx qy qz tx ty tz` per line
    #[arg(long)]
    gt: PathBuf,
    /// Also write the report as JSON
    #[arg(long, value_name = "FILE")]
    json: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct BenchArgs {
    #[arg(long, default_value_t = 128)]
    width: usize,
    #[arg(long, default_value_t = 128)]
    height: usize,
    #[arg(long, default_value_t = 2304)]
    channels: usize,
    #[arg(long, default_value_t = 128)]
    descriptors: usize,
    /// PnP problems (100 correspondences, 40% outliers) to solve
    #[arg(long, default_value_t = 20)]
    pnp_problems: u64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Data(s2dloc::Error),
    NothingLocalized { total: usize },
}

impl CliError {
    fn code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Data(_) => 2,
            CliError::NothingLocalized { .. } => 3,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Usage(m) => write!(f, "{m}"),
            CliError::Data(e) => write!(f, "{e}"),
            CliError::NothingLocalized { total } => write!(f, "none of the {total} queries was localized"),
        }
    }
}

impl From<s2dloc::Error> for CliError {
    fn from(e: s2dloc::Error) -> Self {
        CliError::Data(e)
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Data(e.into())
    }
}

/// Defaults, then the config file, then flags.
fn resolve_config(file: Option<&PathBuf>, flags: &ConfigFlags) -> Result<RunConfig, CliError> {
    let mut c = RunConfig::default();
    if let Some(path) = file {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", path.display())))?;
        c.apply_text(path, &text).map_err(|e| CliError::Usage(e.to_string()))?;
    }
    flags.apply(&mut c);
    c.validate().map_err(|e| CliError::Usage(e.to_string()))?;
    Ok(c)
}

fn run(cli: Cli) -> Result<(), CliError> {
    if let Some(n) = cli.threads {
        if n == 0 {
            return Err(CliError::Usage("--threads must be at least 1".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| CliError::Usage(e.to_string()))?;
    }
    let config = cli.config.as_ref();
    match &cli.command {
        Command::Synth(a) => commands::synth(a, &resolve_config(config, &ConfigFlags::default())?),
        Command::BuildDb(a) => commands::build_db(a, &resolve_config(config, &a.flags)?),
        Command::Localize(a) => commands::localize(a, &resolve_config(config, &a.flags)?),
        Command::Evaluate(a) => commands::evaluate(a),
        Command::Bench(a) => commands::bench(a, &resolve_config(config, &ConfigFlags::default())?),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.code())
        }
    }
}
