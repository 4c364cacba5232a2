//! `adicurb` command line: synthetic scenes, ADI generation, batch
//! annotation, post-processing, evaluation and latency benchmarks.
//!
//! Exit codes: 0 success, 1 partial (frames skipped without `--strict`),
//! 2 usage or I/O error.

pub mod commands;
pub mod config;
pub mod report;

use std::ffi::OsString;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

pub use config::PipelineConfig;

#[derive(Debug, Parser)]
#[command(name = "adicurb", version, about = "Annotation-free curb detection pipeline")]
pub struct Cli {
    #[command(flatten)]
    pub global: GlobalArgs,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct GlobalArgs {
    /// Pipeline config (TOML). Defaults to $ADICURB_CONFIG, then built-ins.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Override a config value, e.g. `--set annotator.adi.radius=3`.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    pub overrides: Vec<String>,
    /// Worker threads for frame-parallel commands (0 = logical cores).
    #[arg(long, default_value_t = 0, global = true)]
    pub jobs: usize,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write synthetic KITTI-format frames with ground truth.
    Synth(SynthArgs),
    /// Altitude difference images for one cloud or a directory of clouds.
    Adi(AdiArgs),
    /// Automatic curb labels and paired ADIs for a dataset.
    Annotate(AnnotateArgs),
    /// Perspective masks to BEV curves.
    Postprocess(PostprocessArgs),
    /// Tolerance-based precision / recall / F1 of BEV masks.
    Eval(EvalArgs),
    /// Pre- and post-processing latency.
    Bench(BenchArgs),
    /// Print the effective config as TOML with its hash.
    Config,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    /// Scene spec (TOML); defaults to the `synth` config section.
    #[arg(long)]
    pub spec: Option<PathBuf>,
    #[arg(long, short)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 1)]
    pub frames: u64,
    /// Use the evaluation suite (alternating straight and curved roads)
    /// instead of consecutive seeds of one spec.
    #[arg(long)]
    pub suite: bool,
}

#[derive(Debug, Args)]
pub struct AdiArgs {
    /// A `.bin` cloud, a directory of them, or a dataset root with `velodyne/`.
    #[arg(long, short)]
    pub input: PathBuf,
    /// Calibration file; defaults to the dataset's `calib/ID.txt` or `calib.txt`.
    #[arg(long)]
    pub calib: Option<PathBuf>,
    #[arg(long, short)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct AnnotateArgs {
    /// Dataset root with `velodyne/` and calibration.
    #[arg(long, short)]
    pub dataset: PathBuf,
    #[arg(long, short)]
    pub out: PathBuf,
    /// Fail on the first unreadable frame instead of skipping it.
    #[arg(long)]
    pub strict: bool,
}

#[derive(Debug, Args)]
pub struct PostprocessArgs {
    /// Directory of perspective-view mask PNGs.
    #[arg(long, short)]
    pub masks: PathBuf,
    /// Calibration file, or a dataset root for per-frame lookup.
    #[arg(long)]
    pub calib: PathBuf,
    #[arg(long, short)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Directory of predicted BEV mask PNGs.
    #[arg(long)]
    pub pred: PathBuf,
    /// Directory of ground-truth BEV mask PNGs.
    #[arg(long)]
    pub gt: PathBuf,
    #[arg(long, short)]
    pub out: PathBuf,
    /// Treat a missing ground-truth frame as an error.
    #[arg(long)]
    pub strict: bool,
}

#[derive(Debug, Args)]
pub struct BenchArgs {
    /// Dataset root; the first frame (or `--frame`) is timed. Without it a
    /// synthetic frame is generated.
    #[arg(long)]
    pub dataset: Option<PathBuf>,
    #[arg(long)]
    pub frame: Option<String>,
    /// Scene spec (TOML) for the synthetic frame.
    #[arg(long)]
    pub spec: Option<PathBuf>,
    #[arg(long)]
    pub iterations: Option<usize>,
    #[arg(long)]
    pub warmup: Option<usize>,
    /// Directory for `bench.json` and `run.json`.
    #[arg(long, short)]
    pub out: Option<PathBuf>,
}

/// Successful command results.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Outcome {
    Success,
    /// Some frames were skipped.
    Partial,
}

impl Outcome {
    pub fn exit_code(self) -> i32 {
        match self {
            Outcome::Success => 0,
            Outcome::Partial => 1,
        }
    }
}

pub fn execute(cli: Cli) -> anyhow::Result<Outcome> {
    let cfg = PipelineConfig::load(cli.global.config.as_deref(), &cli.global.overrides)?;
    let pool = rayon::ThreadPoolBuilder::new().num_threads(cli.global.jobs).build()?;
    pool.install(|| match &cli.command {
        Command::Synth(a) => commands::cmd_synth(&cfg, a),
        Command::Adi(a) => commands::cmd_adi(&cfg, a),
        Command::Annotate(a) => commands::cmd_annotate(&cfg, a),
        Command::Postprocess(a) => commands::cmd_postprocess(&cfg, a),
        Command::Eval(a) => commands::cmd_eval(&cfg, a),
        Command::Bench(a) => commands::cmd_bench(&cfg, a),
        Command::Config => {
            print!("# hash {}\n{}", cfg.hash(), cfg.to_toml_string()?);
            Ok(Outcome::Success)
        }
    })
}

/// Parse `args` (including the program name) and run; returns the exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    match execute(cli) {
        Ok(outcome) => outcome.exit_code(),
        Err(e) => {
            eprintln!("error: {e:#}");
            2
        }
    }
}
