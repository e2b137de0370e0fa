//! `soft` command-line front end: argument parsing, configuration layering,
//! exit-code mapping and the subcommand implementations.

use std::path::{Path, PathBuf};

use anyhow::{anyhow, Context};
use clap::{Args, Parser, Subcommand};
use soft_core::config::PipelineConfig;
use soft_core::Error;

mod embed;
mod eval;
mod fixture;
mod segment;

pub const EXIT_OK: u8 = 0;
pub const EXIT_USAGE: u8 = 1;
pub const EXIT_DATA: u8 = 2;
pub const EXIT_NUMERICAL: u8 = 3;

#[derive(Debug, Parser)]
#[command(name = "soft", version, about = "Object-centric embeddings from vision-transformer traces")]
pub struct Cli {
    #[command(flatten)]
    pub global: GlobalArgs,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct GlobalArgs {
    /// Flat `key = value` configuration file.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Top-level seed; overrides the config file.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Worker threads for per-image work (0 = all cores).
    #[arg(long, global = true, default_value_t = 1)]
    pub jobs: usize,
    /// Output directory (or file, for single-output commands).
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Configuration override `key=value`; repeatable, wins over the file.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Segment traces into pixel masks, overlays and per-image records.
    Segment(segment::SegmentArgs),
    /// Pool per-frame slots into a JSONL file.
    Embed(embed::EmbedArgs),
    /// Bind demonstration slots to a fixed reference order.
    Bind(embed::BindArgs),
    /// Train the behavior-cloning policy on bound slots.
    TrainPolicy(embed::TrainArgs),
    /// Score predicted PGM masks against ground truth.
    EvalSeg(eval::EvalArgs),
    /// Write synthetic traces or demonstrations with ground truth.
    MakeFixture(fixture::FixtureArgs),
    /// Overlay a PGM mask on a trace's frame.
    Viz(eval::VizArgs),
}

impl GlobalArgs {
    /// Defaults, then the config file, then `--seed` and `--set` overrides.
    pub fn pipeline_config(&self) -> soft_core::Result<PipelineConfig> {
        let mut config = match &self.config {
            Some(path) => PipelineConfig::load(path)?,
            None => PipelineConfig::default(),
        };
        for item in &self.overrides {
            let (k, v) =
                item.split_once('=').ok_or_else(|| Error::Config(format!("override {item:?} is not key=value")))?;
            config.set(k.trim(), v)?;
        }
        if let Some(seed) = self.seed {
            config.set("seed", &seed.to_string())?;
        }
        config.validate()?;
        Ok(config)
    }

    pub fn out_dir(&self) -> anyhow::Result<&Path> {
        self.out.as_deref().ok_or_else(|| Error::InvalidArgument("--out is required".into()).into())
    }
}

/// Sorted paths matching `pattern`; an empty match is a data error.
pub fn expand_glob(pattern: &str) -> anyhow::Result<Vec<PathBuf>> {
    let mut paths = glob::glob(pattern)
        .map_err(|e| Error::InvalidArgument(format!("bad glob {pattern:?}: {e}")))?
        .collect::<Result<Vec<_>, _>>()
        .context("reading glob matches")?;
    paths.sort();
    if paths.is_empty() {
        return Err(Error::Invalid(format!("no inputs match {pattern:?}")).into());
    }
    Ok(paths)
}

pub fn file_stem(path: &Path) -> String {
    path.file_stem().and_then(|s| s.to_str()).unwrap_or("input").to_string()
}

pub fn thread_pool(jobs: usize) -> anyhow::Result<rayon::ThreadPool> {
    rayon::ThreadPoolBuilder::new().num_threads(jobs).build().map_err(|e| anyhow!("thread pool: {e}"))
}

/// Usage for bad arguments and configuration, numerical for solver failures,
/// data otherwise.
pub fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if let Some(e) = cause.downcast_ref::<Error>() {
            if e.is_numerical() {
                return EXIT_NUMERICAL;
            }
            if matches!(e, Error::Config(_) | Error::InvalidArgument(_) | Error::UnknownFixture(_)) {
                return EXIT_USAGE;
            }
            return EXIT_DATA;
        }
    }
    EXIT_DATA
}

pub fn run(cli: Cli) -> anyhow::Result<()> {
    let config = cli.global.pipeline_config()?;
    match &cli.command {
        Command::Segment(args) => segment::run(args, &cli.global, &config),
        Command::Embed(args) => embed::run_embed(args, &cli.global, &config),
        Command::Bind(args) => embed::run_bind(args, &cli.global, &config),
        Command::TrainPolicy(args) => embed::run_train(args, &cli.global, &config),
        Command::EvalSeg(args) => eval::run_eval(args, &cli.global),
        Command::MakeFixture(args) => fixture::run(args, &cli.global, &config),
        Command::Viz(args) => eval::run_viz(args, &cli.global),
    }
}

/// Parses `args`, runs the command and returns the process exit code.
pub fn main_with_args<I, T>(args: I) -> u8
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    match run(cli) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e:#}");
            exit_code(&e)
        }
    }
}
