use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Debug, Parser)]
#[command(name = "cfn", version, about = "Coarse-fine temporal activity detection")]
pub struct Cli {
    #[command(flatten)]
    pub common: Common,
    #[command(subcommand)]
    pub command: Command,
}

impl Cli {
    /// Parses `argv`, keeping every `--set` in command-line order wherever it appears.
    pub fn parse_args<I, T>(argv: I) -> Self
    where
        I: IntoIterator<Item = T>,
        T: Into<std::ffi::OsString> + Clone,
    {
        let argv: Vec<std::ffi::OsString> = argv.into_iter().map(Into::into).collect();
        let mut cli = Self::parse_from(&argv);
        cli.common.overrides = collect_sets(&argv);
        cli
    }
}

fn collect_sets(argv: &[std::ffi::OsString]) -> Vec<String> {
    let mut out = Vec::new();
    let mut args = argv.iter().skip(1).map(|a| a.to_string_lossy());
    while let Some(a) = args.next() {
        if a == "--" {
            break;
        } else if a == "--set" {
            out.extend(args.next().map(|v| v.into_owned()));
        } else if let Some(v) = a.strip_prefix("--set=") {
            out.push(v.to_string());
        }
    }
    out
}

#[derive(Debug, Clone, Default, Args)]
pub struct Common {
    /// Key/value configuration file.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Named configuration preset, applied before the file's keys.
    #[arg(long, global = true)]
    pub preset: Option<String>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    /// Output directory (dataset directory for `generate`).
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Extra `key=value` setting; repeatable, applied last.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    pub overrides: Vec<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ModeArg {
    All,
    AllFrames,
    #[value(name = "sampled-25")]
    Sampled25,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum SplitArg {
    Train,
    Val,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write synthetic train/val splits and a manifest.
    Generate,
    /// Train a model; writes a checkpoint and a metrics CSV.
    Train {
        /// Resume from this checkpoint directory.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Repeat steps on a single batch instead of training epochs.
        #[arg(long, value_name = "STEPS")]
        overfit: Option<usize>,
    },
    /// Score a checkpoint on a split.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, value_enum)]
        mode: Option<ModeArg>,
        #[arg(long, value_enum, default_value = "val")]
        split: SplitArg,
    },
    /// Finite-difference check of every differentiable operator.
    Gradcheck {
        #[arg(long, default_value_t = 10)]
        seeds: usize,
    },
    /// Dump a clip's sampling grid and fusion centres as CSV.
    InspectGrid {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        clip: String,
        #[arg(long, value_enum, default_value = "val")]
        split: SplitArg,
        /// Start of the coarse segment, in strided frames.
        #[arg(long, default_value_t = 0)]
        offset: usize,
    },
}
