//! Operator-facing commands. Exit codes: 0 success, 2 configuration or
//! input error, 3 numerical failure, 4 internal invariant violation.

pub mod args;
pub mod commands;

use std::fs;

use cfn_core::config::RunConfig;
use cfn_core::gradcheck::report_csv;
use cfn_core::losseval::{EvalMode, EvalReport};
use cfn_core::CfnError;

use crate::args::{Cli, Command, Common, ModeArg, SplitArg};
pub use crate::commands::*;

pub const EXIT_OK: i32 = 0;
pub const EXIT_INPUT: i32 = 2;
pub const EXIT_NUMERIC: i32 = 3;
pub const EXIT_INVARIANT: i32 = 4;

pub fn exit_code(e: &CfnError) -> i32 {
    match e {
        CfnError::NonFinite(_) | CfnError::Grid(_) => EXIT_NUMERIC,
        CfnError::Invariant(_) | CfnError::Tensor(_) => EXIT_INVARIANT,
        _ => EXIT_INPUT,
    }
}

#[derive(Debug)]
pub struct Failure {
    pub code: i32,
    pub message: String,
}

impl From<CfnError> for Failure {
    fn from(e: CfnError) -> Self {
        Self {
            code: exit_code(&e),
            message: e.to_string(),
        }
    }
}

/// Builds the run configuration from the shared flags.
pub fn resolve_config(common: &Common) -> Result<RunConfig, CfnError> {
    let text = match &common.config {
        Some(p) => Some(fs::read_to_string(p).map_err(|e| CfnError::io(p.display().to_string(), e))?),
        None => None,
    };
    let mut overrides = Vec::new();
    for kv in &common.overrides {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| CfnError::Config(format!("--set expects KEY=VALUE, got {kv:?}")))?;
        overrides.push((k.trim().to_string(), v.trim().to_string()));
    }
    if let Some(s) = common.seed {
        overrides.push(("seed".into(), s.to_string()));
    }
    if let Some(t) = common.threads {
        overrides.push(("threads".into(), t.to_string()));
    }
    if let Some(o) = &common.out {
        overrides.push(("paths.out".into(), o.display().to_string()));
    }
    RunConfig::resolve(text.as_deref(), common.preset.as_deref(), &overrides)
}

fn modes(arg: Option<ModeArg>, cfg: &RunConfig) -> Vec<EvalMode> {
    match arg {
        None => cfg.eval_modes.clone(),
        Some(ModeArg::All) => vec![EvalMode::AllFrames, EvalMode::Sampled25],
        Some(ModeArg::AllFrames) => vec![EvalMode::AllFrames],
        Some(ModeArg::Sampled25) => vec![EvalMode::Sampled25],
    }
}

fn split_name(s: SplitArg) -> &'static str {
    match s {
        SplitArg::Train => "train",
        SplitArg::Val => "val",
    }
}

pub fn dispatch(cli: Cli) -> Result<(), Failure> {
    if let Command::Gradcheck { seeds } = cli.command {
        let reports = cmd_gradcheck(seeds, Vec::new())?;
        print!("{}", report_csv(&reports));
        let failed: Vec<&str> = reports.iter().filter(|r| !r.passed()).map(|r| r.name).collect();
        if !failed.is_empty() {
            return Err(Failure {
                code: EXIT_NUMERIC,
                message: format!("gradient check failed for {}", failed.join(", ")),
            });
        }
        return Ok(());
    }
    let mut cfg = resolve_config(&cli.common)?;
    match cli.command {
        Command::Generate => {
            if let Some(out) = &cli.common.out {
                cfg.data_dir = out.clone();
            }
            cmd_generate(&cfg)?;
        }
        Command::Train { checkpoint, overfit } => {
            let outcome = cmd_train(&cfg, checkpoint.as_deref(), overfit)?;
            if let Some(last) = outcome.overfit.last() {
                println!("overfit: first loss {:.6}, last loss {last:.6}", outcome.overfit[0]);
            }
            if let Some(rec) = outcome.records.last() {
                println!("{}", metrics_line(rec));
            }
        }
        Command::Eval { checkpoint, mode, split } => {
            let reports = cmd_eval(&cfg, &checkpoint, &modes(mode, &cfg), split_name(split))?;
            println!("{}", EvalReport::csv_header());
            for r in &reports {
                print!("{}", r.csv_rows());
            }
        }
        Command::InspectGrid {
            checkpoint,
            clip,
            split,
            offset,
        } => {
            print!(
                "{}",
                cmd_inspect_grid(&cfg, checkpoint.as_deref(), split_name(split), &clip, offset)?
            );
        }
        Command::Gradcheck { .. } => unreachable!("handled above"),
    }
    Ok(())
}

fn metrics_line(rec: &cfn_core::train::EpochRecord) -> String {
    format!(
        "epoch {} train loss {:.6} val mAP {}",
        rec.epoch,
        rec.train_loss,
        rec.val_map.map_or("-".into(), |m| format!("{m:.4}"))
    )
}

/// Runs a parsed command line and returns the process exit code.
pub fn run(cli: Cli) -> i32 {
    match dispatch(cli) {
        Ok(()) => EXIT_OK,
        Err(f) => {
            eprintln!("error: {}", f.message);
            f.code
        }
    }
}
