//! `cmaev` command-line interface.

mod config;
mod run;

use std::ffi::OsString;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

pub use config::{parse as parse_config, render as render_config, resolve as resolve_config};

/// Exit status for failures during a run.
pub const EXIT_FAILURE: i32 = 1;
/// Exit status for unusable arguments or configuration.
pub const EXIT_USAGE: i32 = 2;

#[derive(Debug, Parser)]
#[command(name = "cmaev", version, about = "Contrastive masked video autoencoder at desk scale")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic moving-sprite dataset.
    GenData(GenDataArgs),
    /// Self-supervised pretraining.
    Pretrain(PretrainArgs),
    /// Supervised finetuning of a pretrained (or fresh) encoder.
    Finetune(FinetuneArgs),
    /// Multi-view top-1 evaluation of a finetuned checkpoint.
    Eval(EvalArgs),
    /// Gradient and invariant checks.
    Selfcheck,
}

#[derive(Debug, Clone, Args)]
pub struct Common {
    /// Configuration file of `key = value` lines.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Output directory (default: $CMAEV_OUT/<subcommand>).
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Override any configuration key.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct GenDataArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long)]
    pub num_videos: Option<usize>,
    #[arg(long)]
    pub num_classes: Option<usize>,
    #[arg(long)]
    pub t_total: Option<usize>,
    #[arg(long)]
    pub noise_level: Option<f64>,
    /// File name of the dataset inside the output directory.
    #[arg(long)]
    pub file: Option<String>,
}

#[derive(Debug, Args)]
pub struct PretrainArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Continue from a checkpoint written by an earlier run.
    #[arg(long)]
    pub resume: Option<PathBuf>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub base_lr: Option<f64>,
    #[arg(long)]
    pub lambda_c: Option<f64>,
    #[arg(long)]
    pub lambda_r: Option<f64>,
    #[arg(long)]
    pub tau: Option<f64>,
    #[arg(long)]
    pub mask_ratio: Option<f64>,
    #[arg(long)]
    pub checkpoint_every: Option<usize>,
    /// f32 or f64.
    #[arg(long)]
    pub precision: Option<String>,
}

#[derive(Debug, Args)]
pub struct FinetuneArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Pretrained checkpoint; omit to train from scratch.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub base_lr: Option<f64>,
    #[arg(long)]
    pub repeated_samples: Option<usize>,
    /// Train only the classifier head.
    #[arg(long)]
    pub linear_probe: bool,
    #[arg(long)]
    pub precision: Option<String>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Temporal × spatial views, e.g. `2x3`.
    #[arg(long)]
    pub views: Option<String>,
    #[arg(long)]
    pub precision: Option<String>,
}

/// Parses `"<temporal>x<spatial>"`.
pub fn parse_views(s: &str) -> Result<(usize, usize), String> {
    let (t, sp) = s
        .split_once(['x', 'X', '×'])
        .ok_or_else(|| format!("views must look like 2x3, got {s:?}"))?;
    let t: usize = t.trim().parse().map_err(|_| format!("bad temporal view count in {s:?}"))?;
    let sp: usize = sp.trim().parse().map_err(|_| format!("bad spatial view count in {s:?}"))?;
    if t == 0 || sp == 0 {
        return Err(format!("view counts must be at least 1, got {s:?}"));
    }
    Ok((t, sp))
}

/// Runs one subcommand and returns the process exit status.
pub fn run<I, S>(argv: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { 0 };
        }
    };
    match run::dispatch(cli.command) {
        Ok(code) => code,
        Err(run::Failure::Usage(e)) => {
            eprintln!("error: {e:#}\n\nRun `cmaev --help` for usage.");
            EXIT_USAGE
        }
        Err(run::Failure::Run(e)) => {
            eprintln!("error: {e:#}");
            EXIT_FAILURE
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn views_parse() {
        assert_eq!(parse_views("2x3"), Ok((2, 3)));
        assert_eq!(parse_views("5×3"), Ok((5, 3)));
        assert!(parse_views("0x3").is_err());
        assert!(parse_views("23").is_err());
    }
}
