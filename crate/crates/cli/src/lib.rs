//! The `uavdet` command line.

pub mod cmd;
pub mod output;

use std::path::PathBuf;

use clap::{Parser, Subcommand};
use thiserror::Error;
use uavdet_core::detector::DetectorError;
use uavdet_core::ingest::IngestError;
use uavdet_core::metrics::MetricsError;
use uavdet_core::refine::RefineError;

#[derive(Debug, Parser)]
#[command(name = "uavdet", version, about = "Small-object detection toolkit")]
pub struct Cli {
    /// Worker threads; 0 uses every available core.
    #[arg(long, global = true)]
    pub workers: Option<usize>,
    /// More log output; repeat for more.
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    pub verbose: u8,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Compare analytic loss gradients with finite differences.
    Gradcheck(cmd::gradcheck::Args),
    /// Tile a dataset into patches and remap its labels.
    Patch(cmd::patch::Args),
    /// Run two-stage refinement over a dataset.
    Refine(cmd::refine::Args),
    /// Score detections against ground truth.
    Eval(cmd::eval::Args),
    /// Write SVG overlays of ground truth and detections.
    Render(cmd::render::Args),
    /// Check a detector server against canned request/response pairs.
    DetectorConformance(cmd::conformance::Args),
    /// Serve a detector over HTTP.
    Serve(cmd::serve::Args),
    /// Generate a synthetic scene suite with labels and a manifest.
    SynthSuite(cmd::suite::Args),
    /// Scale-sequence fusion forward pass.
    #[command(subcommand)]
    Ssff(cmd::kernels::SsffCommand),
    /// Learnable-sampling convolution forward pass.
    #[command(subcommand)]
    Ldconv(cmd::kernels::LdconvCommand),
}

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Invalid(String),
    #[error(transparent)]
    Ingest(#[from] IngestError),
    #[error(transparent)]
    Refine(#[from] RefineError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error(transparent)]
    Detector(#[from] DetectorError),
    #[error("gradient check failed: max relative error {max:e} exceeds {threshold:e}")]
    Gradcheck { max: f64, threshold: f64 },
    #[error("{0}")]
    Backend(String),
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
}

impl CliError {
    /// 1 for bad input, 2 for a failed gradient check, 3 for backend and
    /// transport failures.
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Gradcheck { .. } => 2,
            CliError::Backend(_) => 3,
            CliError::Detector(e) if e.is_backend_failure() => 3,
            _ => 1,
        }
    }
}

pub fn run(cli: Cli) -> Result<(), CliError> {
    let workers = cli.workers;
    match cli.command {
        Command::Gradcheck(a) => cmd::gradcheck::run(a, workers),
        Command::Patch(a) => cmd::patch::run(a, workers),
        Command::Refine(a) => cmd::refine::run(a, workers),
        Command::Eval(a) => cmd::eval::run(a, workers),
        Command::Render(a) => cmd::render::run(a),
        Command::DetectorConformance(a) => cmd::conformance::run(a),
        Command::Serve(a) => cmd::serve::run(a),
        Command::SynthSuite(a) => cmd::suite::run(a),
        Command::Ssff(c) => cmd::kernels::run_ssff(c, workers),
        Command::Ldconv(c) => cmd::kernels::run_ldconv(c, workers),
    }
}
