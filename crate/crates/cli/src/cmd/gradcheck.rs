use std::path::PathBuf;

use serde::Serialize;
use uavdet_core::gradcheck::{self, GradientMode};
use uavdet_core::losses::LossConfig;

use crate::output::{resolve_workers, to_json, write_json, Run};
use crate::CliError;

#[derive(Debug, Clone, clap::Args, Serialize)]
pub struct Args {
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 1000, value_parser = clap::value_parser!(u64).range(1..))]
    pub samples: u64,
    /// Weight of the NWD term.
    #[arg(long, default_value_t = 0.5)]
    pub lambda: f64,
    /// NWD normalizing constant.
    #[arg(long, default_value_t = 12.8)]
    pub c_norm: f64,
    /// Also differentiate through the Wise-IoU normalizer.
    #[arg(long)]
    pub full: bool,
    /// Write the report and run config here as well.
    #[arg(long)]
    pub out_dir: Option<PathBuf>,
}

pub fn run(a: Args, workers: Option<usize>) -> Result<(), CliError> {
    let cfg = LossConfig::new(a.lambda, a.c_norm).map_err(|e| CliError::Invalid(e.to_string()))?;
    let workers = resolve_workers(workers, None);
    let mode = if a.full {
        GradientMode::Full
    } else {
        GradientMode::Detached
    };
    let run = a
        .out_dir
        .as_ref()
        .map(|d| Run::start(d, "gradcheck", workers, &a))
        .transpose()?;
    let report = gradcheck::run(a.seed, a.samples as usize, &cfg, mode);
    print!("{}", to_json(&report));
    if let Some(run) = run {
        write_json(&run.path("gradcheck.json"), &report)?;
        run.finish()?;
    }
    if report.passed {
        Ok(())
    } else {
        Err(CliError::Gradcheck {
            max: report.max_rel_error,
            threshold: report.threshold,
        })
    }
}
