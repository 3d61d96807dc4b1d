pub mod conformance;
pub mod eval;
pub mod gradcheck;
pub mod kernels;
pub mod patch;
pub mod refine;
pub mod render;
pub mod serve;
pub mod suite;

use std::sync::Arc;

use std::path::PathBuf;
use std::time::Duration;
use uavdet_core::detector::external::ExternalConfig;
use uavdet_core::detector::{
    Detector, ExternalDetector, FixtureDetector, SyntheticDetector, SyntheticSceneModel,
};

use crate::CliError;

/// Exactly one detector backend.
#[derive(Debug, Clone, clap::Args, serde::Serialize)]
#[group(required = true, multiple = false)]
pub struct BackendArgs {
    /// Synthetic scene model (JSON).
    #[arg(long, value_name = "MODEL")]
    pub synthetic: Option<PathBuf>,
    /// Recorded responses (JSON).
    #[arg(long, value_name = "FILE")]
    pub fixture: Option<PathBuf>,
    /// Base URL of a detector server.
    #[arg(long, value_name = "URL")]
    pub external: Option<String>,
}

#[derive(Debug, Clone, clap::Args, serde::Serialize)]
pub struct ExternalArgs {
    /// Per-request timeout for external backends, in seconds.
    #[arg(long, default_value_t = 10.0)]
    pub timeout_secs: f64,
    /// Retries after a failed external request.
    #[arg(long, default_value_t = 2)]
    pub retries: u32,
}

impl ExternalArgs {
    pub fn config(&self) -> Result<ExternalConfig, CliError> {
        if !(self.timeout_secs > 0.0 && self.timeout_secs.is_finite()) {
            return Err(CliError::Invalid(format!(
                "timeout {} must be positive",
                self.timeout_secs
            )));
        }
        Ok(ExternalConfig {
            timeout: Duration::from_secs_f64(self.timeout_secs),
            retries: self.retries,
            ..ExternalConfig::default()
        })
    }
}

impl BackendArgs {
    pub fn build(&self, ext: &ExternalArgs) -> Result<Arc<dyn Detector>, CliError> {
        if let Some(p) = &self.synthetic {
            Ok(Arc::new(SyntheticDetector::new(
                SyntheticSceneModel::load(p)?,
            )?))
        } else if let Some(p) = &self.fixture {
            Ok(Arc::new(FixtureDetector::load(p)?))
        } else if let Some(url) = &self.external {
            Ok(Arc::new(ExternalDetector::new(url, ext.config()?)))
        } else {
            Err(CliError::Invalid("no backend given".into()))
        }
    }
}
