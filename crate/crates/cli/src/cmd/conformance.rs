use std::sync::Arc;

use uavdet_core::detector::conformance::{self, conformance_model};
use uavdet_core::detector::server::DetectorServer;
use uavdet_core::detector::{ExternalDetector, SyntheticDetector};

use super::ExternalArgs;
use crate::output::to_json;
use crate::CliError;

#[derive(Debug, Clone, clap::Args)]
#[group(id = "target", required = true, multiple = false)]
pub struct Target {
    /// Base URL of the server under test.
    #[arg(long)]
    pub url: Option<String>,
    /// Check the built-in reference server instead.
    #[arg(long)]
    pub reference: bool,
}

#[derive(Debug, Clone, clap::Args)]
pub struct Args {
    #[command(flatten)]
    pub target: Target,
    #[command(flatten)]
    pub external: ExternalArgs,
}

pub fn run(a: Args) -> Result<(), CliError> {
    let cfg = a.external.config()?;
    let mut server = None;
    let url = match &a.target.url {
        Some(u) => u.clone(),
        None => {
            let det = SyntheticDetector::new(conformance_model())?;
            let s = DetectorServer::start(Arc::new(det), "127.0.0.1:0", 2)?;
            let u = s.url();
            server = Some(s);
            u
        }
    };
    let report = conformance::check(&ExternalDetector::new(&url, cfg));
    drop(server);
    print!("{}", to_json(&report));
    if report.passed {
        Ok(())
    } else if report.backend_failed() {
        Err(CliError::Backend(format!(
            "{url}: transport or protocol failure"
        )))
    } else {
        let failed: Vec<&str> = report
            .cases
            .iter()
            .filter(|c| !c.passed)
            .map(|c| c.name.as_str())
            .collect();
        Err(CliError::Invalid(format!(
            "{url}: failed cases {}",
            failed.join(", ")
        )))
    }
}
