use std::path::PathBuf;
use std::sync::Arc;

use uavdet_core::detector::conformance::conformance_model;
use uavdet_core::detector::server::DetectorServer;
use uavdet_core::detector::{Detector, FixtureDetector, SyntheticDetector, SyntheticSceneModel};

use crate::CliError;

#[derive(Debug, Clone, clap::Args)]
#[group(id = "model", required = true, multiple = false)]
pub struct Model {
    /// Synthetic scene model (JSON).
    #[arg(long)]
    pub synthetic: Option<PathBuf>,
    /// Recorded responses (JSON).
    #[arg(long)]
    pub fixture: Option<PathBuf>,
    /// The scene the conformance cases were recorded on.
    #[arg(long)]
    pub conformance: bool,
}

#[derive(Debug, Clone, clap::Args)]
pub struct Args {
    #[command(flatten)]
    pub model: Model,
    #[arg(long, default_value = "127.0.0.1:8080")]
    pub addr: String,
    /// Request-handling threads.
    #[arg(long, default_value_t = 4)]
    pub threads: usize,
}

pub fn run(a: Args) -> Result<(), CliError> {
    let det: Arc<dyn Detector> = match (&a.model.synthetic, &a.model.fixture) {
        (Some(p), _) => Arc::new(SyntheticDetector::new(SyntheticSceneModel::load(p)?)?),
        (_, Some(p)) => Arc::new(FixtureDetector::load(p)?),
        _ => Arc::new(SyntheticDetector::new(conformance_model())?),
    };
    let server = DetectorServer::start(det, &a.addr, a.threads)?;
    println!("listening on {}/detect", server.url());
    server.join();
    Ok(())
}
