use std::path::PathBuf;

use uavdet_core::detector::synthetic::{suite_files, SuiteSpec};

use crate::output::{create_dir, read_json, write_json, write_text};
use crate::CliError;

pub const MANIFEST_FILE: &str = "manifest.json";
pub const MODEL_FILE: &str = "scene_model.json";
pub const SPEC_FILE: &str = "suite_spec.json";

#[derive(Debug, Clone, clap::Args)]
pub struct Args {
    #[arg(long)]
    pub out_dir: PathBuf,
    /// Suite shape (JSON); defaults to the built-in 20-image suite.
    #[arg(long)]
    pub spec: Option<PathBuf>,
    /// Overrides the seed in the suite file.
    #[arg(long)]
    pub seed: Option<u64>,
}

/// Writes manifest, scene model, spec and labels into `dir`.
pub fn write_suite(dir: &std::path::Path, spec: &SuiteSpec) -> Result<(), CliError> {
    let files = suite_files(spec);
    create_dir(&dir.join("labels"))?;
    for (rel, text) in &files.labels {
        write_text(&dir.join(rel), text)?;
    }
    files.manifest.save(&dir.join(MANIFEST_FILE))?;
    files.model.save(&dir.join(MODEL_FILE))?;
    write_json(&dir.join(SPEC_FILE), spec)
}

pub fn run(a: Args) -> Result<(), CliError> {
    let mut spec: SuiteSpec = match &a.spec {
        Some(p) => read_json(p)?,
        None => SuiteSpec::default(),
    };
    if let Some(s) = a.seed {
        spec.seed = s;
    }
    write_suite(&a.out_dir, &spec)?;
    println!("wrote {} images to {}", spec.n_images, a.out_dir.display());
    Ok(())
}
