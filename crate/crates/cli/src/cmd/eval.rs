use std::path::{Path, PathBuf};

use serde::Serialize;
use uavdet_core::ingest::{load_ground_truth, read_detections, DatasetManifest};
use uavdet_core::metrics::{evaluate, render_table, ApMethod, EvalConfig, EvalResult};

use crate::output::{load_config, resolve_workers, write_json, write_text, Run};
use crate::CliError;

#[derive(Debug, Clone, Copy, clap::ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum ApMethodArg {
    Point101,
    AllPoint,
}

#[derive(Debug, Clone, clap::Args, Serialize)]
pub struct Args {
    /// Manifest whose entries carry label files.
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long)]
    pub detections: PathBuf,
    /// A second detection file to compare against the first.
    #[arg(long)]
    pub compare: Option<PathBuf>,
    /// Row names for the table; defaults to the file stems.
    #[arg(long, value_delimiter = ',')]
    pub names: Option<Vec<String>>,
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub out_dir: PathBuf,
    /// Detections below this score do not count toward precision and recall.
    #[arg(long)]
    pub score_cut: Option<f64>,
    #[arg(long, value_enum)]
    pub ap_method: Option<ApMethodArg>,
    /// IoU thresholds, comma separated; must include 0.5.
    #[arg(long, value_delimiter = ',')]
    pub iou_thresholds: Option<Vec<f64>>,
}

#[derive(Serialize)]
struct NamedResult<'a> {
    name: &'a str,
    detections: &'a Path,
    result: &'a EvalResult,
}

#[derive(Serialize)]
struct Settings<'a> {
    manifest: &'a PathBuf,
    detections: Vec<&'a Path>,
    names: &'a [String],
    eval: &'a EvalConfig,
}

fn stem(p: &Path) -> String {
    p.file_stem().map_or_else(
        || p.display().to_string(),
        |s| s.to_string_lossy().into_owned(),
    )
}

pub fn run(a: Args, workers: Option<usize>) -> Result<(), CliError> {
    let file = load_config(a.config.as_deref())?;
    let workers = resolve_workers(workers, file.workers);
    let mut cfg = file.eval;
    if let Some(s) = a.score_cut {
        cfg.score_cut = s;
    }
    if let Some(m) = a.ap_method {
        cfg.ap_method = match m {
            ApMethodArg::Point101 => ApMethod::Point101,
            ApMethodArg::AllPoint => ApMethod::AllPoint,
        };
    }
    if let Some(t) = &a.iou_thresholds {
        cfg.iou_thresholds = t.clone();
    }
    cfg.validate()?;

    let manifest = DatasetManifest::load(&a.manifest)?;
    let unlabelled: Vec<&str> = manifest
        .entries
        .iter()
        .filter(|e| e.label_path.is_none())
        .map(|e| e.image_id.as_str())
        .collect();
    if !unlabelled.is_empty() {
        return Err(CliError::Invalid(format!(
            "entries without labels: {}",
            unlabelled.join(", ")
        )));
    }
    let base = a.manifest.parent().unwrap_or(Path::new("."));
    let gts = load_ground_truth(&manifest, base)?;
    let ids = manifest.image_ids();

    let files: Vec<&Path> = std::iter::once(a.detections.as_path())
        .chain(a.compare.as_deref())
        .collect();
    let names: Vec<String> = match &a.names {
        Some(n) if n.len() == files.len() => n.clone(),
        Some(n) => {
            return Err(CliError::Invalid(format!(
                "{} names for {} detection files",
                n.len(),
                files.len()
            )));
        }
        None => files.iter().map(|p| stem(p)).collect(),
    };
    let settings = Settings {
        manifest: &a.manifest,
        detections: files.clone(),
        names: &names,
        eval: &cfg,
    };
    let mut results = Vec::with_capacity(files.len());
    for f in &files {
        let dets = read_detections(f)?;
        results.push(evaluate(&dets, &gts, &ids, &cfg)?);
    }
    let run = Run::start(&a.out_dir, "eval", workers, &settings)?;
    let named: Vec<NamedResult> = names
        .iter()
        .zip(&files)
        .zip(&results)
        .map(|((name, f), r)| NamedResult {
            name,
            detections: f,
            result: r,
        })
        .collect();
    write_json(&run.path("eval.json"), &named)?;
    let rows: Vec<(&str, &EvalResult)> = names.iter().map(String::as_str).zip(&results).collect();
    let table = render_table(&rows);
    write_text(&run.path("table.txt"), &table)?;
    print!("{table}");
    run.finish()
}
