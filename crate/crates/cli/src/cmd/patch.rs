use std::path::{Path, PathBuf};

use serde::Serialize;
use uavdet_core::exec;
use uavdet_core::ingest::{
    format_yolo_labels, load_yolo_labels, plan_patches, remap_labels, resolve, DatasetManifest,
    IngestError, ManifestEntry, PatchOrigin, PatchPlan,
};

use crate::output::{resolve_workers, write_text, Run};
use crate::CliError;

#[derive(Debug, Clone, clap::Args, Serialize)]
pub struct Args {
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long)]
    pub patch_w: u32,
    #[arg(long)]
    pub patch_h: u32,
    #[arg(long, default_value_t = 0)]
    pub overlap: u32,
    /// Keep an object in a patch if at least this fraction of it is inside.
    #[arg(long, default_value_t = uavdet_core::ingest::DEFAULT_MIN_VISIBILITY)]
    pub min_visibility: f64,
    #[arg(long)]
    pub out_dir: PathBuf,
}

pub fn patch_id(parent: &str, k: usize) -> String {
    format!("{parent}_p{k:03}")
}

type Patched = Vec<(ManifestEntry, Option<String>)>;

fn patch_entry(
    e: &ManifestEntry,
    base: &Path,
    m: &DatasetManifest,
    plan: &PatchPlan,
) -> Result<Patched, IngestError> {
    if e.patch.is_some() {
        return Err(IngestError::Manifest(format!(
            "{} is already a patch",
            e.image_id
        )));
    }
    let windows = plan_patches(e.width, e.height, plan)?;
    let per_window = match &e.label_path {
        Some(l) => {
            let objs = load_yolo_labels(
                &resolve(base, l),
                &e.image_id,
                e.width,
                e.height,
                &m.class_names,
            )?;
            Some(remap_labels(&objs, &windows, plan.min_visibility))
        }
        None => None,
    };
    Ok(windows
        .iter()
        .enumerate()
        .map(|(k, w)| {
            let id = patch_id(&e.image_id, k);
            let labels = per_window
                .as_ref()
                .map(|p| format_yolo_labels(&p[k], w.width(), w.height()));
            let entry = ManifestEntry {
                label_path: labels.as_ref().map(|_| format!("labels/{id}.txt")),
                image_id: id,
                image_path: e.image_path.clone(),
                width: w.width(),
                height: w.height(),
                patch: Some(PatchOrigin {
                    parent_id: e.image_id.clone(),
                    parent_width: e.width,
                    parent_height: e.height,
                    window: [w.x0, w.y0, w.x1, w.y1],
                }),
            };
            (entry, labels)
        })
        .collect())
}

pub fn run(a: Args, workers: Option<usize>) -> Result<(), CliError> {
    let workers = resolve_workers(workers, None);
    let plan = PatchPlan {
        patch_w: a.patch_w,
        patch_h: a.patch_h,
        overlap: a.overlap,
        min_visibility: a.min_visibility,
    };
    plan.validate()?;
    let m = DatasetManifest::load(&a.manifest)?;
    let base = a.manifest.parent().unwrap_or(Path::new("."));
    let run = Run::start(&a.out_dir, "patch", workers, &a)?;
    let per_image = exec::map(&m.entries, |e| patch_entry(e, base, &m, &plan));
    let labels_dir = a.out_dir.join("labels");
    crate::output::create_dir(&labels_dir)?;
    let mut entries = Vec::new();
    for r in per_image {
        for (entry, labels) in r? {
            if let Some(text) = labels {
                write_text(&labels_dir.join(format!("{}.txt", entry.image_id)), &text)?;
            }
            entries.push(entry);
        }
    }
    println!("{} images -> {} patches", m.entries.len(), entries.len());
    let out = DatasetManifest {
        class_names: m.class_names,
        entries,
        patch_plan: Some(plan),
    };
    out.save(&run.path("manifest.json"))?;
    run.finish()
}
