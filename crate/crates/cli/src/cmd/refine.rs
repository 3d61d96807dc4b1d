use std::collections::{BTreeMap, BTreeSet};
use std::path::PathBuf;

use serde::Serialize;
use uavdet_core::ingest::{read_detections, to_jsonl, DatasetManifest};
use uavdet_core::postprocess::Detection;
use uavdet_core::refine::{refine_dataset, RefineConfig};

use super::{BackendArgs, ExternalArgs};
use crate::output::{load_config, parse_size, resolve_workers, write_json, write_text, Run};
use crate::CliError;

#[derive(Debug, Clone, clap::Args, Serialize)]
pub struct Args {
    #[arg(long)]
    pub manifest: PathBuf,
    #[command(flatten)]
    pub backend: BackendArgs,
    #[command(flatten)]
    pub external: ExternalArgs,
    /// First-pass detections (JSONL); without it the backend runs the first
    /// pass on whole images.
    #[arg(long)]
    pub initial: Option<PathBuf>,
    /// JSON settings file; flags take precedence.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub out_dir: PathBuf,
    #[arg(long)]
    pub conf_threshold: Option<f64>,
    #[arg(long)]
    pub gate_iou: Option<f64>,
    #[arg(long)]
    pub scale_min: Option<f64>,
    #[arg(long)]
    pub scale_max: Option<f64>,
    #[arg(long)]
    pub crop_pad: Option<f64>,
    /// Backend input size, `WxH`.
    #[arg(long, value_parser = parse_size)]
    pub target_size: Option<[u32; 2]>,
    #[arg(long)]
    pub nms_iou: Option<f64>,
    #[arg(long)]
    pub initial_conf_floor: Option<f64>,
    #[arg(long)]
    pub refine_conf_floor: Option<f64>,
    /// Let detections of different classes suppress each other.
    #[arg(long)]
    pub class_agnostic_nms: bool,
}

impl Args {
    fn refine_config(&self, mut c: RefineConfig) -> RefineConfig {
        let set = |slot: &mut f64, v: Option<f64>| {
            if let Some(v) = v {
                *slot = v;
            }
        };
        set(&mut c.conf_threshold, self.conf_threshold);
        set(&mut c.gate_iou, self.gate_iou);
        set(&mut c.scale_min, self.scale_min);
        set(&mut c.scale_max, self.scale_max);
        set(&mut c.crop_pad, self.crop_pad);
        set(&mut c.nms_iou, self.nms_iou);
        set(&mut c.initial_conf_floor, self.initial_conf_floor);
        set(&mut c.refine_conf_floor, self.refine_conf_floor);
        if let Some(t) = self.target_size {
            c.target_size = t;
        }
        if self.class_agnostic_nms {
            c.class_aware_nms = false;
        }
        c
    }
}

#[derive(Serialize)]
struct Settings<'a> {
    manifest: &'a PathBuf,
    initial: &'a Option<PathBuf>,
    backend: &'a BackendArgs,
    external: &'a ExternalArgs,
    refine: &'a RefineConfig,
}

fn group_initial(
    dets: Vec<Detection>,
    m: &DatasetManifest,
) -> Result<BTreeMap<String, Vec<Detection>>, CliError> {
    let known: BTreeSet<&str> = m.entries.iter().map(|e| e.image_id.as_str()).collect();
    let unknown: BTreeSet<&str> = dets
        .iter()
        .map(|d| d.image_id.as_str())
        .filter(|id| !known.contains(id))
        .collect();
    if !unknown.is_empty() {
        return Err(CliError::Invalid(format!(
            "first-pass detections reference images missing from the manifest: {}",
            unknown.into_iter().collect::<Vec<_>>().join(", ")
        )));
    }
    let mut by_image: BTreeMap<String, Vec<Detection>> = m
        .entries
        .iter()
        .map(|e| (e.image_id.clone(), Vec::new()))
        .collect();
    for d in dets {
        by_image
            .get_mut(&d.image_id)
            .expect("checked above")
            .push(d);
    }
    Ok(by_image)
}

pub fn run(a: Args, workers: Option<usize>) -> Result<(), CliError> {
    let file = load_config(a.config.as_deref())?;
    let workers = resolve_workers(workers, file.workers);
    let cfg = a.refine_config(file.refine);
    cfg.validate()?;
    let manifest = DatasetManifest::load(&a.manifest)?;
    let initial = a
        .initial
        .as_ref()
        .map(|p| {
            read_detections(p)
                .map_err(CliError::from)
                .and_then(|d| group_initial(d, &manifest))
        })
        .transpose()?;
    let backend = a.backend.build(&a.external)?;
    let settings = Settings {
        manifest: &a.manifest,
        initial: &a.initial,
        backend: &a.backend,
        external: &a.external,
        refine: &cfg,
    };
    let run = Run::start(&a.out_dir, "refine", workers, &settings)?;
    let out = refine_dataset(&manifest, initial.as_ref(), backend.as_ref(), &cfg)?;
    write_text(&run.path("initial.jsonl"), &to_jsonl(&out.initial))?;
    write_text(&run.path("detections.jsonl"), &to_jsonl(&out.detections))?;
    write_text(&run.path("trace.jsonl"), &to_jsonl(&out.trace))?;
    write_json(&run.path("summary.json"), &out.summary)?;
    run.finish()?;
    let s = &out.summary;
    println!(
        "images {} (skipped {}), detections {} -> {}, refined {}, replaced {}, gated out {}, backend errors {}",
        s.images, s.images_skipped, s.detections_in, s.detections_out, s.refined, s.replaced, s.gated_out, s.backend_errors
    );
    for sk in &s.skipped {
        log::error!("skipped {}: {}", sk.image_id, sk.reason);
    }
    if s.skipped.iter().any(|sk| sk.backend_failure) {
        Err(CliError::Backend(format!(
            "{} image(s) skipped after backend failures",
            s.images_skipped
        )))
    } else if !s.skipped.is_empty() {
        Err(CliError::Invalid(format!(
            "{} image(s) skipped",
            s.images_skipped
        )))
    } else {
        Ok(())
    }
}
