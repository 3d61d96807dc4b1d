//! Two-stage refinement. Low-confidence detections are re-detected on a crop
//! whose size follows the ratio between the candidate and the image's
//! highest-scoring detection; a re-detection replaces the candidate only if
//! it scores higher and overlaps it enough.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::detector::{DetectRequest, Detector, DetectorError};
use crate::exec;
use crate::geometry::{iou, window_to_image, BBox, CropWindow};
use crate::ingest::{DatasetManifest, ManifestEntry, PatchOrigin};
use crate::postprocess::{nms, Detection, Source};

#[derive(Debug, Error)]
pub enum RefineError {
    #[error("invalid refine config: {}", .0.join("; "))]
    Config(Vec<String>),
    #[error("no detections to pick a reference from")]
    NoReference,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RefineConfig {
    /// Detections scoring below this are refined.
    pub conf_threshold: f64,
    pub gate_iou: f64,
    pub scale_min: f64,
    pub scale_max: f64,
    /// Relative margin added around the scaled crop.
    pub crop_pad: f64,
    pub target_size: [u32; 2],
    pub nms_iou: f64,
    pub class_aware_nms: bool,
    /// Score floor of the first, whole-image pass.
    pub initial_conf_floor: f64,
    /// Score floor of the second pass on crops.
    pub refine_conf_floor: f64,
}

impl Default for RefineConfig {
    fn default() -> Self {
        Self {
            conf_threshold: 0.5,
            gate_iou: 0.25,
            scale_min: 1.0,
            scale_max: 4.0,
            crop_pad: 0.25,
            target_size: [640, 640],
            nms_iou: 0.5,
            class_aware_nms: true,
            initial_conf_floor: 0.05,
            refine_conf_floor: 0.05,
        }
    }
}

impl RefineConfig {
    pub fn validate(&self) -> Result<(), RefineError> {
        let mut v = Vec::new();
        let unit = |x: f64| (0.0..=1.0).contains(&x);
        if !(self.gate_iou > 0.0 && self.gate_iou < 1.0) {
            v.push(format!("gate_iou {} outside (0, 1)", self.gate_iou));
        }
        if !(self.nms_iou > 0.0 && self.nms_iou < 1.0) {
            v.push(format!("nms_iou {} outside (0, 1)", self.nms_iou));
        }
        if !(1.0 <= self.scale_min
            && self.scale_min <= self.scale_max
            && self.scale_max.is_finite())
        {
            v.push(format!(
                "need 1 <= scale_min ({}) <= scale_max ({})",
                self.scale_min, self.scale_max
            ));
        }
        if !(self.crop_pad >= 0.0 && self.crop_pad.is_finite()) {
            v.push(format!("crop_pad {} must be non-negative", self.crop_pad));
        }
        for (name, x) in [
            ("conf_threshold", self.conf_threshold),
            ("initial_conf_floor", self.initial_conf_floor),
            ("refine_conf_floor", self.refine_conf_floor),
        ] {
            if !unit(x) {
                v.push(format!("{name} {x} outside [0, 1]"));
            }
        }
        if self.target_size.contains(&0) {
            v.push(format!(
                "target_size {:?} must be positive",
                self.target_size
            ));
        }
        if v.is_empty() {
            Ok(())
        } else {
            Err(RefineError::Config(v))
        }
    }
}

/// Index of the highest-scoring detection; ties go to the larger box, then
/// the earlier one.
pub fn select_reference(dets: &[Detection]) -> Option<usize> {
    (0..dets.len()).reduce(|best, i| {
        let (b, d) = (&dets[best], &dets[i]);
        let better = d.score > b.score || (d.score == b.score && d.bbox.area() > b.bbox.area());
        if better {
            i
        } else {
            best
        }
    })
}

/// Zoom factor `clamp(√(reference area / candidate area), scale_min, scale_max)`.
pub fn crop_scale(candidate: &BBox, reference: &BBox, cfg: &RefineConfig) -> f64 {
    (reference.area() / candidate.area())
        .sqrt()
        .clamp(cfg.scale_min, cfg.scale_max)
}

/// Crop around `candidate`, inflated about its center by
/// `crop_scale · (1 + crop_pad)`, rounded outward and clamped to the image.
pub fn adaptive_crop(
    candidate: &BBox,
    reference: &BBox,
    image_w: u32,
    image_h: u32,
    cfg: &RefineConfig,
) -> CropWindow {
    let f = crop_scale(candidate, reference, cfg) * (1.0 + cfg.crop_pad);
    let axis = |c: f64, len: f64, limit: u32| -> (u32, u32) {
        let half = 0.5 * len * f;
        let lim = f64::from(limit);
        let lo = (c - half).floor().clamp(0.0, lim - 1.0);
        let hi = (c + half).ceil().clamp(lo + 1.0, lim);
        (lo as u32, hi as u32)
    };
    let (x0, x1) = axis(candidate.cx(), candidate.w(), image_w);
    let (y0, y1) = axis(candidate.cy(), candidate.h(), image_h);
    CropWindow::new(x0, y0, x1, y1, image_w, image_h).expect("clamped window is valid")
}

/// Runs `backend` on `win` and maps its boxes back to image pixels, tagged
/// with `image_id`.
pub fn detect_in_image<D: Detector + ?Sized>(
    backend: &D,
    image_id: &str,
    image_path: &str,
    win: &CropWindow,
    target: [u32; 2],
    conf_floor: f64,
) -> Result<Vec<Detection>, DetectorError> {
    let req = DetectRequest::for_window(image_path, win, target, conf_floor);
    let sx = f64::from(win.width()) / f64::from(target[0]);
    let sy = f64::from(win.height()) / f64::from(target[1]);
    Ok(backend
        .detect(&req)?
        .into_iter()
        .filter_map(|d| {
            let bbox = window_to_image(&d.bbox, win, sx, sy).ok()?;
            Some(Detection {
                image_id: image_id.to_owned(),
                bbox,
                ..d
            })
        })
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum GateReason {
    Replaced,
    LowIou,
    NotHigherConf,
    BackendError,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Disposition {
    /// At or above the threshold, passed through untouched.
    HighConfidence,
    Replaced,
    KeptOriginal,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatchInfo {
    pub detection: Detection,
    pub iou: f64,
}

/// What happened to one input detection.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub image_id: String,
    /// Position in the image's input list.
    pub index: usize,
    pub initial: Detection,
    pub disposition: Disposition,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub reference: Option<Detection>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub window: Option<[u32; 4]>,
    #[serde(skip_serializing_if = "Vec::is_empty", default)]
    pub returned: Vec<Detection>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub matched: Option<MatchInfo>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub gate: Option<GateReason>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    /// The detection entering the final NMS.
    pub merged: Detection,
    pub kept_after_nms: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ImageOutcome {
    /// After the final NMS, sorted by score.
    pub detections: Vec<Detection>,
    /// Before the final NMS, in input order.
    pub merged: Vec<Detection>,
    pub trace: Vec<TraceRecord>,
    pub backend_calls: usize,
}

/// Best same-class return by IoU with the candidate; ties go to the higher
/// score, then the earlier return.
fn best_match(candidate: &Detection, returned: &[Detection]) -> Option<MatchInfo> {
    let mut best: Option<MatchInfo> = None;
    for r in returned.iter().filter(|r| r.class_id == candidate.class_id) {
        let o = iou(&candidate.bbox, &r.bbox);
        let better = match &best {
            None => true,
            Some(b) => o > b.iou || (o == b.iou && r.score > b.detection.score),
        };
        if better {
            best = Some(MatchInfo {
                detection: r.clone(),
                iou: o,
            });
        }
    }
    best
}

fn gate(candidate: &Detection, m: Option<&MatchInfo>, cfg: &RefineConfig) -> GateReason {
    match m {
        None => GateReason::NotHigherConf,
        Some(m) if m.detection.score <= candidate.score => GateReason::NotHigherConf,
        Some(m) if m.iou < cfg.gate_iou => GateReason::LowIou,
        Some(_) => GateReason::Replaced,
    }
}

/// Refines the first-pass detections `dets` of one image.
pub fn refine_image<D: Detector + ?Sized>(
    image_id: &str,
    image_path: &str,
    image_size: [u32; 2],
    dets: &[Detection],
    backend: &D,
    cfg: &RefineConfig,
) -> ImageOutcome {
    let reference = select_reference(dets).map(|i| dets[i].clone());
    let low: Vec<usize> = (0..dets.len())
        .filter(|&i| dets[i].score < cfg.conf_threshold)
        .collect();
    let refined = exec::map(&low, |&i| {
        let cand = &dets[i];
        let r = reference
            .as_ref()
            .expect("non-empty when a candidate exists");
        let win = adaptive_crop(&cand.bbox, &r.bbox, image_size[0], image_size[1], cfg);
        let result = detect_in_image(
            backend,
            image_id,
            image_path,
            &win,
            cfg.target_size,
            cfg.refine_conf_floor,
        );
        (i, win, result)
    });

    let mut trace: Vec<TraceRecord> = dets
        .iter()
        .enumerate()
        .map(|(i, d)| TraceRecord {
            image_id: image_id.to_owned(),
            index: i,
            initial: d.clone(),
            disposition: Disposition::HighConfidence,
            reference: None,
            window: None,
            returned: Vec::new(),
            matched: None,
            gate: None,
            error: None,
            merged: d.clone(),
            kept_after_nms: false,
        })
        .collect();
    for (i, win, result) in refined {
        let t = &mut trace[i];
        let cand = &dets[i];
        t.reference = reference.clone();
        t.window = Some([win.x0, win.y0, win.x1, win.y1]);
        t.disposition = Disposition::KeptOriginal;
        match result {
            Err(e) => {
                t.gate = Some(GateReason::BackendError);
                t.error = Some(e.to_string());
            }
            Ok(returned) => {
                let m = best_match(cand, &returned);
                let g = gate(cand, m.as_ref(), cfg);
                if g == GateReason::Replaced {
                    let m = m.as_ref().expect("replacement has a match");
                    t.merged = Detection {
                        source: Source::Refined,
                        ..m.detection.clone()
                    };
                    t.disposition = Disposition::Replaced;
                }
                t.gate = Some(g);
                t.matched = m;
                t.returned = returned;
            }
        }
    }
    let merged: Vec<Detection> = trace.iter().map(|t| t.merged.clone()).collect();
    let kept = crate::postprocess::nms_indices(&merged, cfg.nms_iou, cfg.class_aware_nms);
    for &k in &kept {
        trace[k].kept_after_nms = true;
    }
    ImageOutcome {
        detections: kept.iter().map(|&k| merged[k].clone()).collect(),
        merged,
        trace,
        backend_calls: low.len(),
    }
}

/// Checks the pipeline's guarantees on a set of traces; returns every
/// violation found.
pub fn audit(trace: &[TraceRecord], cfg: &RefineConfig) -> Vec<String> {
    let mut v = Vec::new();
    let mut seen: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for t in trace {
        seen.entry(&t.image_id).or_default().push(t.index);
        let at = format!("{}#{}", t.image_id, t.index);
        match t.disposition {
            Disposition::HighConfidence => {
                if t.initial.score < cfg.conf_threshold {
                    v.push(format!("{at}: below threshold but passed through"));
                }
                if t.merged != t.initial {
                    v.push(format!("{at}: high-confidence detection altered"));
                }
            }
            Disposition::Replaced => {
                let Some(m) = &t.matched else {
                    v.push(format!("{at}: replaced without a match"));
                    continue;
                };
                if !(t.merged.score > t.initial.score) {
                    v.push(format!(
                        "{at}: replacement score {} not above {}",
                        t.merged.score, t.initial.score
                    ));
                }
                let o = iou(&t.merged.bbox, &t.initial.bbox);
                if o < cfg.gate_iou || m.iou < cfg.gate_iou {
                    v.push(format!("{at}: replacement IoU {o} below {}", cfg.gate_iou));
                }
                if t.merged.source != Source::Refined || t.merged.class_id != t.initial.class_id {
                    v.push(format!("{at}: replacement has wrong source or class"));
                }
            }
            Disposition::KeptOriginal => {
                if t.merged != t.initial {
                    v.push(format!("{at}: kept candidate altered"));
                }
                if t.gate.is_none() || t.gate == Some(GateReason::Replaced) {
                    v.push(format!("{at}: kept candidate has gate {:?}", t.gate));
                }
            }
        }
    }
    for (image, mut idx) in seen {
        idx.sort_unstable();
        if idx.iter().enumerate().any(|(k, &i)| k != i) {
            v.push(format!(
                "{image}: trace indices are not one record per input"
            ));
        }
    }
    v
}

/// Ten equal-width bins over `[0, 1]`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScoreHistogram {
    pub counts: [u64; 10],
}

impl ScoreHistogram {
    pub fn of<'a>(scores: impl IntoIterator<Item = &'a Detection>) -> Self {
        let mut counts = [0u64; 10];
        for d in scores {
            counts[((d.score * 10.0) as usize).min(9)] += 1;
        }
        Self { counts }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SkippedImage {
    pub image_id: String,
    pub reason: String,
    pub backend_failure: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RefineSummary {
    pub images: usize,
    pub images_skipped: usize,
    pub detections_in: usize,
    pub detections_out: usize,
    pub high_confidence: usize,
    pub refined: usize,
    pub replaced: usize,
    pub gated_out: usize,
    pub gated_low_iou: usize,
    pub gated_not_higher_conf: usize,
    pub backend_errors: usize,
    pub mean_score_replaced_before: Option<f64>,
    pub mean_score_replaced_after: Option<f64>,
    pub histogram_before: ScoreHistogram,
    pub histogram_after: ScoreHistogram,
    pub skipped: Vec<SkippedImage>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetOutcome {
    /// First-pass detections after NMS, i.e. single-stage output.
    pub initial: Vec<Detection>,
    /// Two-stage output.
    pub detections: Vec<Detection>,
    pub trace: Vec<TraceRecord>,
    pub summary: RefineSummary,
}

fn mean(v: &[f64]) -> Option<f64> {
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

/// Presents a patch of a larger image to a backend that only knows the
/// parent image.
struct PatchView<'a, D: ?Sized> {
    inner: &'a D,
    origin: &'a PatchOrigin,
}

impl<D: Detector + ?Sized> Detector for PatchView<'_, D> {
    fn detect(&self, req: &DetectRequest) -> Result<Vec<Detection>, DetectorError> {
        let [ox, oy, ..] = self.origin.window;
        let window = match req.window {
            None => self.origin.window,
            Some([x0, y0, x1, y1]) => [x0 + ox, y0 + oy, x1 + ox, y1 + oy],
        };
        self.inner.detect(&DetectRequest {
            window: Some(window),
            ..req.clone()
        })
    }
}

type EntryOutcome = (Vec<Detection>, Vec<Detection>, ImageOutcome);

fn refine_entry<D: Detector + ?Sized>(
    e: &ManifestEntry,
    initial: Option<&BTreeMap<String, Vec<Detection>>>,
    backend: &D,
    cfg: &RefineConfig,
) -> Result<EntryOutcome, SkippedImage> {
    let first = match initial {
        Some(map) => map.get(&e.image_id).cloned().ok_or_else(|| SkippedImage {
            image_id: e.image_id.clone(),
            reason: "no first-pass detections supplied".into(),
            backend_failure: false,
        }),
        None => {
            let whole = CropWindow::whole(e.width, e.height).expect("validated manifest");
            detect_in_image(
                backend,
                &e.image_id,
                &e.image_path,
                &whole,
                cfg.target_size,
                cfg.initial_conf_floor,
            )
            .map_err(|err| SkippedImage {
                image_id: e.image_id.clone(),
                reason: err.to_string(),
                backend_failure: err.is_backend_failure(),
            })
        }
    }?;
    let single = nms(&first, cfg.nms_iou, cfg.class_aware_nms);
    let out = refine_image(
        &e.image_id,
        &e.image_path,
        [e.width, e.height],
        &first,
        backend,
        cfg,
    );
    Ok((first, single, out))
}

/// First pass (unless `initial` supplies it) and refinement for every image
/// of `manifest`. Output follows manifest order.
pub fn refine_dataset<D: Detector + ?Sized>(
    manifest: &DatasetManifest,
    initial: Option<&BTreeMap<String, Vec<Detection>>>,
    backend: &D,
    cfg: &RefineConfig,
) -> Result<DatasetOutcome, RefineError> {
    cfg.validate()?;
    let per_image = exec::map(&manifest.entries, |e: &ManifestEntry| match &e.patch {
        Some(origin) => refine_entry(
            e,
            initial,
            &PatchView {
                inner: backend,
                origin,
            },
            cfg,
        ),
        None => refine_entry(e, initial, backend, cfg),
    });

    let mut initial_out = Vec::new();
    let mut detections = Vec::new();
    let mut trace = Vec::new();
    let mut skipped = Vec::new();
    let mut inputs = Vec::new();
    for r in per_image {
        match r {
            Ok((first, single, out)) => {
                inputs.extend(first);
                initial_out.extend(single);
                detections.extend(out.detections);
                trace.extend(out.trace);
            }
            Err(s) => skipped.push(s),
        }
    }
    let count = |g: GateReason| trace.iter().filter(|t| t.gate == Some(g)).count();
    let replaced: Vec<&TraceRecord> = trace
        .iter()
        .filter(|t| t.disposition == Disposition::Replaced)
        .collect();
    let before: Vec<f64> = replaced.iter().map(|t| t.initial.score).collect();
    let after: Vec<f64> = replaced.iter().map(|t| t.merged.score).collect();
    let summary = RefineSummary {
        images: manifest.entries.len() - skipped.len(),
        images_skipped: skipped.len(),
        detections_in: trace.len(),
        detections_out: detections.len(),
        high_confidence: trace
            .iter()
            .filter(|t| t.disposition == Disposition::HighConfidence)
            .count(),
        refined: trace.iter().filter(|t| t.gate.is_some()).count(),
        replaced: replaced.len(),
        gated_out: count(GateReason::LowIou) + count(GateReason::NotHigherConf),
        gated_low_iou: count(GateReason::LowIou),
        gated_not_higher_conf: count(GateReason::NotHigherConf),
        backend_errors: count(GateReason::BackendError),
        mean_score_replaced_before: mean(&before),
        mean_score_replaced_after: mean(&after),
        histogram_before: ScoreHistogram::of(&inputs),
        histogram_after: ScoreHistogram::of(&detections),
        skipped,
    };
    Ok(DatasetOutcome {
        initial: initial_out,
        detections,
        trace,
        summary,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn det(x0: f64, y0: f64, x1: f64, y1: f64, score: f64) -> Detection {
        Detection::new(
            "img",
            BBox::from_corners(x0, y0, x1, y1).unwrap(),
            score,
            0,
            Source::Initial,
        )
        .unwrap()
    }

    #[test]
    fn reference_rules() {
        assert_eq!(select_reference(&[]), None);
        let a = det(0.0, 0.0, 10.0, 10.0, 0.9);
        assert_eq!(select_reference(std::slice::from_ref(&a)), Some(0));
        let b = det(0.0, 0.0, 10.0, 10.0, 0.7);
        assert_eq!(select_reference(&[b.clone(), a.clone()]), Some(1));
        let big = det(0.0, 0.0, 20.0, 20.0, 0.9);
        assert_eq!(select_reference(&[a.clone(), big, a]), Some(1));
    }

    #[test]
    fn crop_examples() {
        let mut cfg = RefineConfig {
            crop_pad: 0.0,
            ..RefineConfig::default()
        };
        let c = BBox::from_corners(100.0, 100.0, 140.0, 140.0).unwrap();
        let w = adaptive_crop(&c, &c, 1000, 1000, &cfg);
        assert_eq!([w.x0, w.y0, w.x1, w.y1], [100, 100, 140, 140]);
        let r = BBox::from_corners(0.0, 0.0, 80.0, 80.0).unwrap();
        let w = adaptive_crop(&c, &r, 1000, 1000, &cfg);
        assert_eq!([w.x0, w.y0, w.x1, w.y1], [80, 80, 160, 160]);
        cfg.crop_pad = 0.25;
        let edge = BBox::from_corners(2.5, 990.0, 12.5, 999.5).unwrap();
        let w = adaptive_crop(&edge, &r, 1000, 1000, &cfg);
        assert!(w.as_box().contains(&edge));
        assert_eq!((w.x0, w.y1), (0, 1000));
    }

    #[test]
    fn config_validation() {
        assert!(RefineConfig::default().validate().is_ok());
        let bad = RefineConfig {
            gate_iou: 1.0,
            scale_min: 0.5,
            ..RefineConfig::default()
        };
        let RefineError::Config(v) = bad.validate().unwrap_err() else {
            panic!()
        };
        assert_eq!(v.len(), 2);
    }
}
