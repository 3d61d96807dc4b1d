//! Dataset manifests, YOLO labels, patch tiling and the detections JSONL
//! format.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use thiserror::Error;

use crate::geometry::{image_to_window, BBox, CropWindow};
use crate::metrics::GroundTruthObject;
use crate::postprocess::Detection;

#[derive(Debug, Error)]
pub enum IngestError {
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("{}:{line}: {message}", path.display())]
    Line {
        path: PathBuf,
        line: usize,
        message: String,
    },
    #[error("{}: {message}", path.display())]
    Json { path: PathBuf, message: String },
    #[error("invalid manifest: {0}")]
    Manifest(String),
    #[error("invalid patch plan: {0}")]
    Plan(String),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> IngestError + '_ {
    move |source| IngestError::Io {
        path: path.to_owned(),
        source,
    }
}

/// Where a patch entry sits inside its parent image.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PatchOrigin {
    pub parent_id: String,
    pub parent_width: u32,
    pub parent_height: u32,
    pub window: [u32; 4],
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub image_id: String,
    /// Passed to detector backends verbatim.
    pub image_path: String,
    pub width: u32,
    pub height: u32,
    /// Relative paths resolve against the manifest's directory.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label_path: Option<String>,
    /// Set on entries produced by patching; `image_path` is then the parent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub patch: Option<PatchOrigin>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PatchPlan {
    pub patch_w: u32,
    pub patch_h: u32,
    #[serde(default)]
    pub overlap: u32,
    #[serde(default = "default_min_visibility")]
    pub min_visibility: f64,
}

pub const DEFAULT_MIN_VISIBILITY: f64 = 0.3;

fn default_min_visibility() -> f64 {
    DEFAULT_MIN_VISIBILITY
}

impl PatchPlan {
    pub fn new(patch_w: u32, patch_h: u32, overlap: u32) -> Result<Self, IngestError> {
        let p = Self {
            patch_w,
            patch_h,
            overlap,
            min_visibility: DEFAULT_MIN_VISIBILITY,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<(), IngestError> {
        if self.patch_w == 0 || self.patch_h == 0 {
            return Err(IngestError::Plan("patch size must be positive".into()));
        }
        if self.overlap >= self.patch_w.min(self.patch_h) {
            return Err(IngestError::Plan(format!(
                "overlap {} must be below the smaller patch side {}",
                self.overlap,
                self.patch_w.min(self.patch_h)
            )));
        }
        if !(self.min_visibility > 0.0 && self.min_visibility <= 1.0) {
            return Err(IngestError::Plan(format!(
                "min_visibility {} outside (0, 1]",
                self.min_visibility
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub class_names: Vec<String>,
    pub entries: Vec<ManifestEntry>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub patch_plan: Option<PatchPlan>,
}

impl DatasetManifest {
    pub fn validate(&self) -> Result<(), IngestError> {
        let mut seen = BTreeSet::new();
        for e in &self.entries {
            if !seen.insert(e.image_id.as_str()) {
                return Err(IngestError::Manifest(format!(
                    "duplicate image id {:?}",
                    e.image_id
                )));
            }
            if e.width == 0 || e.height == 0 {
                return Err(IngestError::Manifest(format!(
                    "{}: dimensions {}x{} must be positive",
                    e.image_id, e.width, e.height
                )));
            }
            if let Some(p) = &e.patch {
                let [x0, y0, x1, y1] = p.window;
                if x1 <= x0 || y1 <= y0 || x1 > p.parent_width || y1 > p.parent_height {
                    return Err(IngestError::Manifest(format!(
                        "{}: patch window {:?} not inside {}x{}",
                        e.image_id, p.window, p.parent_width, p.parent_height
                    )));
                }
                if (x1 - x0, y1 - y0) != (e.width, e.height) {
                    return Err(IngestError::Manifest(format!(
                        "{}: patch window {:?} does not match {}x{}",
                        e.image_id, p.window, e.width, e.height
                    )));
                }
            }
        }
        if let Some(p) = &self.patch_plan {
            p.validate()?;
        }
        Ok(())
    }

    pub fn image_ids(&self) -> Vec<String> {
        self.entries.iter().map(|e| e.image_id.clone()).collect()
    }

    pub fn load(path: &Path) -> Result<Self, IngestError> {
        let text = fs::read_to_string(path).map_err(io_err(path))?;
        let m: Self = serde_json::from_str(&text).map_err(|e| IngestError::Json {
            path: path.to_owned(),
            message: e.to_string(),
        })?;
        m.validate()?;
        Ok(m)
    }

    /// Writes to a temporary file beside `path`, then renames it into place.
    pub fn save(&self, path: &Path) -> Result<(), IngestError> {
        self.validate()?;
        let mut text = serde_json::to_string_pretty(self).expect("serializable");
        text.push('\n');
        write_atomic(path, text.as_bytes())
    }
}

/// Atomic replace of `path` with `bytes`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), IngestError> {
    let dir = match path.parent() {
        Some(d) if !d.as_os_str().is_empty() => d,
        _ => Path::new("."),
    };
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(io_err(path))?;
    tmp.write_all(bytes).map_err(io_err(path))?;
    tmp.as_file().sync_all().map_err(io_err(path))?;
    tmp.persist(path).map_err(|e| IngestError::Io {
        path: path.to_owned(),
        source: e.error,
    })?;
    Ok(())
}

/// `rel` against `base` unless it is absolute.
pub fn resolve(base: &Path, rel: &str) -> PathBuf {
    let p = Path::new(rel);
    if p.is_absolute() {
        p.to_owned()
    } else {
        base.join(p)
    }
}

/// Parses YOLO label text (`class cx cy w h`, normalized) into pixel boxes.
/// Boxes reaching past the image are clipped with a warning.
pub fn parse_yolo_labels(
    text: &str,
    path: &Path,
    image_id: &str,
    image_w: u32,
    image_h: u32,
    class_names: &[String],
) -> Result<Vec<GroundTruthObject>, IngestError> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() {
            continue;
        }
        let err = |message: String| IngestError::Line {
            path: path.to_owned(),
            line: i + 1,
            message,
        };
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.len() != 5 {
            return Err(err(format!("expected 5 fields, found {}", fields.len())));
        }
        let class_id: u32 = fields[0].parse().map_err(|_| {
            err(format!(
                "class {:?} is not a non-negative integer",
                fields[0]
            ))
        })?;
        if class_id as usize >= class_names.len() {
            return Err(err(format!(
                "class {class_id} out of range for {} class names",
                class_names.len()
            )));
        }
        let mut v = [0.0f64; 4];
        for (k, f) in fields[1..].iter().enumerate() {
            let x: f64 = f
                .parse()
                .map_err(|_| err(format!("{f:?} is not a number")))?;
            if !(0.0..=1.0).contains(&x) {
                return Err(err(format!("value {x} outside [0, 1]")));
            }
            v[k] = x;
        }
        let (w, h) = (f64::from(image_w), f64::from(image_h));
        let (cx, cy, bw, bh) = (v[0] * w, v[1] * h, v[2] * w, v[3] * h);
        let full = BBox::from_center(cx, cy, bw, bh).map_err(|e| err(e.to_string()))?;
        let frame = BBox::from_corners(0.0, 0.0, w, h).expect("positive image");
        let bbox = if frame.contains(&full) {
            full
        } else {
            log::warn!(
                "{}:{}: box extends past the image; clipped",
                path.display(),
                i + 1
            );
            full.intersection(&frame)
                .ok_or_else(|| err("box lies outside the image".into()))?
        };
        out.push(GroundTruthObject {
            image_id: image_id.to_owned(),
            bbox,
            class_id,
        });
    }
    Ok(out)
}

pub fn load_yolo_labels(
    path: &Path,
    image_id: &str,
    image_w: u32,
    image_h: u32,
    class_names: &[String],
) -> Result<Vec<GroundTruthObject>, IngestError> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    parse_yolo_labels(&text, path, image_id, image_w, image_h, class_names)
}

/// YOLO label text for `objects` on a `w x h` image.
pub fn format_yolo_labels(objects: &[GroundTruthObject], w: u32, h: u32) -> String {
    let (w, h) = (f64::from(w), f64::from(h));
    let mut out = String::new();
    for o in objects {
        let _ = writeln!(
            out,
            "{} {} {} {} {}",
            o.class_id,
            o.bbox.cx() / w,
            o.bbox.cy() / h,
            o.bbox.w() / w,
            o.bbox.h() / h
        );
    }
    out
}

/// Ground truth of every labelled entry, in manifest order.
pub fn load_ground_truth(
    manifest: &DatasetManifest,
    base: &Path,
) -> Result<Vec<GroundTruthObject>, IngestError> {
    let mut out = Vec::new();
    for e in &manifest.entries {
        if let Some(l) = &e.label_path {
            out.extend(load_yolo_labels(
                &resolve(base, l),
                &e.image_id,
                e.width,
                e.height,
                &manifest.class_names,
            )?);
        }
    }
    Ok(out)
}

fn axis_starts(len: u32, patch: u32, overlap: u32) -> Vec<u32> {
    if patch >= len {
        return vec![0];
    }
    let stride = patch - overlap;
    let mut starts = Vec::new();
    let mut s = 0;
    loop {
        if s + patch >= len {
            starts.push(len - patch);
            return starts;
        }
        starts.push(s);
        s += stride;
    }
}

/// Tiles the image row by row. The last window on each axis is shifted back
/// to end at the border; an axis shorter than the patch gets one full-length
/// window.
pub fn plan_patches(
    image_w: u32,
    image_h: u32,
    plan: &PatchPlan,
) -> Result<Vec<CropWindow>, IngestError> {
    plan.validate()?;
    if image_w == 0 || image_h == 0 {
        return Err(IngestError::Plan(format!(
            "image {image_w}x{image_h} is empty"
        )));
    }
    if plan.patch_w > image_w || plan.patch_h > image_h {
        log::warn!(
            "patch {}x{} exceeds image {image_w}x{image_h}; using the full extent",
            plan.patch_w,
            plan.patch_h
        );
    }
    let pw = plan.patch_w.min(image_w);
    let ph = plan.patch_h.min(image_h);
    let xs = axis_starts(image_w, pw, plan.overlap.min(pw - 1));
    let ys = axis_starts(image_h, ph, plan.overlap.min(ph - 1));
    let mut out = Vec::with_capacity(xs.len() * ys.len());
    for &y in &ys {
        for &x in &xs {
            out.push(
                CropWindow::new(x, y, x + pw, y + ph, image_w, image_h).expect("inside image"),
            );
        }
    }
    Ok(out)
}

/// Objects visible in each window by at least `min_visibility` of their
/// area, clipped and in window-local coordinates.
pub fn remap_labels(
    objects: &[GroundTruthObject],
    windows: &[CropWindow],
    min_visibility: f64,
) -> Vec<Vec<GroundTruthObject>> {
    windows
        .iter()
        .map(|w| {
            objects
                .iter()
                .filter_map(|o| {
                    let wb = image_to_window(&o.bbox, w).ok()?;
                    (wb.visible_fraction >= min_visibility).then(|| GroundTruthObject {
                        image_id: o.image_id.clone(),
                        bbox: wb.local,
                        class_id: o.class_id,
                    })
                })
                .collect()
        })
        .collect()
}

/// A detection plus any fields this crate does not know about.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectionRecord {
    #[serde(flatten)]
    pub detection: Detection,
    #[serde(flatten)]
    pub extra: Map<String, Value>,
}

impl From<Detection> for DetectionRecord {
    fn from(detection: Detection) -> Self {
        Self {
            detection,
            extra: Map::new(),
        }
    }
}

pub fn parse_detection_records(
    text: &str,
    path: &Path,
) -> Result<Vec<DetectionRecord>, IngestError> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let err = |message: String| IngestError::Line {
            path: path.to_owned(),
            line: i + 1,
            message,
        };
        let r: DetectionRecord = serde_json::from_str(line).map_err(|e| err(e.to_string()))?;
        r.detection.validate().map_err(|e| err(e.to_string()))?;
        out.push(r);
    }
    Ok(out)
}

pub fn read_detection_records(path: &Path) -> Result<Vec<DetectionRecord>, IngestError> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    parse_detection_records(&text, path)
}

pub fn read_detections(path: &Path) -> Result<Vec<Detection>, IngestError> {
    Ok(read_detection_records(path)?
        .into_iter()
        .map(|r| r.detection)
        .collect())
}

/// One JSON object per line.
pub fn to_jsonl<T: Serialize>(items: &[T]) -> String {
    let mut out = String::new();
    for it in items {
        out.push_str(&serde_json::to_string(it).expect("serializable"));
        out.push('\n');
    }
    out
}

pub fn write_detection_records(
    path: &Path,
    records: &[DetectionRecord],
) -> Result<(), IngestError> {
    write_atomic(path, to_jsonl(records).as_bytes())
}

pub fn write_detections(path: &Path, dets: &[Detection]) -> Result<(), IngestError> {
    write_atomic(path, to_jsonl(dets).as_bytes())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn yolo_lines() {
        let names: Vec<String> = (0..6).map(|i| format!("c{i}")).collect();
        let p = Path::new("l.txt");
        let o = parse_yolo_labels("0 0.5 0.5 1.0 1.0\n", p, "a", 100, 100, &names).unwrap();
        assert_eq!(o[0].bbox.corners(), [0.0, 0.0, 100.0, 100.0]);
        assert!(parse_yolo_labels("", p, "a", 100, 100, &names)
            .unwrap()
            .is_empty());
        let e = parse_yolo_labels(
            "0 0.5 0.5 0.1 0.1\n7 0.5 0.5 0.1 0.1\n",
            p,
            "a",
            10,
            10,
            &names,
        );
        assert!(matches!(e, Err(IngestError::Line { line: 2, .. })));
        for bad in [
            "0 0.5 0.5 0.1",
            "0 x 0.5 0.1 0.1",
            "0 0.5 1.5 0.1 0.1",
            "-1 0.5 0.5 0.1 0.1",
        ] {
            assert!(
                parse_yolo_labels(bad, p, "a", 10, 10, &names).is_err(),
                "{bad}"
            );
        }
        let clipped = parse_yolo_labels("1 0.95 0.5 0.2 0.2", p, "a", 100, 100, &names).unwrap();
        assert_eq!(clipped[0].bbox.corners(), [85.0, 40.0, 100.0, 60.0]);
    }

    #[test]
    fn tiling_examples() {
        let plan = PatchPlan::new(608, 513, 0).unwrap();
        let w = plan_patches(1216, 1026, &plan).unwrap();
        let corners: Vec<[u32; 2]> = w.iter().map(|w| [w.x0, w.y0]).collect();
        assert_eq!(corners, vec![[0, 0], [608, 0], [0, 513], [608, 513]]);
        let w = plan_patches(1000, 1000, &plan).unwrap();
        assert_eq!(w.len(), 4);
        assert_eq!((w[1].x0, w[1].x1), (392, 1000));
        assert_eq!((w[2].y0, w[2].y1), (487, 1000));
        assert_eq!(plan_patches(608, 513, &plan).unwrap().len(), 1);
        let big = plan_patches(100, 80, &plan).unwrap();
        assert_eq!(big.len(), 1);
        assert!(big[0].is_whole_image());
        assert!(PatchPlan::new(10, 20, 10).is_err());
    }

    #[test]
    fn jsonl_errors_carry_line_numbers() {
        let ok = r#"{"image_id":"a","bbox_xyxy":[0,0,1,1],"score":0.5,"class_id":0,"source":"initial","note":"x"}"#;
        let bad =
            r#"{"image_id":"a","bbox_xyxy":[0,0,1,1],"score":1.5,"class_id":0,"source":"initial"}"#;
        let text = format!("{ok}\n\n{bad}\n");
        let e = parse_detection_records(&text, Path::new("d.jsonl")).unwrap_err();
        assert!(matches!(e, IngestError::Line { line: 3, .. }), "{e}");
        let r = parse_detection_records(ok, Path::new("d.jsonl")).unwrap();
        assert_eq!(r[0].extra["note"], "x");
        let once = to_jsonl(&r);
        let twice = to_jsonl(&parse_detection_records(&once, Path::new("d.jsonl")).unwrap());
        assert_eq!(once, twice);
        assert!(once.contains(r#""note":"x""#));
    }
}
