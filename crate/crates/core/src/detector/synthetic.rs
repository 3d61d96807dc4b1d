//! A detector that reads answers off known scene contents. Confidence grows
//! with how large an object appears after the crop is resized:
//!
//! `conf = clamp(base + gain·√(apparent area)/target diagonal + noise, 0.01, 0.99)`
//!
//! Clutter objects are false positives reported at a fixed confidence.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{quantize_coord, DetectRequest, Detector, DetectorError};
use crate::geometry::{image_to_window, BBox, CropWindow};
use crate::ingest::{format_yolo_labels, DatasetManifest, ManifestEntry};
use crate::metrics::GroundTruthObject;
use crate::postprocess::{Detection, Source};

pub const CONF_MIN: f64 = 0.01;
pub const CONF_MAX: f64 = 0.99;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneObject {
    #[serde(rename = "bbox_xyxy")]
    pub bbox: BBox,
    pub class_id: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClutterObject {
    #[serde(rename = "bbox_xyxy")]
    pub bbox: BBox,
    pub class_id: u32,
    pub conf: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticScene {
    pub width: u32,
    pub height: u32,
    pub objects: Vec<SceneObject>,
    #[serde(default)]
    pub clutter: Vec<ClutterObject>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSceneModel {
    pub base_conf: f64,
    pub area_gain: f64,
    pub noise_sigma: f64,
    pub seed: u64,
    /// Objects less visible than this inside a window are not reported.
    pub min_visibility: f64,
    pub scenes: BTreeMap<String, SyntheticScene>,
}

impl SyntheticSceneModel {
    pub fn validate(&self) -> Result<(), DetectorError> {
        let bad = |m: String| Err(DetectorError::Config(m));
        if !self.base_conf.is_finite() || !self.area_gain.is_finite() || self.area_gain < 0.0 {
            return bad(format!(
                "base_conf {} and area_gain {} must be finite, gain non-negative",
                self.base_conf, self.area_gain
            ));
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return bad(format!(
                "noise_sigma {} must be non-negative",
                self.noise_sigma
            ));
        }
        if !(self.min_visibility > 0.0 && self.min_visibility <= 1.0) {
            return bad(format!(
                "min_visibility {} outside (0, 1]",
                self.min_visibility
            ));
        }
        for (id, s) in &self.scenes {
            if s.width == 0 || s.height == 0 {
                return bad(format!("scene {id:?} has zero size"));
            }
            if let Some(c) = s.clutter.iter().find(|c| !(0.0..=1.0).contains(&c.conf)) {
                return bad(format!(
                    "scene {id:?} clutter conf {} outside [0, 1]",
                    c.conf
                ));
            }
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, DetectorError> {
        let text = fs::read_to_string(path)
            .map_err(|e| DetectorError::Config(format!("{}: {e}", path.display())))?;
        let m: Self = serde_json::from_str(&text)
            .map_err(|e| DetectorError::Config(format!("{}: {e}", path.display())))?;
        m.validate()?;
        Ok(m)
    }

    pub fn save(&self, path: &Path) -> Result<(), DetectorError> {
        let text = serde_json::to_string_pretty(self).expect("scene model serializes");
        fs::write(path, text + "\n")
            .map_err(|e| DetectorError::Config(format!("{}: {e}", path.display())))
    }
}

fn fnv1a(bytes: impl IntoIterator<Item = u8>, mut h: u64) -> u64 {
    for b in bytes {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

fn noise_seed(seed: u64, image_id: &str, index: usize, win: &CropWindow) -> u64 {
    let mut h = fnv1a(seed.to_le_bytes(), 0xcbf2_9ce4_8422_2325);
    h = fnv1a(image_id.bytes().chain([0]), h);
    h = fnv1a((index as u64).to_le_bytes(), h);
    for v in [win.x0, win.y0, win.x1, win.y1] {
        h = fnv1a(quantize_coord(v).to_le_bytes(), h);
    }
    h
}

/// Area of `obj`'s visible part after `win` is resized to `target`.
pub fn apparent_area(obj: &BBox, win: &CropWindow, target: [u32; 2]) -> f64 {
    let visible = obj.intersection_area(&win.as_box());
    let sx = f64::from(target[0]) / f64::from(win.width());
    let sy = f64::from(target[1]) / f64::from(win.height());
    visible * sx * sy
}

/// Confidence of object `index` of `image_id` seen through `win`.
pub fn synth_confidence(
    model: &SyntheticSceneModel,
    image_id: &str,
    index: usize,
    obj: &BBox,
    win: &CropWindow,
    target: [u32; 2],
) -> f64 {
    let diag = f64::from(target[0]).hypot(f64::from(target[1]));
    let mut conf =
        model.base_conf + model.area_gain * apparent_area(obj, win, target).sqrt() / diag;
    if model.noise_sigma > 0.0 {
        let mut rng = ChaCha8Rng::seed_from_u64(noise_seed(model.seed, image_id, index, win));
        let normal = Normal::new(0.0, model.noise_sigma).expect("validated sigma");
        conf += normal.sample(&mut rng);
    }
    conf.clamp(CONF_MIN, CONF_MAX)
}

/// Maps the visible part of `obj` into the resized window frame.
fn to_target(obj: &BBox, win: &CropWindow, target: [u32; 2]) -> Option<(BBox, f64)> {
    let wb = image_to_window(obj, win).ok()?;
    let sx = f64::from(target[0]) / f64::from(win.width());
    let sy = f64::from(target[1]) / f64::from(win.height());
    let [x0, y0, x1, y1] = wb.local.corners();
    let (tw, th) = (f64::from(target[0]), f64::from(target[1]));
    let b = BBox::from_corners(
        (x0 * sx).clamp(0.0, tw),
        (y0 * sy).clamp(0.0, th),
        (x1 * sx).clamp(0.0, tw),
        (y1 * sy).clamp(0.0, th),
    )
    .ok()?;
    Some((b, wb.visible_fraction))
}

#[derive(Debug, Clone)]
pub struct SyntheticDetector {
    model: SyntheticSceneModel,
}

impl SyntheticDetector {
    pub fn new(model: SyntheticSceneModel) -> Result<Self, DetectorError> {
        model.validate()?;
        Ok(Self { model })
    }

    pub fn model(&self) -> &SyntheticSceneModel {
        &self.model
    }
}

impl Detector for SyntheticDetector {
    fn detect(&self, req: &DetectRequest) -> Result<Vec<Detection>, DetectorError> {
        req.validate()?;
        let scene = self
            .model
            .scenes
            .get(&req.image_ref)
            .ok_or_else(|| DetectorError::UnknownImage(req.image_ref.clone()))?;
        let win = req.crop_window(scene.width, scene.height)?;
        let t = req.target_size;
        let mut out = Vec::new();
        let mut emit = |bbox: BBox, score: f64, class_id: u32| {
            if score >= req.conf_floor {
                out.push(Detection {
                    image_id: req.image_ref.clone(),
                    bbox,
                    score,
                    class_id,
                    source: Source::Initial,
                });
            }
        };
        for (i, o) in scene.objects.iter().enumerate() {
            let Some((b, vis)) = to_target(&o.bbox, &win, t) else {
                continue;
            };
            if vis >= self.model.min_visibility {
                let conf = synth_confidence(&self.model, &req.image_ref, i, &o.bbox, &win, t);
                emit(b, conf, o.class_id);
            }
        }
        for c in &scene.clutter {
            if let Some((b, vis)) = to_target(&c.bbox, &win, t) {
                if vis >= self.model.min_visibility {
                    emit(b, c.conf, c.class_id);
                }
            }
        }
        Ok(out)
    }
}

/// Shape of a generated suite.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SuiteSpec {
    pub seed: u64,
    pub n_images: usize,
    pub image_size: [u32; 2],
    pub n_classes: u32,
    pub objects_per_image: [usize; 2],
    pub clutter_per_image: [usize; 2],
    pub clutter_conf: f64,
    /// Side lengths of small objects, in pixels.
    pub small_side: [f64; 2],
    pub large_side: [f64; 2],
    /// Fraction of objects drawn from `small_side`.
    pub small_fraction: f64,
    pub base_conf: f64,
    pub area_gain: f64,
    pub noise_sigma: f64,
    pub min_visibility: f64,
}

impl Default for SuiteSpec {
    fn default() -> Self {
        Self {
            seed: 2024,
            n_images: 20,
            image_size: [1280, 960],
            n_classes: 3,
            objects_per_image: [8, 16],
            clutter_per_image: [1, 3],
            clutter_conf: 0.35,
            small_side: [6.0, 16.0],
            large_side: [24.0, 80.0],
            small_fraction: 0.6,
            base_conf: 0.05,
            area_gain: 25.0,
            noise_sigma: 0.0,
            min_visibility: 0.3,
        }
    }
}

/// Image ids of a generated suite, in order.
pub fn suite_image_id(i: usize) -> String {
    format!("synth_{i:03}")
}

/// Image reference of suite image `i`; scenes are keyed by it.
pub fn suite_image_path(i: usize) -> String {
    format!("images/{}.png", suite_image_id(i))
}

pub fn suite_label_path(i: usize) -> String {
    format!("labels/{}.txt", suite_image_id(i))
}

/// Everything needed to run and score a suite: the scene model, a manifest
/// and the YOLO label text of each image (objects only, clutter is not
/// ground truth).
pub struct SuiteFiles {
    pub model: SyntheticSceneModel,
    pub manifest: DatasetManifest,
    pub labels: Vec<(String, String)>,
}

pub fn suite_files(spec: &SuiteSpec) -> SuiteFiles {
    let model = generate_suite(spec);
    let mut entries = Vec::with_capacity(spec.n_images);
    let mut labels = Vec::with_capacity(spec.n_images);
    for i in 0..spec.n_images {
        let scene = &model.scenes[&suite_image_path(i)];
        let gt: Vec<GroundTruthObject> = scene
            .objects
            .iter()
            .map(|o| GroundTruthObject {
                image_id: suite_image_id(i),
                bbox: o.bbox,
                class_id: o.class_id,
            })
            .collect();
        labels.push((
            suite_label_path(i),
            format_yolo_labels(&gt, scene.width, scene.height),
        ));
        entries.push(ManifestEntry {
            image_id: suite_image_id(i),
            image_path: suite_image_path(i),
            width: scene.width,
            height: scene.height,
            label_path: Some(suite_label_path(i)),
            patch: None,
        });
    }
    SuiteFiles {
        model,
        manifest: DatasetManifest {
            class_names: (0..spec.n_classes).map(|c| format!("class{c}")).collect(),
            entries,
            patch_plan: None,
        },
        labels,
    }
}

/// Random scenes with non-overlapping objects. Each object and clutter box
/// keeps a margin of its own size from every other box.
pub fn generate_suite(spec: &SuiteSpec) -> SyntheticSceneModel {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let [iw, ih] = spec.image_size.map(f64::from);
    let mut scenes = BTreeMap::new();
    for i in 0..spec.n_images {
        let n_obj = rng.random_range(spec.objects_per_image[0]..=spec.objects_per_image[1]);
        let n_clutter = rng.random_range(spec.clutter_per_image[0]..=spec.clutter_per_image[1]);
        let mut placed: Vec<BBox> = Vec::new();
        let mut place = |rng: &mut ChaCha8Rng, side: [f64; 2]| -> BBox {
            loop {
                let w = rng.random_range(side[0]..side[1]).round();
                let h = (w * rng.random_range(0.7..1.4)).round().max(2.0);
                let x0 = rng.random_range(0.0..iw - w).round();
                let y0 = rng.random_range(0.0..ih - h).round();
                let b = BBox::from_corners(x0, y0, x0 + w, y0 + h).expect("positive size");
                let m = w.max(h);
                let clear = placed.iter().all(|p| {
                    p.x1() + m < b.x0()
                        || b.x1() + m < p.x0()
                        || p.y1() + m < b.y0()
                        || b.y1() + m < p.y0()
                });
                if clear {
                    placed.push(b);
                    return b;
                }
            }
        };
        let objects = (0..n_obj)
            .map(|_| {
                let side = if rng.random_bool(spec.small_fraction) {
                    spec.small_side
                } else {
                    spec.large_side
                };
                let bbox = place(&mut rng, side);
                SceneObject {
                    bbox,
                    class_id: rng.random_range(0..spec.n_classes),
                }
            })
            .collect();
        let clutter = (0..n_clutter)
            .map(|_| {
                let bbox = place(&mut rng, spec.large_side);
                ClutterObject {
                    bbox,
                    class_id: rng.random_range(0..spec.n_classes),
                    conf: spec.clutter_conf,
                }
            })
            .collect();
        scenes.insert(
            suite_image_path(i),
            SyntheticScene {
                width: spec.image_size[0],
                height: spec.image_size[1],
                objects,
                clutter,
            },
        );
    }
    SyntheticSceneModel {
        base_conf: spec.base_conf,
        area_gain: spec.area_gain,
        noise_sigma: spec.noise_sigma,
        seed: spec.seed,
        min_visibility: spec.min_visibility,
        scenes,
    }
}
