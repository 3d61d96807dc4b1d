//! Detections, confidence splitting and greedy non-maximum suppression.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{iou, BBox};

pub const DEFAULT_NMS_IOU: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Source {
    #[default]
    Initial,
    Refined,
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DetectionError {
    #[error("score {0} outside [0, 1]")]
    Score(f64),
}

/// A scored, classed box on one image.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub image_id: String,
    #[serde(rename = "bbox_xyxy")]
    pub bbox: BBox,
    pub score: f64,
    pub class_id: u32,
    pub source: Source,
}

impl Detection {
    pub fn new(
        image_id: impl Into<String>,
        bbox: BBox,
        score: f64,
        class_id: u32,
        source: Source,
    ) -> Result<Self, DetectionError> {
        let d = Self {
            image_id: image_id.into(),
            bbox,
            score,
            class_id,
            source,
        };
        d.validate()?;
        Ok(d)
    }

    pub fn validate(&self) -> Result<(), DetectionError> {
        if (0.0..=1.0).contains(&self.score) {
            Ok(())
        } else {
            Err(DetectionError::Score(self.score))
        }
    }
}

/// Score descending, then class id ascending, then input position.
fn rank(dets: &[Detection]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&a, &b| {
        let (da, db) = (&dets[a], &dets[b]);
        db.score
            .total_cmp(&da.score)
            .then(da.class_id.cmp(&db.class_id))
            .then(a.cmp(&b))
    });
    order
}

/// Indices of the detections kept by greedy NMS, in rank order. Detections
/// on different images never suppress each other; with `class_aware` the
/// same holds across classes.
///
/// # Panics
/// If `iou_threshold` is not in `(0, 1)`.
pub fn nms_indices(dets: &[Detection], iou_threshold: f64, class_aware: bool) -> Vec<usize> {
    assert!(
        iou_threshold > 0.0 && iou_threshold < 1.0,
        "NMS IoU threshold must be in (0, 1), got {iou_threshold}"
    );
    let mut kept: Vec<usize> = Vec::new();
    for i in rank(dets) {
        let d = &dets[i];
        let suppressed = kept.iter().any(|&k| {
            let o = &dets[k];
            o.image_id == d.image_id
                && (!class_aware || o.class_id == d.class_id)
                && iou(&o.bbox, &d.bbox) >= iou_threshold
        });
        if !suppressed {
            kept.push(i);
        }
    }
    kept
}

/// Greedy NMS. Output is sorted by score descending.
pub fn nms(dets: &[Detection], iou_threshold: f64, class_aware: bool) -> Vec<Detection> {
    nms_indices(dets, iou_threshold, class_aware)
        .into_iter()
        .map(|i| dets[i].clone())
        .collect()
}

/// Splits into `(score >= tau, score < tau)`, preserving order.
pub fn split_by_confidence(dets: &[Detection], tau: f64) -> (Vec<Detection>, Vec<Detection>) {
    dets.iter().cloned().partition(|d| d.score >= tau)
}
