//! Checks a detection server against canned request/response pairs. The
//! server must serve [`conformance_model`] under [`SCENE_IMAGE`].

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::synthetic::{ClutterObject, SceneObject, SyntheticScene, SyntheticSceneModel};
use super::{DetectRequest, Detector, WireDetection, WireResponse};
use crate::geometry::BBox;

pub const SCENE_IMAGE: &str = "conformance/scene.jpg";
/// Absolute tolerance on box coordinates and scores.
pub const TOLERANCE: f64 = 1e-6;

const CASES: &str = include_str!("conformance_cases.json");

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CannedCase {
    pub name: String,
    pub request: DetectRequest,
    pub response: WireResponse,
}

pub fn canned_cases() -> Vec<CannedCase> {
    serde_json::from_str(CASES).expect("canned cases parse")
}

/// The scene a conforming server answers for.
pub fn conformance_model() -> SyntheticSceneModel {
    let b = |x0, y0, x1, y1| BBox::from_corners(x0, y0, x1, y1).expect("static box");
    let scene = SyntheticScene {
        width: 400,
        height: 300,
        objects: vec![
            SceneObject {
                bbox: b(40.0, 40.0, 80.0, 80.0),
                class_id: 0,
            },
            SceneObject {
                bbox: b(200.0, 100.0, 216.0, 112.0),
                class_id: 1,
            },
            SceneObject {
                bbox: b(300.0, 200.0, 380.0, 290.0),
                class_id: 2,
            },
        ],
        clutter: vec![ClutterObject {
            bbox: b(120.0, 220.0, 160.0, 250.0),
            class_id: 0,
            conf: 0.3,
        }],
    };
    SyntheticSceneModel {
        base_conf: 0.05,
        area_gain: 3.0,
        noise_sigma: 0.0,
        seed: 0,
        min_visibility: 0.3,
        scenes: BTreeMap::from([(SCENE_IMAGE.to_string(), scene)]),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaseOutcome {
    pub name: String,
    pub passed: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub message: Option<String>,
    /// The failure was a transport or protocol error, not a wrong answer.
    pub backend_error: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConformanceReport {
    pub cases: Vec<CaseOutcome>,
    pub passed: bool,
}

impl ConformanceReport {
    pub fn backend_failed(&self) -> bool {
        self.cases.iter().any(|c| c.backend_error)
    }
}

fn sorted(mut v: Vec<WireDetection>) -> Vec<WireDetection> {
    v.sort_by(|a, b| {
        a.class_id
            .cmp(&b.class_id)
            .then(a.bbox_xyxy[0].total_cmp(&b.bbox_xyxy[0]))
            .then(a.bbox_xyxy[1].total_cmp(&b.bbox_xyxy[1]))
    });
    v
}

/// First difference between two responses, ignoring order.
pub fn compare(got: &WireResponse, want: &WireResponse, tol: f64) -> Option<String> {
    if got.detections.len() != want.detections.len() {
        return Some(format!(
            "{} detections, expected {}",
            got.detections.len(),
            want.detections.len()
        ));
    }
    let (g, w) = (
        sorted(got.detections.clone()),
        sorted(want.detections.clone()),
    );
    for (i, (a, b)) in g.iter().zip(&w).enumerate() {
        let close = a.class_id == b.class_id
            && (a.score - b.score).abs() <= tol
            && a.bbox_xyxy
                .iter()
                .zip(&b.bbox_xyxy)
                .all(|(x, y)| (x - y).abs() <= tol);
        if !close {
            return Some(format!("detection {i}: got {a:?}, expected {b:?}"));
        }
    }
    None
}

pub fn check<D: Detector + ?Sized>(detector: &D) -> ConformanceReport {
    let cases: Vec<CaseOutcome> = canned_cases()
        .into_iter()
        .map(|c| {
            let (message, backend_error) = match detector.detect(&c.request) {
                Ok(dets) => (
                    compare(
                        &WireResponse::from_detections(&dets),
                        &c.response,
                        TOLERANCE,
                    ),
                    false,
                ),
                Err(e) => (Some(e.to_string()), e.is_backend_failure()),
            };
            CaseOutcome {
                name: c.name,
                passed: message.is_none(),
                message,
                backend_error,
            }
        })
        .collect();
    let passed = cases.iter().all(|c| c.passed);
    ConformanceReport { cases, passed }
}
