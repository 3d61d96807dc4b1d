//! Detector backends. A request names an image, an optional crop window and
//! the size the crop is resized to; responses are in that resized frame.

pub mod conformance;
pub mod external;
pub mod fixture;
pub mod server;
pub mod synthetic;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::geometry::{BBox, CropWindow};
use crate::postprocess::{Detection, Source};

pub use external::ExternalDetector;
pub use fixture::FixtureDetector;
pub use synthetic::{SceneObject, SyntheticDetector, SyntheticScene, SyntheticSceneModel};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectRequest {
    #[serde(rename = "image_path")]
    pub image_ref: String,
    /// `[x0, y0, x1, y1]` in image pixels; `None` is the whole image.
    pub window: Option<[u32; 4]>,
    pub target_size: [u32; 2],
    pub conf_floor: f64,
}

impl DetectRequest {
    pub fn whole(image_ref: impl Into<String>, target_size: [u32; 2], conf_floor: f64) -> Self {
        Self {
            image_ref: image_ref.into(),
            window: None,
            target_size,
            conf_floor,
        }
    }

    /// A request for `win`; whole-image windows are sent as `None`.
    pub fn for_window(
        image_ref: impl Into<String>,
        win: &CropWindow,
        target_size: [u32; 2],
        conf_floor: f64,
    ) -> Self {
        Self {
            image_ref: image_ref.into(),
            window: (!win.is_whole_image()).then_some([win.x0, win.y0, win.x1, win.y1]),
            target_size,
            conf_floor,
        }
    }

    pub fn validate(&self) -> Result<(), DetectorError> {
        let bad = |m: String| Err(DetectorError::InvalidRequest(m));
        if self.target_size.contains(&0) {
            return bad(format!(
                "target_size {:?} must be positive",
                self.target_size
            ));
        }
        if !(0.0..=1.0).contains(&self.conf_floor) {
            return bad(format!("conf_floor {} outside [0, 1]", self.conf_floor));
        }
        if let Some([x0, y0, x1, y1]) = self.window {
            if x1 <= x0 || y1 <= y0 {
                return bad(format!("empty window {:?}", self.window));
            }
        }
        Ok(())
    }

    /// Resolves the window against the image size.
    pub fn crop_window(&self, image_w: u32, image_h: u32) -> Result<CropWindow, DetectorError> {
        let win = match self.window {
            None => CropWindow::whole(image_w, image_h),
            Some([x0, y0, x1, y1]) => CropWindow::new(x0, y0, x1, y1, image_w, image_h),
        };
        win.map_err(|e| DetectorError::InvalidRequest(format!("window {:?}: {e}", self.window)))
    }
}

#[derive(Debug, Error)]
pub enum DetectorError {
    #[error("unknown image {0:?}")]
    UnknownImage(String),
    #[error("no fixture entry for {0:?}")]
    MissingFixture(Box<DetectRequest>),
    #[error("invalid request: {0}")]
    InvalidRequest(String),
    #[error("transport failure after {attempts} attempt(s) for {request:?}: {message}")]
    Transport {
        request: Box<DetectRequest>,
        attempts: u32,
        message: String,
    },
    #[error("server answered HTTP {status} for {request:?}")]
    Status {
        request: Box<DetectRequest>,
        status: u16,
    },
    #[error("response schema violation for {request:?}: {message}")]
    Schema {
        request: Box<DetectRequest>,
        message: String,
    },
    #[error("{0}")]
    Config(String),
}

impl DetectorError {
    /// Whether the failure came from talking to a remote backend.
    pub fn is_backend_failure(&self) -> bool {
        matches!(
            self,
            DetectorError::Transport { .. }
                | DetectorError::Status { .. }
                | DetectorError::Schema { .. }
        )
    }
}

/// Window coordinates are bucketed to this grid wherever a window is used as
/// a lookup or seeding key.
pub const KEY_GRID: u32 = 8;

/// Nearest multiple of [`KEY_GRID`], as a grid index.
pub fn quantize_coord(v: u32) -> u32 {
    (v + KEY_GRID / 2) / KEY_GRID
}

/// A detector usable from several threads at once.
pub trait Detector: Send + Sync {
    /// Detections with `score >= req.conf_floor`, with boxes in the
    /// `target_size` frame of the requested window.
    fn detect(&self, req: &DetectRequest) -> Result<Vec<Detection>, DetectorError>;
}

impl<D: Detector + ?Sized> Detector for &D {
    fn detect(&self, req: &DetectRequest) -> Result<Vec<Detection>, DetectorError> {
        (**self).detect(req)
    }
}

impl<D: Detector + ?Sized> Detector for Box<D> {
    fn detect(&self, req: &DetectRequest) -> Result<Vec<Detection>, DetectorError> {
        (**self).detect(req)
    }
}

/// One detection on the wire.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WireDetection {
    pub bbox_xyxy: [f64; 4],
    pub score: f64,
    pub class_id: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WireResponse {
    pub detections: Vec<WireDetection>,
}

impl WireResponse {
    pub fn from_detections(dets: &[Detection]) -> Self {
        Self {
            detections: dets
                .iter()
                .map(|d| WireDetection {
                    bbox_xyxy: d.bbox.corners(),
                    score: d.score,
                    class_id: d.class_id,
                })
                .collect(),
        }
    }

    pub fn into_detections(self, image_ref: &str) -> Result<Vec<Detection>, String> {
        self.detections
            .into_iter()
            .enumerate()
            .map(|(i, w)| {
                let [x0, y0, x1, y1] = w.bbox_xyxy;
                let b = BBox::from_corners(x0, y0, x1, y1)
                    .map_err(|e| format!("detections[{i}].bbox_xyxy: {e}"))?;
                Detection::new(image_ref, b, w.score, w.class_id, Source::Initial)
                    .map_err(|e| format!("detections[{i}]: {e}"))
            })
            .collect()
    }
}

/// Checks a response body against the wire schema, reporting the first
/// violation with its JSON path.
pub fn validate_response(body: &Value) -> Result<WireResponse, String> {
    let obj = body.as_object().ok_or("response is not a JSON object")?;
    let list = obj
        .get("detections")
        .ok_or("missing \"detections\"")?
        .as_array()
        .ok_or("\"detections\" is not an array")?;
    let mut detections = Vec::with_capacity(list.len());
    for (i, d) in list.iter().enumerate() {
        let at = |f: &str| format!("detections[{i}].{f}");
        let d = d
            .as_object()
            .ok_or(format!("detections[{i}] is not an object"))?;
        let bbox = d
            .get("bbox_xyxy")
            .and_then(Value::as_array)
            .ok_or(format!("{} missing or not an array", at("bbox_xyxy")))?;
        if bbox.len() != 4 {
            return Err(format!(
                "{} has {} elements, expected 4",
                at("bbox_xyxy"),
                bbox.len()
            ));
        }
        let mut xyxy = [0.0; 4];
        for (k, v) in bbox.iter().enumerate() {
            xyxy[k] = v
                .as_f64()
                .filter(|x| x.is_finite())
                .ok_or(format!("{}[{k}] is not a finite number", at("bbox_xyxy")))?;
        }
        if xyxy[2] <= xyxy[0] || xyxy[3] <= xyxy[1] {
            return Err(format!("{} {:?} is empty", at("bbox_xyxy"), xyxy));
        }
        let score = d
            .get("score")
            .and_then(Value::as_f64)
            .filter(|s| (0.0..=1.0).contains(s))
            .ok_or(format!("{} missing or outside [0, 1]", at("score")))?;
        let class_id = d
            .get("class_id")
            .and_then(Value::as_u64)
            .and_then(|c| u32::try_from(c).ok())
            .ok_or(format!(
                "{} missing or not a non-negative integer",
                at("class_id")
            ))?;
        detections.push(WireDetection {
            bbox_xyxy: xyxy,
            score,
            class_id,
        });
    }
    Ok(WireResponse { detections })
}
