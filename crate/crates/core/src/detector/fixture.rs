//! Replays stored responses. Windows are keyed on an 8-pixel grid.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{quantize_coord, DetectRequest, Detector, DetectorError, WireDetection, WireResponse};
use crate::postprocess::Detection;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FixtureEntry {
    pub image_path: String,
    pub window: Option<[u32; 4]>,
    pub target_size: [u32; 2],
    pub detections: Vec<WireDetection>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct FixtureFile {
    pub entries: Vec<FixtureEntry>,
}

type Key = (String, Option<[u32; 4]>, [u32; 2]);

fn key(image: &str, window: Option<[u32; 4]>, target: [u32; 2]) -> Key {
    (
        image.to_owned(),
        window.map(|w| w.map(quantize_coord)),
        target,
    )
}

#[derive(Debug, Clone, Default)]
pub struct FixtureDetector {
    entries: HashMap<Key, Vec<Detection>>,
}

impl FixtureDetector {
    /// Fails if two entries land on the same quantized key or hold an
    /// invalid detection.
    pub fn from_file(file: FixtureFile) -> Result<Self, DetectorError> {
        let mut entries = HashMap::new();
        for (i, e) in file.entries.into_iter().enumerate() {
            let dets = WireResponse {
                detections: e.detections,
            }
            .into_detections(&e.image_path)
            .map_err(|m| DetectorError::Config(format!("fixture entry {i}: {m}")))?;
            let k = key(&e.image_path, e.window, e.target_size);
            if entries.insert(k, dets).is_some() {
                return Err(DetectorError::Config(format!(
                    "fixture entry {i} ({}, {:?}) duplicates an earlier key",
                    e.image_path, e.window
                )));
            }
        }
        Ok(Self { entries })
    }

    pub fn load(path: &Path) -> Result<Self, DetectorError> {
        let text = fs::read_to_string(path)
            .map_err(|e| DetectorError::Config(format!("{}: {e}", path.display())))?;
        let file: FixtureFile = serde_json::from_str(&text)
            .map_err(|e| DetectorError::Config(format!("{}: {e}", path.display())))?;
        Self::from_file(file)
    }

    /// Records `backend`'s answers to `requests` (with their floors) as a
    /// fixture file.
    pub fn record<D: Detector>(
        backend: &D,
        requests: &[DetectRequest],
    ) -> Result<FixtureFile, DetectorError> {
        let mut entries = Vec::with_capacity(requests.len());
        for r in requests {
            let dets = backend.detect(r)?;
            entries.push(FixtureEntry {
                image_path: r.image_ref.clone(),
                window: r.window,
                target_size: r.target_size,
                detections: WireResponse::from_detections(&dets).detections,
            });
        }
        Ok(FixtureFile { entries })
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

impl Detector for FixtureDetector {
    fn detect(&self, req: &DetectRequest) -> Result<Vec<Detection>, DetectorError> {
        req.validate()?;
        let dets = self
            .entries
            .get(&key(&req.image_ref, req.window, req.target_size))
            .ok_or_else(|| DetectorError::MissingFixture(Box::new(req.clone())))?;
        Ok(dets
            .iter()
            .filter(|d| d.score >= req.conf_floor)
            .cloned()
            .collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn entry(window: Option<[u32; 4]>, score: f64) -> FixtureEntry {
        FixtureEntry {
            image_path: "img".into(),
            window,
            target_size: [64, 64],
            detections: vec![WireDetection {
                bbox_xyxy: [1.0, 2.0, 3.0, 4.0],
                score,
                class_id: 0,
            }],
        }
    }

    #[test]
    fn replays_and_quantizes() {
        let f = FixtureDetector::from_file(FixtureFile {
            entries: vec![entry(None, 0.4), entry(Some([16, 16, 80, 80]), 0.9)],
        })
        .unwrap();
        let whole = DetectRequest::whole("img", [64, 64], 0.0);
        assert_eq!(f.detect(&whole).unwrap()[0].score, 0.4);
        let mut near = whole.clone();
        near.window = Some([17, 14, 79, 82]);
        assert_eq!(f.detect(&near).unwrap()[0].score, 0.9);
        near.window = Some([30, 14, 79, 82]);
        assert!(matches!(
            f.detect(&near),
            Err(DetectorError::MissingFixture(_))
        ));
        let floor = DetectRequest::whole("img", [64, 64], 0.5);
        assert!(f.detect(&floor).unwrap().is_empty());
    }

    #[test]
    fn duplicate_keys_rejected() {
        let r = FixtureDetector::from_file(FixtureFile {
            entries: vec![
                entry(Some([0, 0, 64, 64]), 0.1),
                entry(Some([2, 0, 64, 66]), 0.2),
            ],
        });
        assert!(matches!(r, Err(DetectorError::Config(_))));
    }
}
