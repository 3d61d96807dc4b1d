#![allow(dead_code)]

use std::path::PathBuf;

use serde_json::Value;
use uavdet_core::geometry::{BBox, CenterSize};
use uavdet_core::postprocess::{Detection, Source};
use uavdet_core::tensor::FeatureMap;

pub fn data(rel: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR"))
        .join("tests/data")
        .join(rel)
}

pub fn json(rel: &str) -> Value {
    let text = std::fs::read_to_string(data(rel)).unwrap();
    serde_json::from_str(&text).unwrap()
}

pub fn floats(v: &Value) -> Vec<f64> {
    v.as_array()
        .unwrap()
        .iter()
        .map(|x| x.as_f64().unwrap())
        .collect()
}

/// `{"shape": [c, h, w], "data": [...]}`.
pub fn map_from(v: &Value) -> FeatureMap {
    let s: Vec<usize> = v["shape"]
        .as_array()
        .unwrap()
        .iter()
        .map(|x| x.as_u64().unwrap() as usize)
        .collect();
    FeatureMap::new(s[0], s[1], s[2], floats(&v["data"])).unwrap()
}

pub fn cs(v: &Value) -> CenterSize {
    let p = floats(v);
    CenterSize::new(p[0], p[1], p[2], p[3]).unwrap()
}

pub fn bbox(v: &Value) -> BBox {
    let p = floats(v);
    BBox::from_corners(p[0], p[1], p[2], p[3]).unwrap()
}

pub fn det(image: &str, b: [f64; 4], score: f64, class_id: u32) -> Detection {
    Detection::new(
        image,
        BBox::from_corners(b[0], b[1], b[2], b[3]).unwrap(),
        score,
        class_id,
        Source::Initial,
    )
    .unwrap()
}

pub fn rel_close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol * a.abs().max(b.abs()).max(1.0)
}
