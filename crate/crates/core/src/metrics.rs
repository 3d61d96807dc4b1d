//! Detection evaluation: greedy matching, average precision, precision and
//! recall at a score cut.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::exec;
use crate::geometry::{iou, BBox};
use crate::postprocess::Detection;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruthObject {
    pub image_id: String,
    #[serde(rename = "bbox_xyxy")]
    pub bbox: BBox,
    pub class_id: u32,
}

#[derive(Debug, Error, PartialEq)]
pub enum MetricsError {
    #[error("detections reference unknown images: {}", .0.join(", "))]
    UnknownDetectionImages(Vec<String>),
    #[error("ground truth references unknown images: {}", .0.join(", "))]
    UnknownGroundTruthImages(Vec<String>),
    #[error("invalid eval config: {0}")]
    Config(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ApMethod {
    /// Mean of the precision envelope at recall 0, 0.01, ..., 1.
    #[default]
    Point101,
    /// Exact area under the precision envelope.
    AllPoint,
}

/// Score descending, ties by input position.
fn score_order(dets: &[&Detection]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&a, &b| dets[b].score.total_cmp(&dets[a].score).then(a.cmp(&b)));
    order
}

/// TP flag for every detection, in input order. Each detection, taken by
/// descending score, claims the highest-IoU unclaimed ground truth of its
/// image and class with IoU at least `iou_thr`.
pub fn match_detections(dets: &[Detection], gts: &[GroundTruthObject], iou_thr: f64) -> Vec<bool> {
    let refs: Vec<&Detection> = dets.iter().collect();
    let gt_refs: Vec<&GroundTruthObject> = gts.iter().collect();
    match_refs(&refs, &gt_refs, iou_thr)
}

fn match_refs(dets: &[&Detection], gts: &[&GroundTruthObject], iou_thr: f64) -> Vec<bool> {
    let mut pool: BTreeMap<(&str, u32), Vec<usize>> = BTreeMap::new();
    for (j, g) in gts.iter().enumerate() {
        pool.entry((g.image_id.as_str(), g.class_id))
            .or_default()
            .push(j);
    }
    let mut taken = vec![false; gts.len()];
    let mut tp = vec![false; dets.len()];
    for i in score_order(dets) {
        let d = dets[i];
        let Some(cands) = pool.get(&(d.image_id.as_str(), d.class_id)) else {
            continue;
        };
        let mut best: Option<(usize, f64)> = None;
        for &j in cands.iter().filter(|&&j| !taken[j]) {
            let o = iou(&d.bbox, &gts[j].bbox);
            if o >= iou_thr && best.is_none_or(|(_, b)| o > b) {
                best = Some((j, o));
            }
        }
        if let Some((j, _)) = best {
            taken[j] = true;
            tp[i] = true;
        }
    }
    tp
}

/// Average precision of `(score, is_tp)` pairs against `n_gt` ground truths.
/// `None` when there is nothing to score: no ground truth and no detections.
pub fn average_precision(flags: &[(f64, bool)], n_gt: usize, method: ApMethod) -> Option<f64> {
    if n_gt == 0 {
        return (!flags.is_empty()).then_some(0.0);
    }
    let mut order: Vec<usize> = (0..flags.len()).collect();
    order.sort_by(|&a, &b| flags[b].0.total_cmp(&flags[a].0).then(a.cmp(&b)));
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut recall = Vec::with_capacity(flags.len());
    let mut precision = Vec::with_capacity(flags.len());
    for i in order {
        if flags[i].1 {
            tp += 1;
        } else {
            fp += 1;
        }
        recall.push(tp as f64 / n_gt as f64);
        precision.push(tp as f64 / (tp + fp) as f64);
    }
    for k in (0..precision.len().saturating_sub(1)).rev() {
        precision[k] = precision[k].max(precision[k + 1]);
    }
    let ap = match method {
        ApMethod::Point101 => {
            let mut sum = 0.0;
            let mut k = 0;
            for step in 0..=100 {
                let r = step as f64 / 100.0;
                while k < recall.len() && recall[k] < r {
                    k += 1;
                }
                if k < recall.len() {
                    sum += precision[k];
                }
            }
            sum / 101.0
        }
        ApMethod::AllPoint => {
            let mut prev = 0.0;
            let mut sum = 0.0;
            for (r, p) in recall.iter().zip(&precision) {
                sum += (r - prev) * p;
                prev = *r;
            }
            sum
        }
    };
    Some(ap)
}

/// `0.50, 0.55, ..., 0.95`.
pub fn coco_thresholds() -> Vec<f64> {
    (0..10).map(|i| (50 + 5 * i) as f64 / 100.0).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub iou_thresholds: Vec<f64>,
    /// Detections at or above this score count toward precision and recall.
    pub score_cut: f64,
    pub ap_method: ApMethod,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            iou_thresholds: coco_thresholds(),
            score_cut: 0.25,
            ap_method: ApMethod::Point101,
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<(), MetricsError> {
        if self.iou_thresholds.is_empty() {
            return Err(MetricsError::Config("no IoU thresholds".into()));
        }
        if let Some(t) = self
            .iou_thresholds
            .iter()
            .find(|t| !(**t > 0.0 && **t <= 1.0))
        {
            return Err(MetricsError::Config(format!(
                "IoU threshold {t} outside (0, 1]"
            )));
        }
        if !self.iou_thresholds.contains(&0.5) {
            return Err(MetricsError::Config(
                "IoU thresholds must include 0.5".into(),
            ));
        }
        if !(0.0..=1.0).contains(&self.score_cut) {
            return Err(MetricsError::Config(format!(
                "score_cut {} outside [0, 1]",
                self.score_cut
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassAp {
    pub class_id: u32,
    pub n_gt: usize,
    pub n_det: usize,
    /// One value per IoU threshold.
    pub ap: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    pub iou_thresholds: Vec<f64>,
    pub score_cut: f64,
    pub ap_method: ApMethod,
    pub per_class: Vec<ClassAp>,
    pub precision: f64,
    pub recall: f64,
    pub map50: f64,
    pub map50_95: f64,
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
    pub n_gt: usize,
}

fn unknown<'a>(ids: impl Iterator<Item = &'a str>, known: &BTreeSet<&str>) -> Vec<String> {
    ids.filter(|id| !known.contains(id))
        .collect::<BTreeSet<_>>()
        .into_iter()
        .map(str::to_owned)
        .collect()
}

/// Evaluates `dets` against `gts` over the images named in `images`.
pub fn evaluate(
    dets: &[Detection],
    gts: &[GroundTruthObject],
    images: &[String],
    cfg: &EvalConfig,
) -> Result<EvalResult, MetricsError> {
    cfg.validate()?;
    let known: BTreeSet<&str> = images.iter().map(String::as_str).collect();
    let bad = unknown(dets.iter().map(|d| d.image_id.as_str()), &known);
    if !bad.is_empty() {
        return Err(MetricsError::UnknownDetectionImages(bad));
    }
    let bad = unknown(gts.iter().map(|g| g.image_id.as_str()), &known);
    if !bad.is_empty() {
        return Err(MetricsError::UnknownGroundTruthImages(bad));
    }

    let mut by_class: BTreeMap<u32, (Vec<&Detection>, Vec<&GroundTruthObject>)> = BTreeMap::new();
    for d in dets {
        by_class.entry(d.class_id).or_default().0.push(d);
    }
    for g in gts {
        by_class.entry(g.class_id).or_default().1.push(g);
    }
    let classes: Vec<(u32, Vec<&Detection>, Vec<&GroundTruthObject>)> =
        by_class.into_iter().map(|(c, (d, g))| (c, d, g)).collect();
    let jobs: Vec<(usize, f64)> = (0..classes.len())
        .flat_map(|c| cfg.iou_thresholds.iter().map(move |&t| (c, t)))
        .collect();
    let aps = exec::map(&jobs, |&(c, t)| {
        let (_, cd, cg) = &classes[c];
        let tp = match_refs(cd, cg, t);
        let flags: Vec<(f64, bool)> = cd.iter().zip(tp).map(|(d, f)| (d.score, f)).collect();
        average_precision(&flags, cg.len(), cfg.ap_method)
            .expect("class has detections or ground truth")
    });
    let nt = cfg.iou_thresholds.len();
    let i50 = cfg
        .iou_thresholds
        .iter()
        .position(|&t| t == 0.5)
        .expect("validated");
    let per_class: Vec<ClassAp> = classes
        .iter()
        .enumerate()
        .map(|(c, (id, cd, cg))| ClassAp {
            class_id: *id,
            n_gt: cg.len(),
            n_det: cd.len(),
            ap: aps[c * nt..(c + 1) * nt].to_vec(),
        })
        .collect();
    let mean = |v: &mut dyn Iterator<Item = f64>| {
        let (s, n) = v.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
        if n == 0 {
            0.0
        } else {
            s / n as f64
        }
    };
    let map50 = mean(&mut per_class.iter().map(|c| c.ap[i50]));
    let map50_95 = mean(
        &mut per_class
            .iter()
            .map(|c| c.ap.iter().sum::<f64>() / nt as f64),
    );

    let kept: Vec<&Detection> = dets.iter().filter(|d| d.score >= cfg.score_cut).collect();
    let gt_refs: Vec<&GroundTruthObject> = gts.iter().collect();
    let tp = match_refs(&kept, &gt_refs, 0.5)
        .into_iter()
        .filter(|&f| f)
        .count();
    let fp = kept.len() - tp;
    Ok(EvalResult {
        iou_thresholds: cfg.iou_thresholds.clone(),
        score_cut: cfg.score_cut,
        ap_method: cfg.ap_method,
        per_class,
        precision: if kept.is_empty() {
            0.0
        } else {
            tp as f64 / kept.len() as f64
        },
        recall: if gts.is_empty() {
            0.0
        } else {
            tp as f64 / gts.len() as f64
        },
        map50,
        map50_95,
        tp,
        fp,
        fn_: gts.len() - tp,
        n_gt: gts.len(),
    })
}

/// Plain-text table with one row per result, values in percent.
pub fn render_table(rows: &[(&str, &EvalResult)]) -> String {
    let width = rows
        .iter()
        .map(|(n, _)| n.len())
        .chain([5])
        .max()
        .unwrap_or(5);
    let mut out = String::new();
    let _ = writeln!(
        out,
        "{:<width$}  {:>9}  {:>6}  {:>6}  {:>9}  {:>6}  {:>6}  {:>6}",
        "Model", "Precision", "Recall", "mAP50", "mAP50-95", "TP", "FP", "FN"
    );
    for (name, r) in rows {
        let _ = writeln!(
            out,
            "{:<width$}  {:>9.1}  {:>6.1}  {:>6.1}  {:>9.1}  {:>6}  {:>6}  {:>6}",
            name,
            100.0 * r.precision,
            100.0 * r.recall,
            100.0 * r.map50,
            100.0 * r.map50_95,
            r.tp,
            r.fp,
            r.fn_
        );
    }
    if let [(_, a), (_, b)] = rows {
        let _ = writeln!(
            out,
            "{:<width$}  {:>+9.1}  {:>+6.1}  {:>+6.1}  {:>+9.1}",
            "delta",
            100.0 * (b.precision - a.precision),
            100.0 * (b.recall - a.recall),
            100.0 * (b.map50 - a.map50),
            100.0 * (b.map50_95 - a.map50_95),
        );
    }
    out
}
