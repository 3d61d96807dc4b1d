//! Box regression losses: normalized Wasserstein distance, Wise-IoU (v1) and
//! their weighted combination, with analytic gradients with respect to the
//! predicted box parameters `(cx, cy, w, h)`. Boxes enter as [`CenterSize`];
//! convert a [`BBox`](crate::geometry::BBox) with `.into()`.
//!
//! The Wise-IoU normalizer `W_g² + H_g²` (smallest enclosing box) is detached
//! in [`loss_gradient`]: it is treated as a constant. [`loss_gradient_full`]
//! differentiates through it as well and exists for diagnostics.
//!
//! Where the IoU is not differentiable (a predicted edge coincides with the
//! matching ground-truth edge) the predicted edge is taken as the binding
//! intersection boundary, which is the derivative for that edge moving inward.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::exec;
use crate::geometry::{CenterSize, GaussianBox};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LossError {
    #[error("normalization constant must be positive and finite, got {0}")]
    BadNormalizer(f64),
    #[error("mixing weight must lie in [0, 1], got {0}")]
    BadLambda(f64),
}

/// Gradient with respect to `(cx, cy, w, h)`.
pub type BoxGrad = [f64; 4];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NwdConfig {
    /// The constant `C`, in pixels.
    pub c_norm: f64,
}

impl NwdConfig {
    pub const DEFAULT_C: f64 = 12.8;

    pub fn new(c_norm: f64) -> Result<Self, LossError> {
        if !(c_norm > 0.0 && c_norm.is_finite()) {
            return Err(LossError::BadNormalizer(c_norm));
        }
        Ok(Self { c_norm })
    }
}

impl Default for NwdConfig {
    fn default() -> Self {
        Self {
            c_norm: Self::DEFAULT_C,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    /// Weight of the NWD term; the Wise-IoU term gets `1 - lambda_nwd`.
    pub lambda_nwd: f64,
    pub nwd: NwdConfig,
}

impl LossConfig {
    pub fn new(lambda_nwd: f64, c_norm: f64) -> Result<Self, LossError> {
        if !(0.0..=1.0).contains(&lambda_nwd) {
            return Err(LossError::BadLambda(lambda_nwd));
        }
        Ok(Self {
            lambda_nwd,
            nwd: NwdConfig::new(c_norm)?,
        })
    }

    pub fn validate(&self) -> Result<(), LossError> {
        Self::new(self.lambda_nwd, self.nwd.c_norm).map(|_| ())
    }
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            lambda_nwd: 0.5,
            nwd: NwdConfig::default(),
        }
    }
}

/// Intermediate quantities of the Wise-IoU loss.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WiouTerms {
    pub l_iou: f64,
    pub r_wiou: f64,
    pub wg: f64,
    pub hg: f64,
    pub center_dist_sq: f64,
}

/// Squared 2-Wasserstein distance between diagonal Gaussians.
pub fn wasserstein2_sq(ga: &GaussianBox, gb: &GaussianBox) -> f64 {
    let dx = ga.mean[0] - gb.mean[0];
    let dy = ga.mean[1] - gb.mean[1];
    let sx = ga.var_x.sqrt() - gb.var_x.sqrt();
    let sy = ga.var_y.sqrt() - gb.var_y.sqrt();
    dx * dx + dy * dy + sx * sx + sy * sy
}

/// Normalized Wasserstein distance `exp(-W₂ / C)`, in `(0, 1]`.
pub fn nwd(a: &CenterSize, b: &CenterSize, cfg: &NwdConfig) -> f64 {
    (-wasserstein2_sq(&a.to_gaussian(), &b.to_gaussian()).sqrt() / cfg.c_norm).exp()
}

/// Overlap length of `[p0, p1]` and `[g0, g1]`, clamped at zero.
#[inline]
fn overlap(p0: f64, p1: f64, g0: f64, g1: f64) -> f64 {
    (p1.min(g1) - p0.max(g0)).max(0.0)
}

fn iou_cs(a: &CenterSize, b: &CenterSize) -> f64 {
    let [ax0, ay0, ax1, ay1] = a.corners();
    let [bx0, by0, bx1, by1] = b.corners();
    let inter = overlap(ax0, ax1, bx0, bx1) * overlap(ay0, ay1, by0, by1);
    if inter == 0.0 {
        return 0.0;
    }
    // Areas from the same corners as the overlap, so identical boxes give exactly 1.
    let area_a = (ax1 - ax0) * (ay1 - ay0);
    let area_b = (bx1 - bx0) * (by1 - by0);
    (inter / ((area_a + area_b) - inter)).min(1.0)
}

/// Width and height of the smallest box enclosing both inputs.
fn enclosing_dims(a: &CenterSize, b: &CenterSize) -> (f64, f64) {
    let [ax0, ay0, ax1, ay1] = a.corners();
    let [bx0, by0, bx1, by1] = b.corners();
    (ax1.max(bx1) - ax0.min(bx0), ay1.max(by1) - ay0.min(by0))
}

/// `W_g² + H_g²` of the smallest box enclosing both inputs.
pub fn wiou_normalizer(pred: &CenterSize, gt: &CenterSize) -> f64 {
    let (wg, hg) = enclosing_dims(pred, gt);
    wg * wg + hg * hg
}

/// Wise-IoU v1 loss `R_WIoU · (1 - IoU)`.
pub fn wiou_loss(pred: &CenterSize, gt: &CenterSize) -> (f64, WiouTerms) {
    let (wg, hg) = enclosing_dims(pred, gt);
    wiou_with_normalizer(pred, gt, wg * wg + hg * hg, wg, hg)
}

fn wiou_with_normalizer(
    pred: &CenterSize,
    gt: &CenterSize,
    norm: f64,
    wg: f64,
    hg: f64,
) -> (f64, WiouTerms) {
    let dx = pred.cx() - gt.cx();
    let dy = pred.cy() - gt.cy();
    let center_dist_sq = dx * dx + dy * dy;
    let r_wiou = (center_dist_sq / norm).exp();
    let l_iou = 1.0 - iou_cs(pred, gt);
    (
        r_wiou * l_iou,
        WiouTerms {
            l_iou,
            r_wiou,
            wg,
            hg,
            center_dist_sq,
        },
    )
}

/// `(1 - λ)·L_WIoU + λ·(1 - NWD)`.
pub fn combined_loss(pred: &CenterSize, gt: &CenterSize, cfg: &LossConfig) -> f64 {
    let (lw, _) = wiou_loss(pred, gt);
    mix(lw, nwd(pred, gt, &cfg.nwd), cfg.lambda_nwd)
}

/// [`combined_loss`] with the Wise-IoU normalizer pinned to `norm` instead of
/// being recomputed from the enclosing box. Finite-difference checks of
/// [`loss_gradient`] evaluate this with `norm` frozen at the base point.
pub fn combined_loss_with_normalizer(
    pred: &CenterSize,
    gt: &CenterSize,
    cfg: &LossConfig,
    norm: f64,
) -> f64 {
    let (wg, hg) = enclosing_dims(pred, gt);
    let (lw, _) = wiou_with_normalizer(pred, gt, norm, wg, hg);
    mix(lw, nwd(pred, gt, &cfg.nwd), cfg.lambda_nwd)
}

#[inline]
fn mix(l_wiou: f64, nwd: f64, lambda: f64) -> f64 {
    (1.0 - lambda) * l_wiou + lambda * (1.0 - nwd)
}

/// Mean combined loss over a batch of `(pred, gt)` pairs, and the per-pair
/// gradients of that mean. An empty batch has loss 0.
pub fn batch_loss(pairs: &[(CenterSize, CenterSize)], cfg: &LossConfig) -> (f64, Vec<BoxGrad>) {
    if pairs.is_empty() {
        return (0.0, Vec::new());
    }
    let n = pairs.len() as f64;
    let per: Vec<(f64, BoxGrad)> = exec::map(pairs, |(p, g)| {
        (combined_loss(p, g, cfg), loss_gradient(p, g, cfg))
    });
    let loss = per.iter().map(|(l, _)| l).sum::<f64>() / n;
    let grads = per.into_iter().map(|(_, g)| g.map(|v| v / n)).collect();
    (loss, grads)
}

/// Overlap length along one axis and its derivatives.
struct AxisOverlap {
    len: f64,
    /// d len / d center.
    d_center: f64,
    /// d len / d size.
    d_size: f64,
}

fn axis_overlap(p0: f64, p1: f64, g0: f64, g1: f64) -> AxisOverlap {
    let raw = p1.min(g1) - p0.max(g0);
    if raw <= 0.0 {
        return AxisOverlap {
            len: 0.0,
            d_center: 0.0,
            d_size: 0.0,
        };
    }
    // Ties make the predicted edge the binding one.
    let hi = if p1 <= g1 { 1.0 } else { 0.0 };
    let lo = if p0 >= g0 { 1.0 } else { 0.0 };
    // p1 = c + s/2, p0 = c - s/2.
    AxisOverlap {
        len: raw,
        d_center: hi - lo,
        d_size: 0.5 * (hi + lo),
    }
}

/// Gradient of IoU with respect to the predicted `(cx, cy, w, h)`.
fn iou_gradient(pred: &CenterSize, gt: &CenterSize) -> BoxGrad {
    let [px0, py0, px1, py1] = pred.corners();
    let [gx0, gy0, gx1, gy1] = gt.corners();
    let ox = axis_overlap(px0, px1, gx0, gx1);
    let oy = axis_overlap(py0, py1, gy0, gy1);
    let inter = ox.len * oy.len;
    if inter == 0.0 {
        return [0.0; 4];
    }
    let union = pred.area() + gt.area() - inter;
    let d_inter = [
        oy.len * ox.d_center,
        ox.len * oy.d_center,
        oy.len * ox.d_size,
        ox.len * oy.d_size,
    ];
    let d_area = [0.0, 0.0, pred.h(), pred.w()];
    let u2 = union * union;
    let mut g = [0.0; 4];
    for i in 0..4 {
        let d_union = d_area[i] - d_inter[i];
        g[i] = (d_inter[i] * union - inter * d_union) / u2;
    }
    g
}

fn nwd_term_gradient(pred: &CenterSize, gt: &CenterSize, cfg: &NwdConfig) -> BoxGrad {
    let dx = pred.cx() - gt.cx();
    let dy = pred.cy() - gt.cy();
    let dw = 0.5 * (pred.w() - gt.w());
    let dh = 0.5 * (pred.h() - gt.h());
    let dist = (dx * dx + dy * dy + dw * dw + dh * dh).sqrt();
    if dist == 0.0 {
        // Minimum of 1 - exp(-d/C); zero is the subgradient at the kink.
        return [0.0; 4];
    }
    let sim = (-dist / cfg.c_norm).exp();
    // d(1 - e^{-d/C}) = e^{-d/C}/C · dd, with dd/dw = dw/(2d).
    let k = sim / (cfg.c_norm * dist);
    [k * dx, k * dy, 0.5 * k * dw, 0.5 * k * dh]
}

/// (d extent / d center, d extent / d size) of the enclosing interval.
fn enclosing_axis_gradient(p0: f64, p1: f64, g0: f64, g1: f64) -> (f64, f64) {
    // Ties make the predicted edge the binding one.
    let hi = if p1 >= g1 { 1.0 } else { 0.0 };
    let lo = if p0 <= g0 { 1.0 } else { 0.0 };
    (hi - lo, 0.5 * (hi + lo))
}

fn wiou_gradient(pred: &CenterSize, gt: &CenterSize, detach_normalizer: bool) -> BoxGrad {
    let (_, t) = wiou_loss(pred, gt);
    let norm = t.wg * t.wg + t.hg * t.hg;
    let dx = pred.cx() - gt.cx();
    let dy = pred.cy() - gt.cy();
    let d_iou = iou_gradient(pred, gt);

    let mut d_r = [
        t.r_wiou * 2.0 * dx / norm,
        t.r_wiou * 2.0 * dy / norm,
        0.0,
        0.0,
    ];
    if !detach_normalizer {
        let [px0, py0, px1, py1] = pred.corners();
        let [gx0, gy0, gx1, gy1] = gt.corners();
        // dR/dnorm = -R·dist²/norm², dnorm = 2·Wg·dWg + 2·Hg·dHg.
        let k = -t.r_wiou * t.center_dist_sq / (norm * norm);
        let gx = enclosing_axis_gradient(px0, px1, gx0, gx1);
        let gy = enclosing_axis_gradient(py0, py1, gy0, gy1);
        d_r[0] += k * 2.0 * t.wg * gx.0;
        d_r[1] += k * 2.0 * t.hg * gy.0;
        d_r[2] += k * 2.0 * t.wg * gx.1;
        d_r[3] += k * 2.0 * t.hg * gy.1;
    }
    let mut g = [0.0; 4];
    for i in 0..4 {
        g[i] = d_r[i] * t.l_iou - t.r_wiou * d_iou[i];
    }
    g
}

/// Analytic gradient of [`combined_loss`] with respect to the predicted
/// `(cx, cy, w, h)`, with the Wise-IoU normalizer detached.
pub fn loss_gradient(pred: &CenterSize, gt: &CenterSize, cfg: &LossConfig) -> BoxGrad {
    combine_gradients(pred, gt, cfg, true)
}

/// Like [`loss_gradient`] but also differentiates through `W_g² + H_g²`.
pub fn loss_gradient_full(pred: &CenterSize, gt: &CenterSize, cfg: &LossConfig) -> BoxGrad {
    combine_gradients(pred, gt, cfg, false)
}

fn combine_gradients(
    pred: &CenterSize,
    gt: &CenterSize,
    cfg: &LossConfig,
    detach: bool,
) -> BoxGrad {
    let lam = cfg.lambda_nwd;
    let gw = wiou_gradient(pred, gt, detach);
    let gn = nwd_term_gradient(pred, gt, &cfg.nwd);
    let mut g = [0.0; 4];
    for i in 0..4 {
        g[i] = (1.0 - lam) * gw[i] + lam * gn[i];
    }
    g
}

#[cfg(test)]
mod tests {
    use super::*;

    use crate::geometry::{iou, BBox};

    fn c(x0: f64, y0: f64, x1: f64, y1: f64) -> CenterSize {
        BBox::from_corners(x0, y0, x1, y1).unwrap().into()
    }

    fn cs(cx: f64, cy: f64, w: f64, h: f64) -> CenterSize {
        CenterSize::new(cx, cy, w, h).unwrap()
    }

    #[test]
    fn config_validation() {
        assert!(NwdConfig::new(0.0).is_err());
        assert!(NwdConfig::new(f64::INFINITY).is_err());
        assert!(LossConfig::new(1.5, 12.8).is_err());
        assert!(LossConfig::new(-0.1, 12.8).is_err());
        let d = LossConfig::default();
        assert_eq!((d.lambda_nwd, d.nwd.c_norm), (0.5, 12.8));
    }

    #[test]
    fn wasserstein_examples() {
        let a = cs(0.0, 0.0, 2.0, 2.0).to_gaussian();
        assert_eq!(wasserstein2_sq(&a, &a), 0.0);
        let b = cs(3.0, 4.0, 2.0, 2.0).to_gaussian();
        assert_eq!(wasserstein2_sq(&a, &b), 25.0);
        let wide = cs(0.0, 0.0, 6.0, 2.0).to_gaussian();
        assert_eq!(wasserstein2_sq(&a, &wide), 4.0);
    }

    #[test]
    fn nwd_examples() {
        let a = cs(0.0, 0.0, 2.0, 2.0);
        let cfg = NwdConfig::new(5.0).unwrap();
        assert_eq!(nwd(&a, &a, &cfg), 1.0);
        let b = cs(3.0, 4.0, 2.0, 2.0);
        assert!((nwd(&a, &b, &cfg) - (-1.0f64).exp()).abs() <= 1e-12);
        let mut prev = 1.0;
        for k in 1..50 {
            let v = nwd(&a, &cs(k as f64, 0.0, 2.0, 2.0), &cfg);
            assert!(v < prev);
            prev = v;
        }
        assert!(prev < 1e-4);
    }

    #[test]
    fn wiou_examples() {
        let a = c(0.0, 0.0, 2.0, 2.0);
        let (l, t) = wiou_loss(&a, &a);
        assert_eq!((l, t.r_wiou), (0.0, 1.0));

        let (l, t) = wiou_loss(&a, &c(1.0, 0.0, 3.0, 2.0));
        assert!((t.l_iou - 2.0 / 3.0).abs() < 1e-15);
        assert_eq!((t.center_dist_sq, t.wg, t.hg), (1.0, 3.0, 2.0));
        assert!((t.r_wiou - 1.079_959).abs() < 1e-6);
        assert!((l - 0.719_972).abs() < 1e-6);

        let (l, t) = wiou_loss(&cs(5.0, 5.0, 2.0, 2.0), &cs(5.0, 5.0, 4.0, 6.0));
        assert_eq!(t.r_wiou, 1.0);
        assert_eq!(l, t.l_iou);
    }

    #[test]
    fn combined_degenerate_mixtures() {
        let p = cs(10.0, 12.0, 8.0, 6.0);
        let g = cs(11.5, 10.0, 7.0, 9.0);
        assert_eq!(combined_loss(&p, &p, &LossConfig::default()), 0.0);
        let l0 = LossConfig::new(0.0, 12.8).unwrap();
        assert_eq!(combined_loss(&p, &g, &l0), wiou_loss(&p, &g).0);
        let l1 = LossConfig::new(1.0, 12.8).unwrap();
        assert_eq!(combined_loss(&p, &g, &l1), 1.0 - nwd(&p, &g, &l1.nwd));
    }

    #[test]
    fn nwd_center_gradient_vanishes_at_match() {
        let p = cs(10.0, 12.0, 8.0, 6.0);
        let l1 = LossConfig::new(1.0, 12.8).unwrap();
        let g = loss_gradient(&p, &p, &l1);
        assert_eq!((g[0], g[1]), (0.0, 0.0));
    }

    #[test]
    fn frozen_normalizer_matches_live_value_at_base_point() {
        let p = cs(10.0, 12.0, 8.0, 6.0);
        let g = cs(11.5, 10.0, 7.0, 9.0);
        let cfg = LossConfig::default();
        let norm = wiou_normalizer(&p, &g);
        assert_eq!(
            combined_loss_with_normalizer(&p, &g, &cfg, norm),
            combined_loss(&p, &g, &cfg)
        );
    }

    #[test]
    fn corner_aligned_gradient_uses_inward_derivative() {
        // Right edges coincide at x = 2.
        let p = c(0.0, 0.0, 2.0, 2.0);
        let g = c(1.0, 0.0, 2.0, 2.0);
        let cfg = LossConfig::new(0.0, 12.8).unwrap();
        let grad = loss_gradient(&p, &g, &cfg);
        // Left-sided difference in w: the right edge moves inward.
        let h = 1e-6;
        let base = combined_loss_with_normalizer(&p, &g, &cfg, wiou_normalizer(&p, &g));
        let shrunk = cs(p.cx(), p.cy(), p.w() - h, p.h());
        let left =
            (base - combined_loss_with_normalizer(&shrunk, &g, &cfg, wiou_normalizer(&p, &g))) / h;
        assert!((grad[2] - left).abs() < 1e-5, "{} vs {}", grad[2], left);
    }

    #[test]
    fn iou_matches_geometry() {
        let a = c(0.5, 1.0, 7.25, 9.0);
        let b = c(3.0, -2.0, 11.0, 4.5);
        assert_eq!(
            iou_cs(&a, &b),
            iou(&a.to_bbox().unwrap(), &b.to_bbox().unwrap())
        );
    }

    #[test]
    fn batch_loss_is_mean() {
        let cfg = LossConfig::default();
        let pairs = vec![
            (cs(10.0, 10.0, 8.0, 6.0), cs(12.0, 9.0, 7.0, 7.0)),
            (cs(50.0, 40.0, 20.0, 10.0), cs(45.0, 41.0, 22.0, 12.0)),
        ];
        let (l, g) = batch_loss(&pairs, &cfg);
        let want = (combined_loss(&pairs[0].0, &pairs[0].1, &cfg)
            + combined_loss(&pairs[1].0, &pairs[1].1, &cfg))
            / 2.0;
        assert!((l - want).abs() < 1e-15);
        let g0 = loss_gradient(&pairs[0].0, &pairs[0].1, &cfg);
        assert_eq!(g[0], g0.map(|v| v / 2.0));
        assert_eq!(batch_loss(&[], &cfg).0, 0.0);
    }
}
