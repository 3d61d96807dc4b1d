//! Finite-difference verification of the loss gradients over seeded random
//! box pairs.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::exec;
use crate::geometry::CenterSize;
use crate::losses::{
    combined_loss, combined_loss_with_normalizer, loss_gradient, loss_gradient_full,
    wiou_normalizer, BoxGrad, LossConfig,
};

/// Relative step: each parameter moves by `STEP_REL` times its length scale
/// (box width for `cx`/`w`, box height for `cy`/`h`).
pub const STEP_REL: f64 = 1e-5;
/// Denominator floor of the component-wise relative error.
pub const ABS_FLOOR: f64 = 1e-8;
/// Pass threshold on the maximum relative error.
pub const MAX_REL_ERROR: f64 = 1e-4;
/// Minimum distance (pixels) between any pair of edges that produce a kink.
const KINK_MARGIN: f64 = 0.05;

/// Central finite differences of `f` at the center-size parameters of
/// `pred`, using the per-parameter steps described on [`STEP_REL`].
pub fn finite_difference<F>(pred: &CenterSize, f: F) -> BoxGrad
where
    F: Fn(&CenterSize) -> f64,
{
    let base = pred.to_array();
    let scales = [base[2], base[3], base[2], base[3]];
    let mut g = [0.0; 4];
    for i in 0..4 {
        let h = STEP_REL * scales[i];
        let mut plus = base;
        let mut minus = base;
        plus[i] += h;
        minus[i] -= h;
        let bp = CenterSize::from_array(plus).expect("valid step");
        let bm = CenterSize::from_array(minus).expect("valid step");
        // Divide by the realized step, not the nominal one.
        g[i] = (f(&bp) - f(&bm)) / (plus[i] - minus[i]);
    }
    g
}

/// Component-wise `|a - n| / max(|a|, |n|, floor)`, maximized over components.
pub fn relative_error(analytic: &BoxGrad, numeric: &BoxGrad) -> f64 {
    analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| (a - n).abs() / a.abs().max(n.abs()).max(ABS_FLOOR))
        .fold(0.0, f64::max)
}

/// Whether the pair sits at least [`KINK_MARGIN`] away from every point where
/// the loss is not differentiable (coincident edges, touching overlaps).
pub fn is_non_degenerate(pred: &CenterSize, gt: &CenterSize) -> bool {
    let [px0, py0, px1, py1] = pred.corners();
    let [gx0, gy0, gx1, gy1] = gt.corners();
    let edges = [
        (px0, gx0),
        (px1, gx1),
        (py0, gy0),
        (py1, gy1),
        (px1, gx0),
        (px0, gx1),
        (py1, gy0),
        (py0, gy1),
    ];
    edges.iter().all(|(a, b)| (a - b).abs() > KINK_MARGIN) && pred != gt
}

/// Draws a random non-degenerate `(pred, gt)` pair with the prediction
/// within about one box size of the target.
pub fn random_pair<R: Rng>(rng: &mut R) -> (CenterSize, CenterSize) {
    loop {
        let gw = rng.random_range(4.0..64.0);
        let gh = rng.random_range(4.0..64.0);
        let gcx = rng.random_range(0.0..256.0);
        let gcy = rng.random_range(0.0..256.0);
        let pcx = gcx + rng.random_range(-1.0..1.0) * gw;
        let pcy = gcy + rng.random_range(-1.0..1.0) * gh;
        let pw = gw * rng.random_range(0.5..2.0);
        let ph = gh * rng.random_range(0.5..2.0);
        let (Ok(p), Ok(g)) = (
            CenterSize::new(pcx, pcy, pw, ph),
            CenterSize::new(gcx, gcy, gw, gh),
        ) else {
            continue;
        };
        if is_non_degenerate(&p, &g) {
            return (p, g);
        }
    }
}

/// Which analytic gradient is checked.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum GradientMode {
    /// Wise-IoU normalizer treated as a constant (the training gradient).
    #[default]
    Detached,
    /// Differentiates through the normalizer as well.
    Full,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradcheckReport {
    pub seed: u64,
    pub n_samples: usize,
    pub mode: GradientMode,
    pub lambda_nwd: f64,
    pub c_norm: f64,
    pub max_rel_error: f64,
    pub mean_rel_error: f64,
    pub worst_sample: usize,
    pub threshold: f64,
    pub passed: bool,
}

/// Relative error of the analytic gradient at one pair.
pub fn check_pair(pred: &CenterSize, gt: &CenterSize, cfg: &LossConfig, mode: GradientMode) -> f64 {
    match mode {
        GradientMode::Detached => {
            let norm = wiou_normalizer(pred, gt);
            let numeric =
                finite_difference(pred, |p| combined_loss_with_normalizer(p, gt, cfg, norm));
            relative_error(&loss_gradient(pred, gt, cfg), &numeric)
        }
        GradientMode::Full => {
            let numeric = finite_difference(pred, |p| combined_loss(p, gt, cfg));
            relative_error(&loss_gradient_full(pred, gt, cfg), &numeric)
        }
    }
}

/// Runs the check over `n_samples` pairs drawn from `seed`. Pairs are drawn
/// sequentially so the report does not depend on the worker count.
pub fn run(seed: u64, n_samples: usize, cfg: &LossConfig, mode: GradientMode) -> GradcheckReport {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let pairs: Vec<(CenterSize, CenterSize)> =
        (0..n_samples).map(|_| random_pair(&mut rng)).collect();
    let errors = exec::map(&pairs, |(p, g)| check_pair(p, g, cfg, mode));
    let (worst_sample, max_rel_error) = errors
        .iter()
        .copied()
        .enumerate()
        .fold((0, 0.0), |acc, (i, e)| if e > acc.1 { (i, e) } else { acc });
    let mean_rel_error = if errors.is_empty() {
        0.0
    } else {
        errors.iter().sum::<f64>() / errors.len() as f64
    };
    GradcheckReport {
        seed,
        n_samples,
        mode,
        lambda_nwd: cfg.lambda_nwd,
        c_norm: cfg.nwd.c_norm,
        max_rel_error,
        mean_rel_error,
        worst_sample,
        threshold: MAX_REL_ERROR,
        passed: max_rel_error <= MAX_REL_ERROR,
    }
}
