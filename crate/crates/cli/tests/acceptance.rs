//! The nine acceptance criteria, one PASS/FAIL line each.

use std::collections::BTreeSet;
use std::panic::{self, AssertUnwindSafe};
use std::path::Path;
use std::process::{Command, ExitCode};
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use uavdet_core::detector::{SyntheticDetector, SyntheticSceneModel};
use uavdet_core::geometry::{BBox, CenterSize};
use uavdet_core::gradcheck::{self, random_pair, GradientMode};
use uavdet_core::ingest::{load_ground_truth, plan_patches, DatasetManifest, PatchPlan};
use uavdet_core::ldconv::{ldconv_forward, output_len, LdConvSpec, OffsetField};
use uavdet_core::losses::{
    combined_loss_with_normalizer, loss_gradient, nwd, wiou_loss, wiou_normalizer, LossConfig,
    NwdConfig,
};
use uavdet_core::metrics::{average_precision, evaluate, ApMethod, EvalConfig};
use uavdet_core::postprocess::{nms_indices, Detection, Source};
use uavdet_core::refine::{audit, refine_dataset, Disposition, RefineConfig};
use uavdet_core::ssff::{ssff_forward, SsffConfig};
use uavdet_core::tensor::{
    conv2d, gaussian_kernel, gaussian_smooth, gaussian_smooth_separable, FeatureMap,
};

type Outcome = Result<String, String>;

fn ensure(ok: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if ok {
        Ok(())
    } else {
        Err(msg())
    }
}

fn suite_dir() -> &'static Path {
    Path::new(concat!(
        env!("CARGO_MANIFEST_DIR"),
        "/../../fixtures/synthetic"
    ))
}

fn random_map(rng: &mut ChaCha8Rng, c: usize, h: usize, w: usize) -> FeatureMap {
    FeatureMap::new(
        c,
        h,
        w,
        (0..c * h * w)
            .map(|_| rng.random_range(-1.0..1.0))
            .collect(),
    )
    .unwrap()
}

fn max_abs_diff(a: &FeatureMap, b: &FeatureMap) -> f64 {
    a.data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

fn gradients() -> Outcome {
    let cfg = LossConfig::new(0.5, 12.8).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut worst = 0.0f64;
    for _ in 0..1000 {
        let (p, g) = random_pair(&mut rng);
        let norm = wiou_normalizer(&p, &g);
        let a = p.to_array();
        let analytic = loss_gradient(&p, &g, &cfg);
        let scale = [a[2], a[3], a[2], a[3]];
        for i in 0..4 {
            let h = 1e-5 * scale[i];
            let (mut up, mut dn) = (a, a);
            up[i] += h;
            dn[i] -= h;
            let f = |v: [f64; 4]| {
                combined_loss_with_normalizer(&CenterSize::from_array(v).unwrap(), &g, &cfg, norm)
            };
            let numeric = (f(up) - f(dn)) / (up[i] - dn[i]);
            let rel =
                (analytic[i] - numeric).abs() / analytic[i].abs().max(numeric.abs()).max(1e-8);
            worst = worst.max(rel);
        }
    }
    ensure(worst <= 1e-4, || format!("max relative error {worst:e}"))?;
    let report = gradcheck::run(0, 1000, &cfg, GradientMode::Detached);
    ensure(report.passed, || {
        format!("library check: {:e}", report.max_rel_error)
    })?;
    Ok(format!("1000 pairs, max rel err {worst:.2e}"))
}

fn spot_values() -> Outcome {
    let a = CenterSize::new(10.0, 10.0, 6.0, 8.0).unwrap();
    let b = CenterSize::new(13.0, 14.0, 6.0, 8.0).unwrap();
    let c12 = NwdConfig::new(12.8).unwrap();
    ensure(nwd(&a, &a, &c12) == 1.0, || "nwd identity".into())?;
    let v = nwd(&a, &b, &NwdConfig::new(5.0).unwrap());
    ensure((v - (-1.0f64).exp()).abs() <= 1e-12, || {
        format!("nwd offset (3,4): {v}")
    })?;
    let p = BBox::from_corners(0.0, 0.0, 2.0, 2.0)
        .unwrap()
        .center_size();
    let q = BBox::from_corners(1.0, 0.0, 3.0, 2.0)
        .unwrap()
        .center_size();
    let (l, _) = wiou_loss(
        &CenterSize::from_array(p).unwrap(),
        &CenterSize::from_array(q).unwrap(),
    );
    let want = 2.0 / 3.0 * (1.0f64 / 13.0).exp();
    ensure((l - want).abs() <= 1e-9, || format!("wiou {l} vs {want}"))?;
    Ok(format!("wiou {l:.12}"))
}

fn ldconv_equivalence() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut worst = 0.0f64;
    for n in [4usize, 9, 16, 25] {
        let k = n.isqrt();
        for trial in 0..20 {
            let (c, o) = (rng.random_range(1..5), rng.random_range(1..5));
            let (h, w) = (rng.random_range(k..16), rng.random_range(k..16));
            let stride = 1 + trial % 2;
            let x = random_map(&mut rng, c, h, w);
            let spec = LdConvSpec::random(rng.random(), n, c, o, stride).unwrap();
            let off = OffsetField::zeros(n, output_len(h, stride), output_len(w, stride)).unwrap();
            let y = ldconv_forward(&x, &spec, &off).unwrap();
            let r = conv2d(&x, &spec.as_square_kernel().unwrap(), stride, k / 2).unwrap();
            // Even kernels give one extra row and column; the sampling grid is the top-left crop.
            let (oc, oh, ow) = y.shape();
            let (rc, rh, rw) = r.shape();
            let extra = if k % 2 == 0 { 0..=1 } else { 0..=0 };
            let fits = oc == rc
                && rh >= oh
                && rw >= ow
                && extra.contains(&(rh - oh))
                && extra.contains(&(rw - ow));
            ensure(fits, || format!("shape {:?} vs {:?}", y.shape(), r.shape()))?;
            for c in 0..oc {
                for yy in 0..oh {
                    for xx in 0..ow {
                        worst = worst.max((y.get(c, yy, xx) - r.get(c, yy, xx)).abs());
                    }
                }
            }
        }
    }
    ensure(worst <= 1e-6, || format!("max abs diff {worst:e}"))?;
    Ok(format!("80 inputs, max abs diff {worst:.2e}"))
}

fn ssff_contract() -> Outcome {
    let dims = [(4usize, 16usize), (6, 8), (8, 4)];
    let cfg = SsffConfig::random(5, &[4, 6, 8], 4, 5, 3, vec![0.5, 1.0, 2.0]).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mk = |rng: &mut ChaCha8Rng| {
        dims.iter()
            .map(|&(c, s)| random_map(rng, c, s, s))
            .collect::<Vec<_>>()
    };
    let (x, y) = (mk(&mut rng), mk(&mut rng));
    let (alpha, beta) = (1.7, -0.6);
    let fx = ssff_forward(&x, &cfg).unwrap();
    ensure(fx.shape() == (5, 16, 16), || {
        format!("shape {:?}", fx.shape())
    })?;
    let combo: Vec<FeatureMap> = x
        .iter()
        .zip(&y)
        .map(|(a, b)| {
            let (c, h, w) = a.shape();
            FeatureMap::new(
                c,
                h,
                w,
                a.data()
                    .iter()
                    .zip(b.data())
                    .map(|(p, q)| alpha * p + beta * q)
                    .collect(),
            )
            .unwrap()
        })
        .collect();
    let lhs = ssff_forward(&combo, &cfg).unwrap();
    let fy = ssff_forward(&y, &cfg).unwrap();
    let lin = lhs
        .data()
        .iter()
        .zip(fx.data().iter().zip(fy.data()))
        .map(|(l, (a, b))| (l - (alpha * a + beta * b)).abs())
        .fold(0.0, f64::max);
    ensure(lin <= 1e-9, || format!("linearity {lin:e}"))?;
    let mut norm_err = 0.0f64;
    let mut sep_err = 0.0f64;
    for sigma in [0.5, 1.0, 2.0, 3.5] {
        for radius in [1usize, 2, 4, 8] {
            let k = gaussian_kernel(sigma, radius).unwrap();
            let sum2d: f64 = k
                .weights()
                .iter()
                .flat_map(|a| k.weights().iter().map(move |b| a * b))
                .sum();
            norm_err = norm_err.max((sum2d - 1.0).abs());
            let m = random_map(&mut rng, 2, 11, 13);
            sep_err = sep_err.max(max_abs_diff(
                &gaussian_smooth(&m, &k),
                &gaussian_smooth_separable(&m, &k),
            ));
        }
    }
    ensure(norm_err <= 1e-12, || {
        format!("kernel normalization {norm_err:e}")
    })?;
    ensure(sep_err <= 1e-10, || format!("separability {sep_err:e}"))?;
    Ok(format!(
        "linearity {lin:.1e}, normalization {norm_err:.1e}, separability {sep_err:.1e}"
    ))
}

fn pair_iou(a: &BBox, b: &BBox) -> f64 {
    let iw = (a.x1().min(b.x1()) - a.x0().max(b.x0())).max(0.0);
    let ih = (a.y1().min(b.y1()) - a.y0().max(b.y0())).max(0.0);
    let inter = iw * ih;
    if inter == 0.0 {
        0.0
    } else {
        inter / (a.area() + b.area() - inter)
    }
}

fn quadratic_nms(dets: &[Detection], thr: f64, aware: bool) -> Vec<usize> {
    let mut alive: Vec<usize> = (0..dets.len()).collect();
    let mut kept = Vec::new();
    while !alive.is_empty() {
        let best = *alive
            .iter()
            .min_by(|&&i, &&j| {
                dets[j]
                    .score
                    .total_cmp(&dets[i].score)
                    .then(dets[i].class_id.cmp(&dets[j].class_id))
                    .then(i.cmp(&j))
            })
            .unwrap();
        kept.push(best);
        alive.retain(|&i| {
            let (a, b) = (&dets[i], &dets[best]);
            let same = a.image_id == b.image_id && (!aware || a.class_id == b.class_id);
            i != best && !(same && pair_iou(&a.bbox, &b.bbox) >= thr)
        });
    }
    kept
}

fn envelope_ap(flags: &[(f64, bool)], n_gt: usize) -> f64 {
    let points: Vec<(f64, f64)> = flags
        .iter()
        .map(|&(cut, _)| {
            let kept: Vec<bool> = flags.iter().filter(|f| f.0 >= cut).map(|f| f.1).collect();
            let tp = kept.iter().filter(|&&t| t).count() as f64;
            (tp / n_gt as f64, tp / kept.len() as f64)
        })
        .collect();
    (0..=100)
        .map(|i| {
            let r = i as f64 / 100.0;
            points
                .iter()
                .filter(|p| p.0 >= r)
                .map(|p| p.1)
                .fold(0.0, f64::max)
        })
        .sum::<f64>()
        / 101.0
}

fn nms_and_ap() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for trial in 0..600 {
        let n = rng.random_range(0..=64);
        let dets: Vec<Detection> = (0..n)
            .map(|_| {
                let (x, y) = (rng.random_range(0.0..80.0), rng.random_range(0.0..80.0));
                let (w, h) = (rng.random_range(2.0..30.0), rng.random_range(2.0..30.0));
                let b = BBox::from_corners(x, y, x + w, y + h).unwrap();
                let score = rng.random_range(0..25) as f64 / 24.0;
                let image = ["p", "q"][rng.random_range(0..2)];
                Detection::new(image, b, score, rng.random_range(0..3), Source::Initial).unwrap()
            })
            .collect();
        let thr = rng.random_range(0.1..0.9);
        for aware in [true, false] {
            let got = nms_indices(&dets, thr, aware);
            let want = quadratic_nms(&dets, thr, aware);
            ensure(got == want, || {
                format!("nms trial {trial}: {got:?} vs {want:?}")
            })?;
        }
    }
    let mut worst = 0.0f64;
    for trial in 0..250 {
        let n = rng.random_range(1..=20);
        let mut scores: BTreeSet<u32> = BTreeSet::new();
        while scores.len() < n {
            scores.insert(rng.random_range(1..10_000));
        }
        let flags: Vec<(f64, bool)> = scores
            .iter()
            .map(|&s| (s as f64 / 10_000.0, rng.random_bool(0.6)))
            .collect();
        let tp = flags.iter().filter(|f| f.1).count();
        let n_gt = tp + rng.random_range(0..5);
        if n_gt == 0 {
            continue;
        }
        let got = average_precision(&flags, n_gt, ApMethod::Point101).unwrap();
        let want = envelope_ap(&flags, n_gt);
        ensure((got - want).abs() <= 1e-9, || {
            format!("ap trial {trial}: {got} vs {want}")
        })?;
        worst = worst.max((got - want).abs());
    }
    let worked = average_precision(
        &[(0.9, true), (0.8, false), (0.7, true)],
        2,
        ApMethod::Point101,
    )
    .unwrap();
    let want = (51.0 + 50.0 * 2.0 / 3.0) / 101.0;
    ensure((worked - want).abs() <= 1e-12, || {
        format!("worked example {worked} vs {want}")
    })?;
    Ok(format!(
        "600 nms sets, ap max diff {worst:.1e}, worked {worked:.12}"
    ))
}

struct Scores {
    precision: f64,
    recall: f64,
    tp: usize,
    fp: usize,
    fn_: usize,
}

fn suite_run() -> (
    Vec<Detection>,
    Vec<Detection>,
    uavdet_core::refine::DatasetOutcome,
    DatasetManifest,
) {
    let manifest = DatasetManifest::load(&suite_dir().join("manifest.json")).unwrap();
    let model = SyntheticSceneModel::load(&suite_dir().join("scene_model.json")).unwrap();
    assert_eq!(model.noise_sigma, 0.0);
    let backend = SyntheticDetector::new(model).unwrap();
    let out = refine_dataset(&manifest, None, &backend, &RefineConfig::default()).unwrap();
    (out.initial.clone(), out.detections.clone(), out, manifest)
}

fn two_stage_gain() -> Outcome {
    let (single, two, _, manifest) = suite_run();
    let gts = load_ground_truth(&manifest, suite_dir()).unwrap();
    let ids = manifest.image_ids();
    let cfg = EvalConfig::default();
    let score = |d: &[Detection]| {
        let r = evaluate(d, &gts, &ids, &cfg).unwrap();
        Scores {
            precision: r.precision,
            recall: r.recall,
            tp: r.tp,
            fp: r.fp,
            fn_: r.fn_,
        }
    };
    let (a, b) = (score(&single), score(&two));
    let dp = 100.0 * (b.precision - a.precision);
    let dr = 100.0 * (b.recall - a.recall);
    ensure(dp >= 2.0 && dr >= 2.0, || {
        format!("gain precision {dp:+.2}, recall {dr:+.2}")
    })?;
    let pinned = [
        (a.precision, 0.7759562841530054),
        (a.recall, 0.6200873362445415),
        (b.precision, 0.8481481481481481),
        (b.recall, 1.0),
    ];
    for (got, want) in pinned {
        ensure((got - want).abs() <= 1e-12, || {
            format!("pinned value {want} drifted to {got}")
        })?;
    }
    ensure(
        (a.tp, a.fp, a.fn_, b.tp, b.fp, b.fn_) == (142, 41, 87, 229, 41, 0),
        || "pinned counts drifted".into(),
    )?;
    Ok(format!(
        "P {:.1} -> {:.1} ({dp:+.1}), R {:.1} -> {:.1} ({dr:+.1})",
        100.0 * a.precision,
        100.0 * b.precision,
        100.0 * a.recall,
        100.0 * b.recall
    ))
}

fn gate_invariants() -> Outcome {
    let (_, _, out, _) = suite_run();
    let cfg = RefineConfig::default();
    let mut replaced = 0;
    for t in &out.trace {
        if t.initial.score >= cfg.conf_threshold {
            ensure(t.merged == t.initial, || {
                format!("{}#{} altered", t.image_id, t.index)
            })?;
            ensure(
                t.merged.bbox.corners().map(f64::to_bits)
                    == t.initial.bbox.corners().map(f64::to_bits),
                || "bits".into(),
            )?;
        }
        if t.disposition == Disposition::Replaced {
            replaced += 1;
            ensure(
                pair_iou(&t.initial.bbox, &t.merged.bbox) >= cfg.gate_iou,
                || format!("{}#{} low iou", t.image_id, t.index),
            )?;
            ensure(t.merged.score > t.initial.score, || {
                format!("{}#{} score not higher", t.image_id, t.index)
            })?;
        }
    }
    let v = audit(&out.trace, &cfg);
    ensure(v.is_empty(), || v.join("; "))?;
    ensure(replaced > 0, || "nothing replaced".into())?;
    Ok(format!(
        "{} traces, {replaced} replacements, audit clean",
        out.trace.len()
    ))
}

fn patching() -> Outcome {
    let plan = PatchPlan::new(608, 513, 0).unwrap();
    let wins: Vec<[u32; 4]> = plan_patches(1216, 1026, &plan)
        .unwrap()
        .iter()
        .map(|w| [w.x0, w.y0, w.x1, w.y1])
        .collect();
    ensure(
        wins == [
            [0, 0, 608, 513],
            [608, 0, 1216, 513],
            [0, 513, 608, 1026],
            [608, 513, 1216, 1026],
        ],
        || format!("{wins:?}"),
    )?;
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    for case in 0..100 {
        let (w, h) = (rng.random_range(64..2500u32), rng.random_range(64..2500u32));
        let (pw, ph) = (rng.random_range(16..=w), rng.random_range(16..=h));
        let overlap = rng.random_range(0..pw.min(ph) / 2);
        let plan = PatchPlan::new(pw, ph, overlap).unwrap();
        let wins = plan_patches(w, h, &plan).unwrap();
        let fail = |m: &str| format!("case {case} ({w}x{h}, {pw}x{ph}, {overlap}): {m}");
        let mut cov = vec![0u8; (w * h) as usize];
        for win in &wins {
            ensure(win.x1 <= w && win.y1 <= h, || fail("window outside image"))?;
            ensure(win.width() == pw && win.height() == ph, || {
                fail("window size")
            })?;
            for y in win.y0..win.y1 {
                cov[(y * w + win.x0) as usize..(y * w + win.x1) as usize].fill(1);
            }
        }
        ensure(cov.iter().all(|&c| c == 1), || fail("uncovered pixel"))?;
        for axis in [0, 1] {
            let starts: BTreeSet<u32> = wins
                .iter()
                .map(|x| if axis == 0 { x.x0 } else { x.y0 })
                .collect();
            let starts: Vec<u32> = starts.into_iter().collect();
            let (len, p) = if axis == 0 { (w, pw) } else { (h, ph) };
            ensure(*starts.last().unwrap() + p == len, || {
                fail("last window not shifted to the border")
            })?;
            for pair in starts.windows(2).take(starts.len().saturating_sub(2)) {
                ensure(pair[1] - pair[0] == p - overlap, || fail("interior stride"))?;
            }
        }
    }
    Ok("worked case and 100 random plans".into())
}

fn uavdet(args: &[&str]) -> Result<(), String> {
    let o = Command::new(env!("CARGO_BIN_EXE_uavdet"))
        .args(args)
        .output()
        .map_err(|e| e.to_string())?;
    ensure(o.status.success(), || {
        format!("{args:?}: {}", String::from_utf8_lossy(&o.stderr))
    })
}

fn determinism() -> Outcome {
    let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
    let manifest = suite_dir().join("manifest.json").display().to_string();
    let model = suite_dir().join("scene_model.json").display().to_string();
    let mut outputs = Vec::new();
    for (run, workers) in [(0, "0"), (1, "0"), (2, "1")] {
        // Same paths every run: outputs record their input file names.
        let (r, e) = (tmp.path().join("refine"), tmp.path().join("eval"));
        let rs = r.display().to_string();
        uavdet(&[
            "--workers",
            workers,
            "refine",
            "--manifest",
            &manifest,
            "--synthetic",
            &model,
            "--out-dir",
            &rs,
        ])?;
        let first = r.join("initial.jsonl").display().to_string();
        let second = r.join("detections.jsonl").display().to_string();
        let es = e.display().to_string();
        uavdet(&[
            "eval",
            "--manifest",
            &manifest,
            "--detections",
            &first,
            "--compare",
            &second,
            "--out-dir",
            &es,
        ])?;
        let files = [
            r.join("initial.jsonl"),
            r.join("detections.jsonl"),
            r.join("trace.jsonl"),
            r.join("summary.json"),
            e.join("eval.json"),
            e.join("table.txt"),
        ];
        let bytes: Vec<Vec<u8>> = files
            .iter()
            .map(|f| std::fs::read(f).unwrap_or_default())
            .collect();
        for f in &files {
            std::fs::remove_file(f).map_err(|err| format!("{}: {err}", f.display()))?;
        }
        ensure(bytes.iter().all(|b| !b.is_empty()), || {
            format!("run {run}: empty output")
        })?;
        outputs.push(bytes);
    }
    ensure(outputs[0] == outputs[1], || "rerun differs".into())?;
    ensure(outputs[0] == outputs[2], || "single worker differs".into())?;
    let n: usize = outputs[0].iter().map(Vec::len).sum();
    Ok(format!("3 runs, {n} bytes identical"))
}

fn main() -> ExitCode {
    let criteria: [(&str, fn() -> Outcome, Option<Duration>); 9] = [
        (
            "loss gradients match finite differences",
            gradients,
            Some(Duration::from_secs(10)),
        ),
        ("closed-form loss values", spot_values, None),
        (
            "zero-offset sampling conv equals standard conv",
            ldconv_equivalence,
            Some(Duration::from_secs(30)),
        ),
        ("scale-sequence fusion contract", ssff_contract, None),
        ("nms and average precision oracles", nms_and_ap, None),
        (
            "two-stage refinement gain on the synthetic suite",
            two_stage_gain,
            Some(Duration::from_secs(60)),
        ),
        ("refinement gate invariants", gate_invariants, None),
        ("patch tiling", patching, None),
        ("refine and eval are deterministic", determinism, None),
    ];
    panic::set_hook(Box::new(|_| {}));
    let mut failed = 0;
    for (i, (name, f, limit)) in criteria.iter().enumerate() {
        let start = Instant::now();
        let result = panic::catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
            let msg = p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            Err(format!("panicked: {msg}"))
        });
        let took = start.elapsed();
        let result = match (result, limit) {
            (Ok(_), Some(l)) if took > *l => Err(format!("took {took:.1?}, limit {l:?}")),
            (r, _) => r,
        };
        match result {
            Ok(detail) => println!("criterion {}: PASS  {name} ({detail}; {took:.2?})", i + 1),
            Err(why) => {
                failed += 1;
                println!("criterion {}: FAIL  {name} ({why})", i + 1);
            }
        }
    }
    println!(
        "{} of {} criteria passed",
        criteria.len() - failed,
        criteria.len()
    );
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
