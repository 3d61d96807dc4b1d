use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use uavdet_core::geometry::BBox;
use uavdet_core::ingest::{load_ground_truth, read_detections, DatasetManifest, ManifestEntry};
use uavdet_core::metrics::GroundTruthObject;
use uavdet_core::postprocess::Detection;

use crate::output::{create_dir, write_text};
use crate::CliError;

pub const GT_COLOR: &str = "blue";
pub const FIRST_COLOR: &str = "red";
pub const SECOND_COLOR: &str = "green";

#[derive(Debug, Clone, clap::Args)]
pub struct Args {
    #[arg(long)]
    pub manifest: PathBuf,
    /// Drawn in red.
    #[arg(long)]
    pub detections: Option<PathBuf>,
    /// Drawn in green.
    #[arg(long)]
    pub second: Option<PathBuf>,
    /// Hide detections scoring below this.
    #[arg(long, default_value_t = 0.0)]
    pub min_score: f64,
    #[arg(long)]
    pub out_dir: PathBuf,
}

fn escape(s: &str) -> String {
    let mut out = String::with_capacity(s.len());
    for c in s.chars() {
        match c {
            '&' => out.push_str("&amp;"),
            '<' => out.push_str("&lt;"),
            '>' => out.push_str("&gt;"),
            '"' => out.push_str("&quot;"),
            '\'' => out.push_str("&apos;"),
            c => out.push(c),
        }
    }
    out
}

fn rect(out: &mut String, b: &BBox) {
    let _ = writeln!(
        out,
        r#"    <rect x="{}" y="{}" width="{}" height="{}"/>"#,
        b.x0(),
        b.y0(),
        b.w(),
        b.h()
    );
}

fn class_name(names: &[String], id: u32) -> String {
    names
        .get(id as usize)
        .cloned()
        .unwrap_or_else(|| id.to_string())
}

fn detection_group(
    out: &mut String,
    class: &str,
    color: &str,
    dets: &[&Detection],
    names: &[String],
) {
    let _ = writeln!(
        out,
        r#"  <g class="{class}" fill="none" stroke="{color}" stroke-width="2">"#
    );
    for d in dets {
        rect(out, &d.bbox);
    }
    let _ = writeln!(out, "  </g>");
    let _ = writeln!(
        out,
        r#"  <g class="{class}-labels" fill="{color}" font-size="12" font-family="monospace">"#
    );
    for d in dets {
        let _ = writeln!(
            out,
            r#"    <text x="{}" y="{}">{} {:.2}</text>"#,
            d.bbox.x0(),
            (d.bbox.y0() - 2.0).max(10.0),
            escape(&class_name(names, d.class_id)),
            d.score
        );
    }
    let _ = writeln!(out, "  </g>");
}

/// One overlay: the image, ground truth in blue, the first detection set in
/// red and the second in green.
pub fn render_svg(
    e: &ManifestEntry,
    gts: &[&GroundTruthObject],
    first: &[&Detection],
    second: &[&Detection],
    class_names: &[String],
) -> String {
    let mut out = String::new();
    let _ = writeln!(
        out,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}">"#,
        w = e.width,
        h = e.height
    );
    let _ = writeln!(out, "  <title>{}</title>", escape(&e.image_id));
    if e.patch.is_none() {
        let _ = writeln!(
            out,
            r#"  <image href="{}" x="0" y="0" width="{}" height="{}"/>"#,
            escape(&e.image_path),
            e.width,
            e.height
        );
    }
    let _ = writeln!(
        out,
        r#"  <g class="ground-truth" fill="none" stroke="{GT_COLOR}" stroke-width="2">"#
    );
    for g in gts {
        rect(&mut out, &g.bbox);
    }
    let _ = writeln!(out, "  </g>");
    if !first.is_empty() {
        detection_group(&mut out, "first", FIRST_COLOR, first, class_names);
    }
    if !second.is_empty() {
        detection_group(&mut out, "second", SECOND_COLOR, second, class_names);
    }
    out.push_str("</svg>\n");
    out
}

fn by_image<T>(items: &[T], id: impl Fn(&T) -> &str) -> BTreeMap<&str, Vec<&T>> {
    let mut m: BTreeMap<&str, Vec<&T>> = BTreeMap::new();
    for it in items {
        m.entry(id(it)).or_default().push(it);
    }
    m
}

fn load(path: Option<&Path>, min_score: f64) -> Result<Vec<Detection>, CliError> {
    Ok(match path {
        Some(p) => read_detections(p)?
            .into_iter()
            .filter(|d| d.score >= min_score)
            .collect(),
        None => Vec::new(),
    })
}

pub fn run(a: Args) -> Result<(), CliError> {
    let manifest = DatasetManifest::load(&a.manifest)?;
    let base = a.manifest.parent().unwrap_or(Path::new("."));
    let gts = load_ground_truth(&manifest, base)?;
    let first = load(a.detections.as_deref(), a.min_score)?;
    let second = load(a.second.as_deref(), a.min_score)?;
    let gt_map = by_image(&gts, |g| g.image_id.as_str());
    let first_map = by_image(&first, |d| d.image_id.as_str());
    let second_map = by_image(&second, |d| d.image_id.as_str());
    create_dir(&a.out_dir)?;
    let empty = Vec::new();
    for e in &manifest.entries {
        let id = e.image_id.as_str();
        let svg = render_svg(
            e,
            gt_map.get(id).unwrap_or(&empty),
            first_map.get(id).map_or(&[][..], Vec::as_slice),
            second_map.get(id).map_or(&[][..], Vec::as_slice),
            &manifest.class_names,
        );
        write_text(&a.out_dir.join(format!("{id}.svg")), &svg)?;
    }
    println!(
        "wrote {} overlays to {}",
        manifest.entries.len(),
        a.out_dir.display()
    );
    Ok(())
}
