//! Scale-sequence feature fusion: each level is projected to a common channel
//! count with a 1×1 convolution, upsampled to the finest resolution, smoothed
//! with its own Gaussian, stacked along a scale axis and fused by a 3D
//! convolution spanning every level.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::exec;
use crate::tensor::fmap::{self, FmapError};
use crate::tensor::{
    conv2d, conv3d_scale, default_radius, gaussian_kernel, gaussian_smooth, upsample_nearest,
    Conv3dWeights, ConvWeights, FeatureMap, FeatureVolume, TensorError,
};

pub const DEFAULT_SIGMAS: [f64; 3] = [0.5, 1.0, 2.0];
pub const MANIFEST_FILE: &str = "manifest.json";

/// One violated configuration invariant.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Violation {
    pub invariant: &'static str,
    pub detail: String,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.invariant, self.detail)
    }
}

fn list(v: &[Violation]) -> String {
    v.iter()
        .map(|x| x.to_string())
        .collect::<Vec<_>>()
        .join("; ")
}

#[derive(Debug, Error)]
pub enum SsffError {
    #[error("invalid config: {}", list(.0))]
    Invalid(Vec<Violation>),
    #[error("expected {want} levels, got {got}")]
    LevelCount { want: usize, got: usize },
    #[error("level {level} ({h}x{w}) is not an integer downscale of the finest level ({fh}x{fw})")]
    Factor {
        level: usize,
        h: usize,
        w: usize,
        fh: usize,
        fw: usize,
    },
    #[error("level {level}: {source}")]
    Level { level: usize, source: TensorError },
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("{path}: {source}")]
    Fmap { path: PathBuf, source: FmapError },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("{path}: {source}")]
    Json {
        path: PathBuf,
        source: serde_json::Error,
    },
}

impl SsffError {
    /// Names of the violated invariants, if this is a validation error.
    pub fn invariants(&self) -> Vec<&'static str> {
        match self {
            SsffError::Invalid(v) => v.iter().map(|x| x.invariant).collect(),
            _ => Vec::new(),
        }
    }
}

/// Weights and schedule of one fusion block. Levels are ordered finest first.
#[derive(Debug, Clone, PartialEq)]
pub struct SsffConfig {
    pub common_channels: usize,
    pub sigma_schedule: Vec<f64>,
    /// Gaussian truncation radius per level.
    pub radii: Vec<usize>,
    /// 1×1 projection per level, `common_channels × c_in(level)`.
    pub norm_weights: Vec<ConvWeights>,
    pub fuse_weights: Conv3dWeights,
}

impl SsffConfig {
    /// Builds a config with default radii and validates it.
    pub fn new(
        common_channels: usize,
        sigma_schedule: Vec<f64>,
        norm_weights: Vec<ConvWeights>,
        fuse_weights: Conv3dWeights,
    ) -> Result<Self, SsffError> {
        let radii = sigma_schedule.iter().map(|&s| default_radius(s)).collect();
        let cfg = Self {
            common_channels,
            sigma_schedule,
            radii,
            norm_weights,
            fuse_weights,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn levels(&self) -> usize {
        self.sigma_schedule.len()
    }

    /// Every violated invariant, including the ordering of the schedule.
    pub fn violations(&self) -> Vec<Violation> {
        let mut v = self.structural_violations();
        if self.sigma_schedule.windows(2).any(|p| !(p[0] < p[1])) {
            v.push(Violation {
                invariant: "sigma_schedule_increasing",
                detail: format!("{:?} is not strictly increasing", self.sigma_schedule),
            });
        }
        v
    }

    pub fn validate(&self) -> Result<(), SsffError> {
        let v = self.violations();
        if v.is_empty() {
            Ok(())
        } else {
            Err(SsffError::Invalid(v))
        }
    }

    /// Shape checks only. The forward pass needs these but accepts any
    /// positive schedule.
    fn structural_violations(&self) -> Vec<Violation> {
        let mut v = Vec::new();
        let mut push = |invariant, detail: String| v.push(Violation { invariant, detail });
        let n = self.levels();
        if n < 2 {
            push("min_levels", format!("{n} levels, need at least 2"));
        }
        if self.common_channels == 0 {
            push("common_channels_positive", "common_channels is 0".into());
        }
        if let Some(s) = self
            .sigma_schedule
            .iter()
            .find(|s| !(**s > 0.0 && s.is_finite()))
        {
            push(
                "sigma_positive",
                format!("sigma {s} is not positive and finite"),
            );
        }
        if self.radii.len() != n {
            push(
                "radius_per_level",
                format!("{} radii for {n} levels", self.radii.len()),
            );
        }
        if self.radii.contains(&0) {
            push("radius_positive", "a kernel radius is 0".into());
        }
        if self.norm_weights.len() != n {
            push(
                "norm_weights_per_level",
                format!(
                    "{} norm weight sets for {n} levels",
                    self.norm_weights.len()
                ),
            );
        }
        for (i, w) in self.norm_weights.iter().enumerate() {
            if w.k() != 1 {
                push(
                    "norm_weights_1x1",
                    format!("level {i} kernel is {}x{}", w.k(), w.k()),
                );
            }
            if w.c_out() != self.common_channels {
                push(
                    "norm_weights_out_channels",
                    format!(
                        "level {i} projects to {} channels, common_channels is {}",
                        w.c_out(),
                        self.common_channels
                    ),
                );
            }
        }
        let f = &self.fuse_weights;
        if f.depth() != n {
            push(
                "fuse_weights_depth",
                format!("fuse depth {} for {n} levels", f.depth()),
            );
        }
        if f.c_in() != self.common_channels {
            push(
                "fuse_weights_in_channels",
                format!(
                    "fuse expects {} channels, common_channels is {}",
                    f.c_in(),
                    self.common_channels
                ),
            );
        }
        v
    }

    /// Seeded random weights, rounded to `f32` so they survive a save/load
    /// cycle unchanged.
    pub fn random(
        seed: u64,
        level_channels: &[usize],
        common_channels: usize,
        c_out: usize,
        k: usize,
        sigma_schedule: Vec<f64>,
    ) -> Result<Self, SsffError> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut draw = |n: usize, fan_in: usize| -> Vec<f64> {
            let s = 1.0 / (fan_in.max(1) as f64).sqrt();
            (0..n)
                .map(|_| rng.random_range(-s..s) as f32 as f64)
                .collect()
        };
        let norm = level_channels
            .iter()
            .map(|&c| ConvWeights::new(common_channels, c, 1, draw(common_channels * c, c)))
            .collect::<Result<Vec<_>, _>>()?;
        let d = level_channels.len();
        let fan = common_channels * d * k * k;
        let fuse = Conv3dWeights::new(c_out, common_channels, d, k, draw(c_out * fan, fan))?;
        Self::new(common_channels, sigma_schedule, norm, fuse)
    }
}

fn preprocess_level(
    level: &FeatureMap,
    norm: &ConvWeights,
    factor: usize,
    sigma: f64,
    radius: usize,
) -> Result<FeatureMap, TensorError> {
    // 1×1 projection commutes with nearest upsampling, so project first.
    let projected = conv2d(level, norm, 1, 0)?;
    let up = upsample_nearest(&projected, factor)?;
    Ok(gaussian_smooth(&up, &gaussian_kernel(sigma, radius)?))
}

/// The stacked scale volume, before the 3D fusion.
pub fn ssff_volume(levels: &[FeatureMap], cfg: &SsffConfig) -> Result<FeatureVolume, SsffError> {
    let v = cfg.structural_violations();
    if !v.is_empty() {
        return Err(SsffError::Invalid(v));
    }
    if levels.len() != cfg.levels() {
        return Err(SsffError::LevelCount {
            want: cfg.levels(),
            got: levels.len(),
        });
    }
    let (_, fh, fw) = levels[0].shape();
    let mut factors = Vec::with_capacity(levels.len());
    for (i, l) in levels.iter().enumerate() {
        let (_, h, w) = l.shape();
        let ok = fh % h == 0 && fw % w == 0 && fh / h == fw / w;
        if !ok {
            return Err(SsffError::Factor {
                level: i,
                h,
                w,
                fh,
                fw,
            });
        }
        factors.push(fh / h);
    }
    let smoothed = exec::map_range(levels.len(), |i| {
        preprocess_level(
            &levels[i],
            &cfg.norm_weights[i],
            factors[i],
            cfg.sigma_schedule[i],
            cfg.radii[i],
        )
        .map_err(|source| SsffError::Level { level: i, source })
    });
    let smoothed = smoothed.into_iter().collect::<Result<Vec<_>, _>>()?;
    Ok(FeatureVolume::stack(&smoothed)?)
}

/// Fused map at the finest resolution with `fuse_weights.c_out()` channels.
pub fn ssff_forward(levels: &[FeatureMap], cfg: &SsffConfig) -> Result<FeatureMap, SsffError> {
    let vol = ssff_volume(levels, cfg)?;
    Ok(conv3d_scale(&vol, &cfg.fuse_weights)?)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct WeightRef {
    file: String,
    c_out: usize,
    c_in: usize,
    k: usize,
}

/// On-disk manifest, stored next to the FMAP weight files.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Manifest {
    levels: usize,
    common_channels: usize,
    sigma_schedule: Vec<f64>,
    radii: Vec<usize>,
    /// Expected `[c, h, w]` of each input level, if known.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    level_dims: Option<Vec<[usize; 3]>>,
    norm: Vec<WeightRef>,
    fuse: WeightRef,
}

fn read_weights(dir: &Path, r: &WeightRef) -> Result<FeatureMap, SsffError> {
    let path = dir.join(&r.file);
    fmap::load(&path).map_err(|source| SsffError::Fmap { path, source })
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> SsffError + '_ {
    move |source| SsffError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Writes `manifest.json` plus one FMAP file per weight set into `dir`.
/// Weights are stored as `f32`.
pub fn save_config(
    dir: &Path,
    cfg: &SsffConfig,
    level_dims: Option<&[[usize; 3]]>,
) -> Result<(), SsffError> {
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let mut norm = Vec::new();
    for (i, w) in cfg.norm_weights.iter().enumerate() {
        let file = format!("norm_{i}.fmap");
        let path = dir.join(&file);
        fmap::save(&path, &w.to_map()).map_err(|source| SsffError::Fmap { path, source })?;
        norm.push(WeightRef {
            file,
            c_out: w.c_out(),
            c_in: w.c_in(),
            k: w.k(),
        });
    }
    let f = &cfg.fuse_weights;
    let path = dir.join("fuse.fmap");
    fmap::save(&path, &f.to_map()).map_err(|source| SsffError::Fmap { path, source })?;
    let manifest = Manifest {
        levels: cfg.levels(),
        common_channels: cfg.common_channels,
        sigma_schedule: cfg.sigma_schedule.clone(),
        radii: cfg.radii.clone(),
        level_dims: level_dims.map(|d| d.to_vec()),
        norm,
        fuse: WeightRef {
            file: "fuse.fmap".into(),
            c_out: f.c_out(),
            c_in: f.c_in(),
            k: f.k(),
        },
    };
    let path = dir.join(MANIFEST_FILE);
    let text = serde_json::to_string_pretty(&manifest).map_err(|source| SsffError::Json {
        path: path.clone(),
        source,
    })?;
    fs::write(&path, text + "\n").map_err(io_err(&path))
}

/// Loads and validates a config directory. All invariant violations are
/// reported together.
pub fn load_config(dir: &Path) -> Result<LoadedConfig, SsffError> {
    let path = dir.join(MANIFEST_FILE);
    let text = fs::read_to_string(&path).map_err(io_err(&path))?;
    let m: Manifest =
        serde_json::from_str(&text).map_err(|source| SsffError::Json { path, source })?;

    let mut v = Vec::new();
    let mut push = |invariant, detail: String| v.push(Violation { invariant, detail });
    if m.sigma_schedule.len() != m.levels {
        push(
            "sigma_per_level",
            format!(
                "{} sigmas for {} declared levels",
                m.sigma_schedule.len(),
                m.levels
            ),
        );
    }
    if m.norm.len() != m.levels {
        push(
            "norm_weights_per_level",
            format!(
                "{} norm weight sets for {} declared levels",
                m.norm.len(),
                m.levels
            ),
        );
    }
    if let Some(d) = &m.level_dims {
        if d.len() != m.levels {
            push(
                "level_dims_per_level",
                format!("{} level dims for {} declared levels", d.len(), m.levels),
            );
        }
    }

    let mut norm_weights = Vec::new();
    for (i, r) in m.norm.iter().enumerate() {
        let fm = read_weights(dir, r)?;
        if fm.shape() != (r.c_out, r.c_in, r.k * r.k) {
            push(
                "weight_file_shape",
                format!(
                    "{} has shape {:?}, manifest says level {i} is {r:?}",
                    r.file,
                    fm.shape()
                ),
            );
            continue;
        }
        norm_weights.push(ConvWeights::from_map(&fm, r.k)?);
    }
    let fm = read_weights(dir, &m.fuse)?;
    let fuse_shape = (m.fuse.c_out, m.fuse.c_in * m.levels, m.fuse.k * m.fuse.k);
    if fm.shape() != fuse_shape {
        push(
            "fuse_weights_depth",
            format!(
                "{} has shape {:?}, expected {:?} for {} levels",
                m.fuse.file,
                fm.shape(),
                fuse_shape,
                m.levels
            ),
        );
    }
    if m.fuse.k.is_multiple_of(2) {
        push(
            "fuse_kernel_odd",
            format!("fuse kernel size {} is even", m.fuse.k),
        );
    }
    if !v.is_empty() {
        return Err(SsffError::Invalid(v));
    }
    let fuse_weights = Conv3dWeights::from_map(&fm, m.levels, m.fuse.k)?;
    let cfg = SsffConfig {
        common_channels: m.common_channels,
        sigma_schedule: m.sigma_schedule,
        radii: m.radii,
        norm_weights,
        fuse_weights,
    };
    let mut v = cfg.violations();
    if let Some(dims) = &m.level_dims {
        for (i, (d, w)) in dims.iter().zip(&cfg.norm_weights).enumerate() {
            if d[0] != w.c_in() {
                v.push(Violation {
                    invariant: "norm_weights_in_channels",
                    detail: format!(
                        "level {i} has {} channels, weights expect {}",
                        d[0],
                        w.c_in()
                    ),
                });
            }
        }
    }
    if !v.is_empty() {
        return Err(SsffError::Invalid(v));
    }
    Ok(LoadedConfig {
        config: cfg,
        level_dims: m.level_dims,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct LoadedConfig {
    pub config: SsffConfig,
    pub level_dims: Option<Vec<[usize; 3]>>,
}
