//! Linear deformable convolution: `N` sampling points per output position,
//! each displaced by a per-position offset and read with bilinear
//! interpolation, then combined linearly.

use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::exec;
use crate::tensor::fmap::{self, FmapError};
use crate::tensor::{ConvWeights, FeatureMap, TensorError};

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Error)]
pub enum LdConvError {
    #[error("invalid spec: {0}")]
    Spec(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
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

/// Base sampling grid for `n` points as `(row, col)` offsets: rows of width
/// `floor(√n)`, a partial last row for the remainder, centered on the
/// `(floor(rows/2), floor(width/2))` cell.
pub fn initial_coordinates(n: usize) -> Vec<(i64, i64)> {
    if n == 0 {
        return Vec::new();
    }
    let b = n.isqrt();
    let full = n / b;
    let rows = full + usize::from(!n.is_multiple_of(b));
    let (r0, c0) = ((rows / 2) as i64, (b / 2) as i64);
    (0..n)
        .map(|i| ((i / b) as i64 - r0, (i % b) as i64 - c0))
        .collect()
}

/// Bilinear read of channel `c` at `(x, y)`. Taps outside the map read as 0.
pub fn bilinear_sample(fm: &FeatureMap, x: f64, y: f64, c: usize) -> f64 {
    let (_, h, w) = fm.shape();
    let x0 = x.floor();
    let y0 = y.floor();
    let fx = x - x0;
    let fy = y - y0;
    let plane = fm.channel(c);
    let tap = |yy: f64, xx: f64| -> f64 {
        if yy < 0.0 || xx < 0.0 || yy >= h as f64 || xx >= w as f64 {
            0.0
        } else {
            plane[yy as usize * w + xx as usize]
        }
    };
    let top = tap(y0, x0) * (1.0 - fx) + tap(y0, x0 + 1.0) * fx;
    let bottom = tap(y0 + 1.0, x0) * (1.0 - fx) + tap(y0 + 1.0, x0 + 1.0) * fx;
    top * (1.0 - fy) + bottom * fy
}

/// Output grid size for an input extent and stride.
pub fn output_len(n: usize, stride: usize) -> usize {
    n.div_ceil(stride)
}

/// Sample count, channels, stride and `c_out × c_in × n_samples` weights.
#[derive(Debug, Clone, PartialEq)]
pub struct LdConvSpec {
    n_samples: usize,
    c_in: usize,
    c_out: usize,
    stride: usize,
    weights: Vec<f64>,
}

impl LdConvSpec {
    pub fn new(
        n_samples: usize,
        c_in: usize,
        c_out: usize,
        stride: usize,
        weights: Vec<f64>,
    ) -> Result<Self, LdConvError> {
        if n_samples == 0 || c_in == 0 || c_out == 0 || stride == 0 {
            return Err(LdConvError::Spec(format!(
                "n_samples {n_samples}, c_in {c_in}, c_out {c_out}, stride {stride} must all be at least 1"
            )));
        }
        if weights.len() != c_out * c_in * n_samples {
            return Err(LdConvError::Spec(format!(
                "{} weights, expected {c_out}x{c_in}x{n_samples}",
                weights.len()
            )));
        }
        if weights.iter().any(|w| !w.is_finite()) {
            return Err(LdConvError::Spec("non-finite weight".into()));
        }
        Ok(Self {
            n_samples,
            c_in,
            c_out,
            stride,
            weights,
        })
    }

    /// Seeded uniform weights in `±1/√(c_in·n)`, rounded to `f32`.
    pub fn random(
        seed: u64,
        n_samples: usize,
        c_in: usize,
        c_out: usize,
        stride: usize,
    ) -> Result<Self, LdConvError> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let s = 1.0 / ((c_in * n_samples).max(1) as f64).sqrt();
        let w = (0..c_out * c_in * n_samples)
            .map(|_| rng.random_range(-s..s) as f32 as f64)
            .collect();
        Self::new(n_samples, c_in, c_out, stride, w)
    }

    pub fn n_samples(&self) -> usize {
        self.n_samples
    }
    pub fn c_in(&self) -> usize {
        self.c_in
    }
    pub fn c_out(&self) -> usize {
        self.c_out
    }
    pub fn stride(&self) -> usize {
        self.stride
    }
    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    #[inline]
    pub fn weight(&self, o: usize, i: usize, k: usize) -> f64 {
        self.weights[(o * self.c_in + i) * self.n_samples + k]
    }

    /// The same weights as a `√n × √n` kernel, when `n` is a perfect square.
    pub fn as_square_kernel(&self) -> Option<ConvWeights> {
        let k = self.n_samples.isqrt();
        (k * k == self.n_samples)
            .then(|| ConvWeights::new(self.c_out, self.c_in, k, self.weights.clone()).ok())
            .flatten()
    }
}

/// Per-position displacements, shape `2N × h_out × w_out`. Channel `2k`
/// holds `dx` and channel `2k + 1` holds `dy` of sample `k`, in pixels.
#[derive(Debug, Clone, PartialEq)]
pub struct OffsetField {
    n_samples: usize,
    map: FeatureMap,
}

impl OffsetField {
    pub fn new(map: FeatureMap) -> Result<Self, LdConvError> {
        if !map.channels().is_multiple_of(2) {
            return Err(LdConvError::Shape(format!(
                "offset field has {} channels, expected an even count",
                map.channels()
            )));
        }
        Ok(Self {
            n_samples: map.channels() / 2,
            map,
        })
    }

    pub fn zeros(n_samples: usize, h_out: usize, w_out: usize) -> Result<Self, LdConvError> {
        Self::new(FeatureMap::zeros(2 * n_samples, h_out, w_out)?)
    }

    /// Uniform offsets in `±scale`, rounded to `f32`.
    pub fn random(
        seed: u64,
        n_samples: usize,
        h_out: usize,
        w_out: usize,
        scale: f64,
    ) -> Result<Self, LdConvError> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = (0..2 * n_samples * h_out * w_out)
            .map(|_| {
                if scale > 0.0 {
                    rng.random_range(-scale..scale) as f32 as f64
                } else {
                    0.0
                }
            })
            .collect();
        Self::new(FeatureMap::new(2 * n_samples, h_out, w_out, data)?)
    }

    pub fn n_samples(&self) -> usize {
        self.n_samples
    }
    pub fn grid(&self) -> (usize, usize) {
        (self.map.height(), self.map.width())
    }
    pub fn as_map(&self) -> &FeatureMap {
        &self.map
    }

    /// `(dx, dy)` of sample `k` at output position `(oy, ox)`.
    #[inline]
    pub fn at(&self, k: usize, oy: usize, ox: usize) -> (f64, f64) {
        (self.map.get(2 * k, oy, ox), self.map.get(2 * k + 1, oy, ox))
    }

    /// Adds `delta` to every component.
    pub fn shifted(&self, delta: f64) -> Self {
        let (c, h, w) = self.map.shape();
        let data = self.map.data().iter().map(|v| v + delta).collect();
        Self {
            n_samples: self.n_samples,
            map: FeatureMap::new(c, h, w, data).expect("finite shift"),
        }
    }
}

/// Forward pass. Output is `c_out × ceil(H/stride) × ceil(W/stride)`.
pub fn ldconv_forward(
    fm: &FeatureMap,
    spec: &LdConvSpec,
    offsets: &OffsetField,
) -> Result<FeatureMap, LdConvError> {
    let (c, h, w) = fm.shape();
    if c != spec.c_in {
        return Err(LdConvError::Shape(format!(
            "spec expects {} input channels, map has {c}",
            spec.c_in
        )));
    }
    let (oh, ow) = (output_len(h, spec.stride), output_len(w, spec.stride));
    if offsets.n_samples != spec.n_samples || offsets.grid() != (oh, ow) {
        return Err(LdConvError::Shape(format!(
            "offsets are {}x{:?}, expected {}x{:?}",
            offsets.n_samples,
            offsets.grid(),
            spec.n_samples,
            (oh, ow)
        )));
    }
    let base = initial_coordinates(spec.n_samples);
    let n = spec.n_samples;
    // Each row yields `ow × c_out` values, position-major.
    let rows = exec::map_range(oh, |oy| {
        let mut row = vec![0.0; ow * spec.c_out];
        let mut samples = vec![0.0; c * n];
        for ox in 0..ow {
            for (k, &(r, q)) in base.iter().enumerate() {
                let (dx, dy) = offsets.at(k, oy, ox);
                let y = (oy * spec.stride) as f64 + r as f64 + dy;
                let x = (ox * spec.stride) as f64 + q as f64 + dx;
                for i in 0..c {
                    samples[i * n + k] = bilinear_sample(fm, x, y, i);
                }
            }
            for o in 0..spec.c_out {
                let mut acc = 0.0;
                for i in 0..c {
                    for k in 0..n {
                        acc += spec.weight(o, i, k) * samples[i * n + k];
                    }
                }
                row[ox * spec.c_out + o] = acc;
            }
        }
        row
    });
    let mut out = vec![0.0; spec.c_out * oh * ow];
    for (oy, row) in rows.iter().enumerate() {
        for ox in 0..ow {
            for o in 0..spec.c_out {
                out[(o * oh + oy) * ow + ox] = row[ox * spec.c_out + o];
            }
        }
    }
    Ok(FeatureMap::new(spec.c_out, oh, ow, out)?)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Manifest {
    n_samples: usize,
    stride: usize,
    c_in: usize,
    c_out: usize,
    /// `[c_out, c_in, n_samples]`.
    weights: String,
    /// `[2·n_samples, h_out, w_out]`.
    offsets: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    input: Option<String>,
}

/// A spec with its offsets and, optionally, an input map.
#[derive(Debug, Clone, PartialEq)]
pub struct LdConvFixture {
    pub spec: LdConvSpec,
    pub offsets: OffsetField,
    pub input: Option<FeatureMap>,
}

fn save_map(dir: &Path, file: &str, fm: &FeatureMap) -> Result<(), LdConvError> {
    let path = dir.join(file);
    fmap::save(&path, fm).map_err(|source| LdConvError::Fmap { path, source })
}

fn load_map(dir: &Path, file: &str) -> Result<FeatureMap, LdConvError> {
    let path = dir.join(file);
    fmap::load(&path).map_err(|source| LdConvError::Fmap { path, source })
}

/// Writes a manifest plus FMAP files into `dir`. Values are stored as `f32`.
pub fn save_fixture(dir: &Path, fx: &LdConvFixture) -> Result<(), LdConvError> {
    let io = |path: &Path| {
        let path = path.to_path_buf();
        move |source| LdConvError::Io { path, source }
    };
    fs::create_dir_all(dir).map_err(io(dir))?;
    let s = &fx.spec;
    let wmap = FeatureMap::new(s.c_out, s.c_in, s.n_samples, s.weights.clone())?;
    save_map(dir, "weights.fmap", &wmap)?;
    save_map(dir, "offsets.fmap", &fx.offsets.map)?;
    if let Some(input) = &fx.input {
        save_map(dir, "input.fmap", input)?;
    }
    let m = Manifest {
        n_samples: s.n_samples,
        stride: s.stride,
        c_in: s.c_in,
        c_out: s.c_out,
        weights: "weights.fmap".into(),
        offsets: "offsets.fmap".into(),
        input: fx.input.as_ref().map(|_| "input.fmap".into()),
    };
    let path = dir.join(MANIFEST_FILE);
    let text = serde_json::to_string_pretty(&m).map_err(|source| LdConvError::Json {
        path: path.clone(),
        source,
    })?;
    fs::write(&path, text + "\n").map_err(io(&path))
}

pub fn load_fixture(dir: &Path) -> Result<LdConvFixture, LdConvError> {
    let path = dir.join(MANIFEST_FILE);
    let text = fs::read_to_string(&path).map_err(|source| LdConvError::Io {
        path: path.clone(),
        source,
    })?;
    let m: Manifest =
        serde_json::from_str(&text).map_err(|source| LdConvError::Json { path, source })?;
    let wmap = load_map(dir, &m.weights)?;
    if wmap.shape() != (m.c_out, m.c_in, m.n_samples) {
        return Err(LdConvError::Shape(format!(
            "{} has shape {:?}, manifest declares {:?}",
            m.weights,
            wmap.shape(),
            (m.c_out, m.c_in, m.n_samples)
        )));
    }
    let spec = LdConvSpec::new(m.n_samples, m.c_in, m.c_out, m.stride, wmap.into_data())?;
    let offsets = OffsetField::new(load_map(dir, &m.offsets)?)?;
    if offsets.n_samples != m.n_samples {
        return Err(LdConvError::Shape(format!(
            "{} holds {} samples, manifest declares {}",
            m.offsets, offsets.n_samples, m.n_samples
        )));
    }
    let input = m.input.as_deref().map(|f| load_map(dir, f)).transpose()?;
    if let Some(fm) = &input {
        let (c, h, w) = fm.shape();
        let grid = (output_len(h, m.stride), output_len(w, m.stride));
        if c != m.c_in || grid != offsets.grid() {
            return Err(LdConvError::Shape(format!(
                "input {:?} does not match c_in {} and offset grid {:?}",
                fm.shape(),
                m.c_in,
                offsets.grid()
            )));
        }
    }
    Ok(LdConvFixture {
        spec,
        offsets,
        input,
    })
}
