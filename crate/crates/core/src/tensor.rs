//! Dense feature-map kernels: Gaussian smoothing, nearest-neighbour
//! upsampling, 2D convolution and the scale-axis 3D convolution.
//!
//! All arrays are row-major and contiguous. Every output element is produced
//! with a fixed summation order, so results do not depend on how work is
//! split across threads.

pub mod fmap;

use thiserror::Error;

use crate::exec;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("all dimensions must be at least 1, got {0:?}")]
    ZeroDim(Vec<usize>),
    #[error("non-finite value at flat index {0}")]
    NonFinite(usize),
    #[error("sigma must be positive and finite, got {0}")]
    BadSigma(f64),
    #[error("kernel radius must be at least 1")]
    ZeroRadius,
    #[error("convolution output would be empty: {0}")]
    EmptyOutput(String),
    #[error("factor must be at least 1")]
    ZeroFactor,
}

fn check_dims(dims: &[usize]) -> Result<(), TensorError> {
    if dims.contains(&0) {
        return Err(TensorError::ZeroDim(dims.to_vec()));
    }
    Ok(())
}

fn check_data(dims: &[usize], data: &[f64]) -> Result<(), TensorError> {
    check_dims(dims)?;
    let n: usize = dims.iter().product();
    if data.len() != n {
        return Err(TensorError::Shape(format!(
            "data length {} does not match dims {:?}",
            data.len(),
            dims
        )));
    }
    if let Some(i) = data.iter().position(|v| !v.is_finite()) {
        return Err(TensorError::NonFinite(i));
    }
    Ok(())
}

/// A `channels × height × width` array.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    channels: usize,
    height: usize,
    width: usize,
    data: Vec<f64>,
}

impl FeatureMap {
    pub fn new(
        channels: usize,
        height: usize,
        width: usize,
        data: Vec<f64>,
    ) -> Result<Self, TensorError> {
        check_data(&[channels, height, width], &data)?;
        Ok(Self {
            channels,
            height,
            width,
            data,
        })
    }

    pub fn zeros(channels: usize, height: usize, width: usize) -> Result<Self, TensorError> {
        Self::new(
            channels,
            height,
            width,
            vec![0.0; channels * height * width],
        )
    }

    pub fn from_fn<F: Fn(usize, usize, usize) -> f64>(
        channels: usize,
        height: usize,
        width: usize,
        f: F,
    ) -> Result<Self, TensorError> {
        let mut data = Vec::with_capacity(channels * height * width);
        for c in 0..channels {
            for y in 0..height {
                for x in 0..width {
                    data.push(f(c, y, x));
                }
            }
        }
        Self::new(channels, height, width, data)
    }

    pub fn channels(&self) -> usize {
        self.channels
    }
    pub fn height(&self) -> usize {
        self.height
    }
    pub fn width(&self) -> usize {
        self.width
    }
    pub fn shape(&self) -> (usize, usize, usize) {
        (self.channels, self.height, self.width)
    }
    pub fn data(&self) -> &[f64] {
        &self.data
    }
    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn get(&self, c: usize, y: usize, x: usize) -> f64 {
        self.data[(c * self.height + y) * self.width + x]
    }

    pub fn channel(&self, c: usize) -> &[f64] {
        let n = self.height * self.width;
        &self.data[c * n..(c + 1) * n]
    }

    /// Element-wise `alpha·self + beta·other`.
    pub fn axpby(
        &self,
        alpha: f64,
        other: &FeatureMap,
        beta: f64,
    ) -> Result<FeatureMap, TensorError> {
        if self.shape() != other.shape() {
            return Err(TensorError::Shape(format!(
                "{:?} vs {:?}",
                self.shape(),
                other.shape()
            )));
        }
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| alpha * a + beta * b)
            .collect();
        FeatureMap::new(self.channels, self.height, self.width, data)
    }

    /// Largest absolute element-wise difference.
    pub fn max_abs_diff(&self, other: &FeatureMap) -> f64 {
        assert_eq!(self.shape(), other.shape(), "shape mismatch");
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

/// A `channels × depth × height × width` array; depth indexes scale levels.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureVolume {
    channels: usize,
    depth: usize,
    height: usize,
    width: usize,
    data: Vec<f64>,
}

impl FeatureVolume {
    pub fn new(
        channels: usize,
        depth: usize,
        height: usize,
        width: usize,
        data: Vec<f64>,
    ) -> Result<Self, TensorError> {
        check_data(&[channels, depth, height, width], &data)?;
        Ok(Self {
            channels,
            depth,
            height,
            width,
            data,
        })
    }

    /// Stacks same-shaped maps along a new depth axis, in the given order.
    pub fn stack(levels: &[FeatureMap]) -> Result<Self, TensorError> {
        let first = levels
            .first()
            .ok_or_else(|| TensorError::Shape("cannot stack zero maps".into()))?;
        let (c, h, w) = first.shape();
        if let Some(bad) = levels.iter().find(|m| m.shape() != (c, h, w)) {
            return Err(TensorError::Shape(format!(
                "stacked maps must share a shape: {:?} vs {:?}",
                (c, h, w),
                bad.shape()
            )));
        }
        let d = levels.len();
        let hw = h * w;
        let mut data = Vec::with_capacity(c * d * hw);
        for ch in 0..c {
            for m in levels {
                data.extend_from_slice(&m.data[ch * hw..(ch + 1) * hw]);
            }
        }
        Self::new(c, d, h, w, data)
    }

    pub fn shape(&self) -> (usize, usize, usize, usize) {
        (self.channels, self.depth, self.height, self.width)
    }
    pub fn depth(&self) -> usize {
        self.depth
    }
    pub fn data(&self) -> &[f64] {
        &self.data
    }

    /// Depth slice `d` as a feature map.
    pub fn slice(&self, d: usize) -> FeatureMap {
        assert!(d < self.depth, "depth index out of range");
        let hw = self.height * self.width;
        let mut data = Vec::with_capacity(self.channels * hw);
        for c in 0..self.channels {
            let off = (c * self.depth + d) * hw;
            data.extend_from_slice(&self.data[off..off + hw]);
        }
        FeatureMap {
            channels: self.channels,
            height: self.height,
            width: self.width,
            data,
        }
    }
}

/// Weights of a 2D convolution, `c_out × c_in × k × k`.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvWeights {
    c_out: usize,
    c_in: usize,
    k: usize,
    data: Vec<f64>,
}

impl ConvWeights {
    pub fn new(c_out: usize, c_in: usize, k: usize, data: Vec<f64>) -> Result<Self, TensorError> {
        check_data(&[c_out, c_in, k, k], &data)?;
        Ok(Self {
            c_out,
            c_in,
            k,
            data,
        })
    }

    /// 1×1 identity mapping of `c` channels.
    pub fn identity(c: usize) -> Self {
        let mut data = vec![0.0; c * c];
        for i in 0..c {
            data[i * c + i] = 1.0;
        }
        Self {
            c_out: c,
            c_in: c,
            k: 1,
            data,
        }
    }

    pub fn c_out(&self) -> usize {
        self.c_out
    }
    pub fn c_in(&self) -> usize {
        self.c_in
    }
    pub fn k(&self) -> usize {
        self.k
    }
    pub fn data(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn get(&self, o: usize, i: usize, ky: usize, kx: usize) -> f64 {
        self.data[((o * self.c_in + i) * self.k + ky) * self.k + kx]
    }

    /// Packs into a `(c_out, c_in, k·k)` map for storage.
    pub fn to_map(&self) -> FeatureMap {
        FeatureMap {
            channels: self.c_out,
            height: self.c_in,
            width: self.k * self.k,
            data: self.data.clone(),
        }
    }

    /// Inverse of [`ConvWeights::to_map`]; the map width must be `k·k`.
    pub fn from_map(fm: &FeatureMap, k: usize) -> Result<Self, TensorError> {
        if fm.width != k * k {
            return Err(TensorError::Shape(format!(
                "weight map width {} is not {k}x{k}",
                fm.width
            )));
        }
        Self::new(fm.channels, fm.height, k, fm.data.clone())
    }
}

/// Weights of the scale-axis 3D convolution, `c_out × c_in × depth × k × k`.
#[derive(Debug, Clone, PartialEq)]
pub struct Conv3dWeights {
    c_out: usize,
    c_in: usize,
    depth: usize,
    k: usize,
    data: Vec<f64>,
}

impl Conv3dWeights {
    pub fn new(
        c_out: usize,
        c_in: usize,
        depth: usize,
        k: usize,
        data: Vec<f64>,
    ) -> Result<Self, TensorError> {
        check_data(&[c_out, c_in, depth, k, k], &data)?;
        if k.is_multiple_of(2) {
            return Err(TensorError::Shape(format!(
                "3D kernel size must be odd, got {k}"
            )));
        }
        Ok(Self {
            c_out,
            c_in,
            depth,
            k,
            data,
        })
    }

    pub fn c_out(&self) -> usize {
        self.c_out
    }
    pub fn c_in(&self) -> usize {
        self.c_in
    }
    pub fn depth(&self) -> usize {
        self.depth
    }
    pub fn k(&self) -> usize {
        self.k
    }
    pub fn data(&self) -> &[f64] {
        &self.data
    }

    /// Packs into a `(c_out, c_in·depth, k·k)` map for storage.
    pub fn to_map(&self) -> FeatureMap {
        FeatureMap {
            channels: self.c_out,
            height: self.c_in * self.depth,
            width: self.k * self.k,
            data: self.data.clone(),
        }
    }

    /// Inverse of [`Conv3dWeights::to_map`].
    pub fn from_map(fm: &FeatureMap, depth: usize, k: usize) -> Result<Self, TensorError> {
        if depth == 0 || !fm.height.is_multiple_of(depth) || fm.width != k * k {
            return Err(TensorError::Shape(format!(
                "weight map {:?} does not fit depth {depth}, kernel {k}x{k}",
                fm.shape()
            )));
        }
        Self::new(fm.channels, fm.height / depth, depth, k, fm.data.clone())
    }

    #[inline]
    pub fn get(&self, o: usize, i: usize, d: usize, ky: usize, kx: usize) -> f64 {
        self.data[(((o * self.c_in + i) * self.depth + d) * self.k + ky) * self.k + kx]
    }

    /// The 2D weights acting on depth slice `d`.
    pub fn depth_slice(&self, d: usize) -> ConvWeights {
        let mut data = Vec::with_capacity(self.c_out * self.c_in * self.k * self.k);
        for o in 0..self.c_out {
            for i in 0..self.c_in {
                for ky in 0..self.k {
                    for kx in 0..self.k {
                        data.push(self.get(o, i, d, ky, kx));
                    }
                }
            }
        }
        ConvWeights {
            c_out: self.c_out,
            c_in: self.c_in,
            k: self.k,
            data,
        }
    }
}

/// Normalized, truncated 2D Gaussian on the grid `[-radius, radius]²`.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianKernel {
    sigma: f64,
    radius: usize,
    weights: Vec<f64>,
    /// Normalized 1D profile; `weights` is its outer product with itself.
    profile: Vec<f64>,
}

impl GaussianKernel {
    pub fn sigma(&self) -> f64 {
        self.sigma
    }
    pub fn radius(&self) -> usize {
        self.radius
    }
    pub fn size(&self) -> usize {
        2 * self.radius + 1
    }
    /// Row-major `(2r+1)²` weights, indexed `[(v + r) * size + (u + r)]`.
    pub fn weights(&self) -> &[f64] {
        &self.weights
    }
    pub fn profile(&self) -> &[f64] {
        &self.profile
    }
    pub fn at(&self, dy: isize, dx: isize) -> f64 {
        let r = self.radius as isize;
        self.weights[((dy + r) * (2 * r + 1) + (dx + r)) as usize]
    }
}

/// Default truncation radius `ceil(3σ)`, at least 1.
pub fn default_radius(sigma: f64) -> usize {
    ((3.0 * sigma).ceil() as usize).max(1)
}

pub fn gaussian_kernel(sigma: f64, radius: usize) -> Result<GaussianKernel, TensorError> {
    if !(sigma > 0.0 && sigma.is_finite()) {
        return Err(TensorError::BadSigma(sigma));
    }
    if radius == 0 {
        return Err(TensorError::ZeroRadius);
    }
    let r = radius as isize;
    let two_s2 = 2.0 * sigma * sigma;
    let raw: Vec<f64> = (-r..=r)
        .map(|x| (-((x * x) as f64) / two_s2).exp())
        .collect();
    let total: f64 = raw.iter().sum();
    let profile: Vec<f64> = raw.iter().map(|v| v / total).collect();
    let n = profile.len();
    let mut weights = Vec::with_capacity(n * n);
    for py in &profile {
        for px in &profile {
            weights.push(py * px);
        }
    }
    Ok(GaussianKernel {
        sigma,
        radius,
        weights,
        profile,
    })
}

#[inline]
fn clamp_index(i: isize, n: usize) -> usize {
    i.clamp(0, n as isize - 1) as usize
}

/// Per-channel convolution with the 2D kernel, edge-replicated borders.
pub fn gaussian_smooth(fm: &FeatureMap, k: &GaussianKernel) -> FeatureMap {
    let (c, h, w) = fm.shape();
    let r = k.radius as isize;
    let mut out = vec![0.0; c * h * w];
    exec::for_each_chunk_mut(&mut out, h * w, |ch, plane| {
        let src = fm.channel(ch);
        for y in 0..h {
            for x in 0..w {
                let mut acc = 0.0;
                for v in -r..=r {
                    let sy = clamp_index(y as isize - v, h);
                    for u in -r..=r {
                        let sx = clamp_index(x as isize - u, w);
                        acc += src[sy * w + sx] * k.at(v, u);
                    }
                }
                plane[y * w + x] = acc;
            }
        }
    });
    FeatureMap {
        channels: c,
        height: h,
        width: w,
        data: out,
    }
}

/// Horizontal then vertical 1D passes with the kernel's profile.
pub fn gaussian_smooth_separable(fm: &FeatureMap, k: &GaussianKernel) -> FeatureMap {
    let (c, h, w) = fm.shape();
    let r = k.radius as isize;
    let p = &k.profile;
    let mut out = vec![0.0; c * h * w];
    exec::for_each_chunk_mut(&mut out, h * w, |ch, plane| {
        let src = fm.channel(ch);
        let mut tmp = vec![0.0; h * w];
        for y in 0..h {
            for x in 0..w {
                let mut acc = 0.0;
                for u in -r..=r {
                    acc += src[y * w + clamp_index(x as isize - u, w)] * p[(u + r) as usize];
                }
                tmp[y * w + x] = acc;
            }
        }
        for y in 0..h {
            for x in 0..w {
                let mut acc = 0.0;
                for v in -r..=r {
                    acc += tmp[clamp_index(y as isize - v, h) * w + x] * p[(v + r) as usize];
                }
                plane[y * w + x] = acc;
            }
        }
    });
    FeatureMap {
        channels: c,
        height: h,
        width: w,
        data: out,
    }
}

/// Replicates each pixel `factor × factor` times.
pub fn upsample_nearest(fm: &FeatureMap, factor: usize) -> Result<FeatureMap, TensorError> {
    if factor == 0 {
        return Err(TensorError::ZeroFactor);
    }
    let (c, h, w) = fm.shape();
    let (oh, ow) = (h * factor, w * factor);
    FeatureMap::from_fn(c, oh, ow, |ch, y, x| fm.get(ch, y / factor, x / factor))
}

/// Non-overlapping `factor × factor` mean pooling. Dimensions must divide.
pub fn avg_pool(fm: &FeatureMap, factor: usize) -> Result<FeatureMap, TensorError> {
    if factor == 0 {
        return Err(TensorError::ZeroFactor);
    }
    let (c, h, w) = fm.shape();
    if h % factor != 0 || w % factor != 0 {
        return Err(TensorError::Shape(format!(
            "{h}x{w} is not divisible by {factor}"
        )));
    }
    let n = (factor * factor) as f64;
    FeatureMap::from_fn(c, h / factor, w / factor, |ch, y, x| {
        let mut acc = 0.0;
        for dy in 0..factor {
            for dx in 0..factor {
                acc += fm.get(ch, y * factor + dy, x * factor + dx);
            }
        }
        acc / n
    })
}

/// Output length of a convolution along one axis, if non-empty.
pub fn conv_out_len(n: usize, k: usize, stride: usize, padding: usize) -> Option<usize> {
    let span = (n + 2 * padding).checked_sub(k)?;
    Some(span / stride + 1)
}

/// Cross-correlation with zero padding, no bias.
pub fn conv2d(
    fm: &FeatureMap,
    weights: &ConvWeights,
    stride: usize,
    padding: usize,
) -> Result<FeatureMap, TensorError> {
    let (c, h, w) = fm.shape();
    if weights.c_in != c {
        return Err(TensorError::Shape(format!(
            "weights expect {} input channels, map has {}",
            weights.c_in, c
        )));
    }
    if stride == 0 || weights.k == 0 {
        return Err(TensorError::Shape(
            "stride and kernel size must be at least 1".into(),
        ));
    }
    let k = weights.k;
    let (Some(oh), Some(ow)) = (
        conv_out_len(h, k, stride, padding),
        conv_out_len(w, k, stride, padding),
    ) else {
        return Err(TensorError::EmptyOutput(format!(
            "{h}x{w} input, kernel {k}, padding {padding}"
        )));
    };
    let mut out = vec![0.0; weights.c_out * oh * ow];
    let pad = padding as isize;
    exec::for_each_chunk_mut(&mut out, oh * ow, |o, plane| {
        for oy in 0..oh {
            for ox in 0..ow {
                let mut acc = 0.0;
                for i in 0..c {
                    let src = fm.channel(i);
                    for ky in 0..k {
                        let sy = (oy * stride + ky) as isize - pad;
                        if sy < 0 || sy >= h as isize {
                            continue;
                        }
                        for kx in 0..k {
                            let sx = (ox * stride + kx) as isize - pad;
                            if sx < 0 || sx >= w as isize {
                                continue;
                            }
                            acc += weights.get(o, i, ky, kx) * src[sy as usize * w + sx as usize];
                        }
                    }
                }
                plane[oy * ow + ox] = acc;
            }
        }
    });
    FeatureMap::new(weights.c_out, oh, ow, out)
}

/// 3D convolution whose kernel spans the whole depth axis. Spatial padding is
/// `(k - 1) / 2` with zeros, so spatial dims are preserved and depth is
/// contracted away.
pub fn conv3d_scale(
    vol: &FeatureVolume,
    weights: &Conv3dWeights,
) -> Result<FeatureMap, TensorError> {
    let (c, d, h, w) = vol.shape();
    if weights.depth != d {
        return Err(TensorError::Shape(format!(
            "kernel depth {} does not match volume depth {}",
            weights.depth, d
        )));
    }
    if weights.c_in != c {
        return Err(TensorError::Shape(format!(
            "weights expect {} input channels, volume has {}",
            weights.c_in, c
        )));
    }
    let k = weights.k;
    let pad = ((k - 1) / 2) as isize;
    let hw = h * w;
    let mut out = vec![0.0; weights.c_out * hw];
    exec::for_each_chunk_mut(&mut out, hw, |o, plane| {
        for y in 0..h {
            for x in 0..w {
                let mut acc = 0.0;
                for i in 0..c {
                    for z in 0..d {
                        let src = &vol.data[(i * d + z) * hw..(i * d + z + 1) * hw];
                        for ky in 0..k {
                            let sy = (y + ky) as isize - pad;
                            if sy < 0 || sy >= h as isize {
                                continue;
                            }
                            for kx in 0..k {
                                let sx = (x + kx) as isize - pad;
                                if sx < 0 || sx >= w as isize {
                                    continue;
                                }
                                acc += weights.get(o, i, z, ky, kx)
                                    * src[sy as usize * w + sx as usize];
                            }
                        }
                    }
                }
                plane[y * w + x] = acc;
            }
        }
    });
    FeatureMap::new(weights.c_out, h, w, out)
}
