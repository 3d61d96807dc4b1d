//! Axis-aligned boxes, overlap measures, Gaussian embedding and crop-window
//! coordinate transforms.
//!
//! Boxes are stored in corner form `(x0, y0, x1, y1)` in pixel units. The
//! center-size view `(cx, cy, w, h)` is derived on demand and is the
//! parametrization the losses differentiate against.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GeometryError {
    #[error("degenerate box: width {w} and height {h} must both be positive")]
    Degenerate { w: f64, h: f64 },
    #[error("non-finite box coordinate")]
    NonFinite,
    #[error("invalid crop window ({x0},{y0},{x1},{y1}) for a {image_w}x{image_h} image")]
    InvalidWindow {
        x0: u32,
        y0: u32,
        x1: u32,
        y1: u32,
        image_w: u32,
        image_h: u32,
    },
    #[error("box is not visible in the window")]
    NotVisible,
    #[error("box lies fully outside the image")]
    OutsideImage,
    #[error("scale factors must be positive, got ({0}, {1})")]
    BadScale(f64, f64),
}

/// Axis-aligned bounding box in pixel coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "[f64; 4]", into = "[f64; 4]")]
pub struct BBox {
    x0: f64,
    y0: f64,
    x1: f64,
    y1: f64,
}

impl BBox {
    /// Builds a box from corners. Rejects non-finite and zero/negative extents.
    pub fn from_corners(x0: f64, y0: f64, x1: f64, y1: f64) -> Result<Self, GeometryError> {
        if !(x0.is_finite() && y0.is_finite() && x1.is_finite() && y1.is_finite()) {
            return Err(GeometryError::NonFinite);
        }
        if x1 <= x0 || y1 <= y0 {
            return Err(GeometryError::Degenerate {
                w: x1 - x0,
                h: y1 - y0,
            });
        }
        Ok(Self { x0, y0, x1, y1 })
    }

    pub fn from_center(cx: f64, cy: f64, w: f64, h: f64) -> Result<Self, GeometryError> {
        if !(cx.is_finite() && cy.is_finite() && w.is_finite() && h.is_finite()) {
            return Err(GeometryError::NonFinite);
        }
        if w <= 0.0 || h <= 0.0 {
            return Err(GeometryError::Degenerate { w, h });
        }
        Self::from_corners(cx - 0.5 * w, cy - 0.5 * h, cx + 0.5 * w, cy + 0.5 * h)
    }

    #[inline]
    pub fn x0(&self) -> f64 {
        self.x0
    }
    #[inline]
    pub fn y0(&self) -> f64 {
        self.y0
    }
    #[inline]
    pub fn x1(&self) -> f64 {
        self.x1
    }
    #[inline]
    pub fn y1(&self) -> f64 {
        self.y1
    }
    #[inline]
    pub fn corners(&self) -> [f64; 4] {
        [self.x0, self.y0, self.x1, self.y1]
    }
    #[inline]
    pub fn cx(&self) -> f64 {
        0.5 * (self.x0 + self.x1)
    }
    #[inline]
    pub fn cy(&self) -> f64 {
        0.5 * (self.y0 + self.y1)
    }
    #[inline]
    pub fn w(&self) -> f64 {
        self.x1 - self.x0
    }
    #[inline]
    pub fn h(&self) -> f64 {
        self.y1 - self.y0
    }
    #[inline]
    pub fn area(&self) -> f64 {
        self.w() * self.h()
    }

    /// `(cx, cy, w, h)`.
    pub fn center_size(&self) -> [f64; 4] {
        [self.cx(), self.cy(), self.w(), self.h()]
    }

    /// Area of the overlap with `other`, zero when disjoint.
    pub fn intersection_area(&self, other: &BBox) -> f64 {
        let iw = self.x1.min(other.x1) - self.x0.max(other.x0);
        let ih = self.y1.min(other.y1) - self.y0.max(other.y0);
        if iw <= 0.0 || ih <= 0.0 {
            0.0
        } else {
            iw * ih
        }
    }

    /// The overlap region as a box, `None` when it has no area.
    pub fn intersection(&self, other: &BBox) -> Option<BBox> {
        BBox::from_corners(
            self.x0.max(other.x0),
            self.y0.max(other.y0),
            self.x1.min(other.x1),
            self.y1.min(other.y1),
        )
        .ok()
    }

    pub fn contains(&self, other: &BBox) -> bool {
        self.x0 <= other.x0 && self.y0 <= other.y0 && self.x1 >= other.x1 && self.y1 >= other.y1
    }

    pub fn translate(&self, dx: f64, dy: f64) -> Result<BBox, GeometryError> {
        BBox::from_corners(self.x0 + dx, self.y0 + dy, self.x1 + dx, self.y1 + dy)
    }
}

impl TryFrom<[f64; 4]> for BBox {
    type Error = GeometryError;

    fn try_from(c: [f64; 4]) -> Result<Self, Self::Error> {
        BBox::from_corners(c[0], c[1], c[2], c[3])
    }
}

impl From<BBox> for [f64; 4] {
    fn from(b: BBox) -> Self {
        b.corners()
    }
}

/// Center-size box parameters `(cx, cy, w, h)`: the parametrization box
/// regression losses are differentiated against. Perturbing one parameter
/// leaves the others bit-identical, which corner storage cannot offer.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CenterSize {
    cx: f64,
    cy: f64,
    w: f64,
    h: f64,
}

impl CenterSize {
    pub fn new(cx: f64, cy: f64, w: f64, h: f64) -> Result<Self, GeometryError> {
        if !(cx.is_finite() && cy.is_finite() && w.is_finite() && h.is_finite()) {
            return Err(GeometryError::NonFinite);
        }
        if w <= 0.0 || h <= 0.0 {
            return Err(GeometryError::Degenerate { w, h });
        }
        Ok(Self { cx, cy, w, h })
    }

    /// From a `[cx, cy, w, h]` array.
    pub fn from_array(p: [f64; 4]) -> Result<Self, GeometryError> {
        Self::new(p[0], p[1], p[2], p[3])
    }

    #[inline]
    pub fn cx(&self) -> f64 {
        self.cx
    }
    #[inline]
    pub fn cy(&self) -> f64 {
        self.cy
    }
    #[inline]
    pub fn w(&self) -> f64 {
        self.w
    }
    #[inline]
    pub fn h(&self) -> f64 {
        self.h
    }
    #[inline]
    pub fn area(&self) -> f64 {
        self.w * self.h
    }
    pub fn to_array(&self) -> [f64; 4] {
        [self.cx, self.cy, self.w, self.h]
    }
    /// `N((cx, cy), diag(w²/4, h²/4))`.
    pub fn to_gaussian(&self) -> GaussianBox {
        let (hw, hh) = (0.5 * self.w, 0.5 * self.h);
        GaussianBox {
            mean: [self.cx, self.cy],
            var_x: hw * hw,
            var_y: hh * hh,
        }
    }
    /// `(x0, y0, x1, y1)`.
    #[inline]
    pub fn corners(&self) -> [f64; 4] {
        let (hw, hh) = (0.5 * self.w, 0.5 * self.h);
        [self.cx - hw, self.cy - hh, self.cx + hw, self.cy + hh]
    }
    /// Corner form; fails only if the extent vanishes under rounding.
    pub fn to_bbox(&self) -> Result<BBox, GeometryError> {
        let [x0, y0, x1, y1] = self.corners();
        BBox::from_corners(x0, y0, x1, y1)
    }
}

impl From<BBox> for CenterSize {
    fn from(b: BBox) -> Self {
        Self {
            cx: b.cx(),
            cy: b.cy(),
            w: b.w(),
            h: b.h(),
        }
    }
}

impl From<&BBox> for CenterSize {
    fn from(b: &BBox) -> Self {
        (*b).into()
    }
}

/// Intersection over union. Symmetric, in `[0, 1]`.
pub fn iou(a: &BBox, b: &BBox) -> f64 {
    let inter = a.intersection_area(b);
    if inter == 0.0 {
        return 0.0;
    }
    // Commutative sum order keeps iou(a, b) == iou(b, a) bit for bit.
    let union = (a.area() + b.area()) - inter;
    (inter / union).min(1.0)
}

/// Smallest axis-aligned box containing both inputs.
pub fn enclosing_box(a: &BBox, b: &BBox) -> BBox {
    BBox {
        x0: a.x0.min(b.x0),
        y0: a.y0.min(b.y0),
        x1: a.x1.max(b.x1),
        y1: a.y1.max(b.y1),
    }
}

/// Diagonal 2D Gaussian embedding of a box.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GaussianBox {
    pub mean: [f64; 2],
    pub var_x: f64,
    pub var_y: f64,
}

/// `N((cx, cy), diag(w²/4, h²/4))`.
pub fn to_gaussian(b: &BBox) -> GaussianBox {
    CenterSize::from(b).to_gaussian()
}

/// Integer crop rectangle inside an image of known size.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct CropWindow {
    pub x0: u32,
    pub y0: u32,
    pub x1: u32,
    pub y1: u32,
    pub image_w: u32,
    pub image_h: u32,
}

impl CropWindow {
    pub fn new(
        x0: u32,
        y0: u32,
        x1: u32,
        y1: u32,
        image_w: u32,
        image_h: u32,
    ) -> Result<Self, GeometryError> {
        if x0 >= x1 || y0 >= y1 || x1 > image_w || y1 > image_h {
            return Err(GeometryError::InvalidWindow {
                x0,
                y0,
                x1,
                y1,
                image_w,
                image_h,
            });
        }
        Ok(Self {
            x0,
            y0,
            x1,
            y1,
            image_w,
            image_h,
        })
    }

    /// The window covering the whole image.
    pub fn whole(image_w: u32, image_h: u32) -> Result<Self, GeometryError> {
        Self::new(0, 0, image_w, image_h, image_w, image_h)
    }

    pub fn width(&self) -> u32 {
        self.x1 - self.x0
    }

    pub fn height(&self) -> u32 {
        self.y1 - self.y0
    }

    pub fn is_whole_image(&self) -> bool {
        self.x0 == 0 && self.y0 == 0 && self.x1 == self.image_w && self.y1 == self.image_h
    }

    /// The window region in image coordinates.
    pub fn as_box(&self) -> BBox {
        BBox {
            x0: self.x0 as f64,
            y0: self.y0 as f64,
            x1: self.x1 as f64,
            y1: self.y1 as f64,
        }
    }
}

/// Result of projecting an image-frame box into a window.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WindowBox {
    /// Clipped box in window-local coordinates.
    pub local: BBox,
    /// Visible area divided by the full box area.
    pub visible_fraction: f64,
}

/// Expresses `b` in window-local coordinates, clipped to the window.
pub fn image_to_window(b: &BBox, win: &CropWindow) -> Result<WindowBox, GeometryError> {
    let clipped = b
        .intersection(&win.as_box())
        .ok_or(GeometryError::NotVisible)?;
    let visible_fraction = (clipped.area() / b.area()).min(1.0);
    let local = clipped.translate(-(win.x0 as f64), -(win.y0 as f64))?;
    Ok(WindowBox {
        local,
        visible_fraction,
    })
}

/// Maps a box from a resized crop back to full-image pixels.
///
/// `scale_x`/`scale_y` convert resized-crop pixels to crop pixels. The result
/// is clamped to the image bounds.
pub fn window_to_image(
    b: &BBox,
    win: &CropWindow,
    scale_x: f64,
    scale_y: f64,
) -> Result<BBox, GeometryError> {
    if !(scale_x > 0.0 && scale_y > 0.0 && scale_x.is_finite() && scale_y.is_finite()) {
        return Err(GeometryError::BadScale(scale_x, scale_y));
    }
    let ox = win.x0 as f64;
    let oy = win.y0 as f64;
    let (iw, ih) = (win.image_w as f64, win.image_h as f64);
    let x0 = (b.x0 * scale_x + ox).clamp(0.0, iw);
    let y0 = (b.y0 * scale_y + oy).clamp(0.0, ih);
    let x1 = (b.x1 * scale_x + ox).clamp(0.0, iw);
    let y1 = (b.y1 * scale_y + oy).clamp(0.0, ih);
    BBox::from_corners(x0, y0, x1, y1).map_err(|_| GeometryError::OutsideImage)
}
