//! Axis-aligned box algebra in the continuous pixel frame of the original
//! screenshot: proposal construction, containment, squareness interpolation,
//! minimum-size enforcement and the crop/resize coordinate transforms.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GeometryError {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
}

/// A point in pixel coordinates. `x` grows rightwards, `y` downwards.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Point {
    pub x: f64,
    pub y: f64,
}

impl Point {
    pub const fn new(x: f64, y: f64) -> Self {
        Self { x, y }
    }

    pub fn is_finite(&self) -> bool {
        self.x.is_finite() && self.y.is_finite()
    }

    pub fn distance(&self, other: &Point) -> f64 {
        (self.x - other.x).hypot(self.y - other.y)
    }
}

/// Positive integer raster extent.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ImageSize {
    pub width: u32,
    pub height: u32,
}

impl ImageSize {
    pub fn new(width: u32, height: u32) -> Result<Self, GeometryError> {
        if width == 0 || height == 0 {
            return Err(GeometryError::InvalidArgument(format!(
                "image size must be positive, got {width}x{height}"
            )));
        }
        Ok(Self { width, height })
    }

    pub fn of(image: &image::RgbImage) -> Self {
        Self {
            width: image.width().max(1),
            height: image.height().max(1),
        }
    }

    pub fn full_box(&self) -> BBox {
        BBox {
            x_min: 0.0,
            y_min: 0.0,
            x_max: self.width as f64,
            y_max: self.height as f64,
        }
    }

    pub fn contains(&self, p: &Point) -> bool {
        p.x >= 0.0 && p.y >= 0.0 && p.x <= self.width as f64 && p.y <= self.height as f64
    }
}

/// Axis-aligned box `[x_min, x_max] x [y_min, y_max]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub x_min: f64,
    pub y_min: f64,
    pub x_max: f64,
    pub y_max: f64,
}

impl BBox {
    pub fn new(x_min: f64, y_min: f64, x_max: f64, y_max: f64) -> Result<Self, GeometryError> {
        let b = Self {
            x_min,
            y_min,
            x_max,
            y_max,
        };
        if !(x_min.is_finite() && y_min.is_finite() && x_max.is_finite() && y_max.is_finite()) {
            return Err(GeometryError::InvalidArgument(format!(
                "non-finite box {b:?}"
            )));
        }
        if x_min >= x_max || y_min >= y_max {
            return Err(GeometryError::InvalidArgument(format!(
                "degenerate box {b:?}"
            )));
        }
        Ok(b)
    }

    pub fn from_center(center: Point, width: f64, height: f64) -> Self {
        Self {
            x_min: center.x - width / 2.0,
            y_min: center.y - height / 2.0,
            x_max: center.x + width / 2.0,
            y_max: center.y + height / 2.0,
        }
    }

    pub fn width(&self) -> f64 {
        self.x_max - self.x_min
    }

    pub fn height(&self) -> f64 {
        self.y_max - self.y_min
    }

    pub fn area(&self) -> f64 {
        self.width().max(0.0) * self.height().max(0.0)
    }

    pub fn center(&self) -> Point {
        Point::new(
            (self.x_min + self.x_max) / 2.0,
            (self.y_min + self.y_max) / 2.0,
        )
    }

    /// Inclusive containment.
    pub fn contains(&self, p: &Point) -> bool {
        p.x >= self.x_min && p.x <= self.x_max && p.y >= self.y_min && p.y <= self.y_max
    }

    pub fn contains_box(&self, other: &BBox) -> bool {
        other.x_min >= self.x_min
            && other.y_min >= self.y_min
            && other.x_max <= self.x_max
            && other.y_max <= self.y_max
    }

    pub fn intersection_area(&self, other: &BBox) -> f64 {
        let w = self.x_max.min(other.x_max) - self.x_min.max(other.x_min);
        let h = self.y_max.min(other.y_max) - self.y_min.max(other.y_min);
        w.max(0.0) * h.max(0.0)
    }

    pub fn iou(&self, other: &BBox) -> f64 {
        let inter = self.intersection_area(other);
        let union = self.area() + other.area() - inter;
        if union <= 0.0 {
            0.0
        } else {
            inter / union
        }
    }

    /// Snap to integer pixels: floor the min corner, ceil the max corner,
    /// then clip to the image.
    pub fn rasterize(&self, image: ImageSize) -> PixelRect {
        let x0 = self.x_min.floor().clamp(0.0, image.width as f64 - 1.0) as u32;
        let y0 = self.y_min.floor().clamp(0.0, image.height as f64 - 1.0) as u32;
        let x1 = self.x_max.ceil().clamp(x0 as f64 + 1.0, image.width as f64) as u32;
        let y1 = self
            .y_max
            .ceil()
            .clamp(y0 as f64 + 1.0, image.height as f64) as u32;
        PixelRect {
            x: x0,
            y: y0,
            width: x1 - x0,
            height: y1 - y0,
        }
    }
}

/// Integer crop rectangle, always non-empty and inside the image it was
/// rasterized against.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PixelRect {
    pub x: u32,
    pub y: u32,
    pub width: u32,
    pub height: u32,
}

impl PixelRect {
    pub fn to_box(self) -> BBox {
        BBox {
            x_min: self.x as f64,
            y_min: self.y as f64,
            x_max: (self.x + self.width) as f64,
            y_max: (self.y + self.height) as f64,
        }
    }
}

/// Maps a resized crop back into the original frame.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CropTransform {
    pub origin: Point,
    pub s_x: f64,
    pub s_y: f64,
    pub crop: BBox,
    pub target: ImageSize,
}

impl CropTransform {
    /// Original frame to resized-crop frame; inverse of [`remap_to_global`].
    pub fn to_local(&self, global: Point) -> Point {
        Point::new(
            (global.x - self.origin.x) * self.s_x,
            (global.y - self.origin.y) * self.s_y,
        )
    }
}

fn require_positive(name: &str, v: f64) -> Result<(), GeometryError> {
    if v > 0.0 && v.is_finite() {
        Ok(())
    } else {
        Err(GeometryError::InvalidArgument(format!(
            "{name} must be positive and finite, got {v}"
        )))
    }
}

/// The 3-sigma box around a single hypothesis. Not clamped.
pub fn local_box(center: Point, sigma_x: f64, sigma_y: f64) -> Result<BBox, GeometryError> {
    require_positive("sigma_x", sigma_x)?;
    require_positive("sigma_y", sigma_y)?;
    Ok(BBox {
        x_min: center.x - 3.0 * sigma_x,
        y_min: center.y - 3.0 * sigma_y,
        x_max: center.x + 3.0 * sigma_x,
        y_max: center.y + 3.0 * sigma_y,
    })
}

/// Box of size `(alpha * sigma_x, alpha * sigma_y)` centred on the field mean.
pub fn global_box(
    mean: Point,
    sigma_x: f64,
    sigma_y: f64,
    alpha: f64,
) -> Result<BBox, GeometryError> {
    require_positive("sigma_x", sigma_x)?;
    require_positive("sigma_y", sigma_y)?;
    require_positive("alpha", alpha)?;
    Ok(BBox::from_center(mean, alpha * sigma_x, alpha * sigma_y))
}

fn adjust_axis(lo: f64, hi: f64, extent: f64) -> (f64, f64) {
    let len = hi - lo;
    if len >= extent {
        return (0.0, extent);
    }
    if lo < 0.0 {
        (0.0, len)
    } else if hi > extent {
        (extent - len, extent)
    } else {
        (lo, hi)
    }
}

/// Translate the box into the image without changing its size. A side that
/// is longer than the image is clamped to the full extent instead.
pub fn boundary_adjust(b: BBox, image: ImageSize) -> BBox {
    let (x_min, x_max) = adjust_axis(b.x_min, b.x_max, image.width as f64);
    let (y_min, y_max) = adjust_axis(b.y_min, b.y_max, image.height as f64);
    BBox {
        x_min,
        y_min,
        x_max,
        y_max,
    }
}

/// Interpolate each side towards `max(W, H)` by `lambda`, keeping the center.
pub fn shape_aware_zoom(b: BBox, lambda: f64) -> Result<BBox, GeometryError> {
    if !(0.0..=1.0).contains(&lambda) {
        return Err(GeometryError::InvalidArgument(format!(
            "lambda must lie in [0, 1], got {lambda}"
        )));
    }
    let (w, h) = (b.width(), b.height());
    let side = w.max(h);
    let w_final = w + lambda * (side - w);
    let h_final = h + lambda * (side - h);
    if w_final == w && h_final == h {
        return Ok(b);
    }
    Ok(BBox::from_center(b.center(), w_final, h_final))
}

/// Grow each side symmetrically to at least `min(min_side, image side)`,
/// then restore containment.
pub fn enforce_min_size(b: BBox, min_side: f64, image: ImageSize) -> BBox {
    let min_w = min_side.min(image.width as f64);
    let min_h = min_side.min(image.height as f64);
    let c = b.center();
    let mut out = b;
    if b.width() < min_w {
        out.x_min = c.x - min_w / 2.0;
        out.x_max = c.x + min_w / 2.0;
    }
    if b.height() < min_h {
        out.y_min = c.y - min_h / 2.0;
        out.y_max = c.y + min_h / 2.0;
    }
    boundary_adjust(out, image)
}

pub fn make_crop_transform(b: BBox, target: ImageSize) -> Result<CropTransform, GeometryError> {
    if !(b.width() > 0.0 && b.height() > 0.0) {
        return Err(GeometryError::InvalidArgument(format!(
            "crop box has zero area: {b:?}"
        )));
    }
    Ok(CropTransform {
        origin: Point::new(b.x_min, b.y_min),
        s_x: target.width as f64 / b.width(),
        s_y: target.height as f64 / b.height(),
        crop: b,
        target,
    })
}

pub fn remap_to_global(local: Point, t: &CropTransform) -> Point {
    Point::new(t.origin.x + local.x / t.s_x, t.origin.y + local.y / t.s_y)
}

/// How a crop is resized before it is sent to the backend.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "policy")]
pub enum ResizePolicy {
    /// Uniform scale so the longer side equals `long_side`.
    LongSide { long_side: u32 },
    /// Independent per-axis scaling to a fixed resolution.
    Fixed { width: u32, height: u32 },
}

impl Default for ResizePolicy {
    fn default() -> Self {
        ResizePolicy::LongSide { long_side: 1288 }
    }
}

impl ResizePolicy {
    pub fn target_for(&self, crop_width: u32, crop_height: u32) -> ImageSize {
        match *self {
            ResizePolicy::LongSide { long_side } => {
                let scale = long_side as f64 / crop_width.max(crop_height) as f64;
                ImageSize {
                    width: ((crop_width as f64 * scale).round() as u32).max(1),
                    height: ((crop_height as f64 * scale).round() as u32).max(1),
                }
            }
            ResizePolicy::Fixed { width, height } => ImageSize {
                width: width.max(1),
                height: height.max(1),
            },
        }
    }
}
