use image::{Rgb, RgbImage};
use serde::{Deserialize, Serialize};

use crate::geometry::Point;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum MarkerShape {
    #[default]
    Star5,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MarkerStyle {
    pub shape: MarkerShape,
    /// Outer radius in pixels, at least 4.
    pub radius: f64,
    pub color: [u8; 3],
}

/// Hot pink.
pub const PINK: [u8; 3] = [255, 105, 180];

impl Default for MarkerStyle {
    fn default() -> Self {
        Self {
            shape: MarkerShape::Star5,
            radius: 20.0,
            color: PINK,
        }
    }
}

/// Vertices of a five-pointed star with the first tip pointing up.
fn star_vertices(center: Point, outer: f64) -> [(f64, f64); 10] {
    let inner = 0.4 * outer;
    let mut v = [(0.0, 0.0); 10];
    for (i, slot) in v.iter_mut().enumerate() {
        let r = if i % 2 == 0 { outer } else { inner };
        let angle = -std::f64::consts::FRAC_PI_2 + i as f64 * std::f64::consts::PI / 5.0;
        *slot = (center.x + r * angle.cos(), center.y + r * angle.sin());
    }
    v
}

fn inside_polygon(poly: &[(f64, f64)], x: f64, y: f64) -> bool {
    let mut inside = false;
    let mut j = poly.len() - 1;
    for i in 0..poly.len() {
        let (xi, yi) = poly[i];
        let (xj, yj) = poly[j];
        if (yi > y) != (yj > y) && x < (xj - xi) * (y - yi) / (yj - yi) + xi {
            inside = !inside;
        }
        j = i;
    }
    inside
}

/// Return a copy of `image` with a filled star at `point`. Points outside
/// the image are clamped to its border; pixels of the star that fall
/// outside are skipped.
pub fn draw_marker(image: &RgbImage, point: Point, style: &MarkerStyle) -> RgbImage {
    let mut out = image.clone();
    paint_marker(&mut out, point, style);
    out
}

pub fn paint_marker(out: &mut RgbImage, point: Point, style: &MarkerStyle) {
    let (w, h) = out.dimensions();
    if w == 0 || h == 0 {
        return;
    }
    let radius = style.radius.max(4.0);
    let c = Point::new(
        point.x.clamp(0.0, w as f64 - 1.0),
        point.y.clamp(0.0, h as f64 - 1.0),
    );
    let poly = match style.shape {
        MarkerShape::Star5 => star_vertices(c, radius),
    };
    let x0 = (c.x - radius).floor().max(0.0) as u32;
    let y0 = (c.y - radius).floor().max(0.0) as u32;
    let x1 = ((c.x + radius).ceil() as u32).min(w - 1);
    let y1 = ((c.y + radius).ceil() as u32).min(h - 1);
    for y in y0..=y1 {
        for x in x0..=x1 {
            if inside_polygon(&poly, x as f64 + 0.5, y as f64 + 0.5) {
                out.put_pixel(x, y, Rgb(style.color));
            }
        }
    }
}
