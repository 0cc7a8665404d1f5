use std::io::Cursor;
use std::path::Path;

use image::{GrayImage, ImageFormat, Rgb, RgbImage};

use super::HarnessError;
use crate::backend::{paint_marker, MarkerStyle};
use crate::field::rasterize_field;
use crate::geometry::{BBox, Point};
use crate::pipeline::Trace;
use crate::proposals::ProposalKind;

pub const SAMPLE_COLOR: [u8; 3] = [30, 90, 255];
pub const LOCAL_COLOR: [u8; 3] = [255, 140, 0];
pub const GLOBAL_COLOR: [u8; 3] = [0, 170, 60];
pub const OUTLINE: u32 = 2;

pub fn gray_png(img: &GrayImage) -> Vec<u8> {
    let mut buf = Cursor::new(Vec::new());
    img.write_to(&mut buf, ImageFormat::Png)
        .expect("PNG encoding into memory cannot fail");
    buf.into_inner()
}

fn write(path: &Path, bytes: &[u8]) -> Result<(), HarnessError> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)
            .map_err(|e| HarnessError::Io(format!("{}: {e}", dir.display())))?;
    }
    std::fs::write(path, bytes).map_err(|e| HarnessError::Io(format!("{}: {e}", path.display())))
}

/// Peak-normalised density of the trace's kernels.
pub fn render_heatmap(trace: &Trace, downsample: u32) -> Result<GrayImage, HarnessError> {
    let h = rasterize_field(&trace.kernels, trace.image_size, downsample)?;
    Ok(h.to_gray_image())
}

pub fn emit_heatmap(trace: &Trace, out_path: &Path, downsample: u32) -> Result<(), HarnessError> {
    write(out_path, &gray_png(&render_heatmap(trace, downsample)?))
}

/// Outline `b` with a band of `OUTLINE` pixels drawn inward from its
/// rasterized edges.
pub fn draw_box(img: &mut RgbImage, b: &BBox, color: [u8; 3]) {
    let r = b.rasterize(crate::geometry::ImageSize::of(img));
    if r.width == 0 || r.height == 0 {
        return;
    }
    let (x1, y1) = (r.x + r.width - 1, r.y + r.height - 1);
    for y in r.y..=y1 {
        for x in r.x..=x1 {
            let edge =
                x < r.x + OUTLINE || y < r.y + OUTLINE || x + OUTLINE > x1 || y + OUTLINE > y1;
            if edge {
                img.put_pixel(x, y, Rgb(color));
            }
        }
    }
}

fn draw_dot(img: &mut RgbImage, p: Point, color: [u8; 3]) {
    let (w, h) = img.dimensions();
    let (cx, cy) = (p.x.floor() as i64, p.y.floor() as i64);
    for y in cy - 2..=cy + 2 {
        for x in cx - 2..=cx + 2 {
            if x >= 0 && y >= 0 && (x as u32) < w && (y as u32) < h {
                img.put_pixel(x as u32, y as u32, Rgb(color));
            }
        }
    }
}

/// Samples as blue dots, local proposals in orange, global proposals in
/// green, and the final answer as the marker.
pub fn render_overlay(image: &RgbImage, trace: &Trace, marker: &MarkerStyle) -> RgbImage {
    let mut out = image.clone();
    for p in &trace.proposals {
        let color = match p.kind {
            ProposalKind::Local => LOCAL_COLOR,
            ProposalKind::Global => GLOBAL_COLOR,
        };
        draw_box(&mut out, &p.bbox, color);
    }
    for s in &trace.samples {
        draw_dot(&mut out, s.point, SAMPLE_COLOR);
    }
    paint_marker(&mut out, trace.final_point, marker);
    out
}

pub fn emit_overlay(image: &RgbImage, trace: &Trace, out_path: &Path) -> Result<(), HarnessError> {
    let img = render_overlay(image, trace, &MarkerStyle::default());
    write(out_path, &crate::backend::http::encode_png(&img))
}
