use image::{Rgb, RgbImage};

use super::scene::Scene;

pub const BACKGROUND: [u8; 3] = [240, 240, 240];
pub const INK: [u8; 3] = [16, 16, 16];

/// 3x5 glyphs, one row per entry, most significant of the 3 bits on the left.
fn glyph(c: char) -> Option<[u8; 5]> {
    Some(match c {
        'A' => [0b010, 0b101, 0b111, 0b101, 0b101],
        'B' => [0b110, 0b101, 0b110, 0b101, 0b110],
        'C' => [0b011, 0b100, 0b100, 0b100, 0b011],
        'D' => [0b110, 0b101, 0b101, 0b101, 0b110],
        'E' => [0b111, 0b100, 0b110, 0b100, 0b111],
        'F' => [0b111, 0b100, 0b110, 0b100, 0b100],
        'G' => [0b011, 0b100, 0b101, 0b101, 0b011],
        'H' => [0b101, 0b101, 0b111, 0b101, 0b101],
        'I' => [0b111, 0b010, 0b010, 0b010, 0b111],
        'J' => [0b001, 0b001, 0b001, 0b101, 0b010],
        'K' => [0b101, 0b101, 0b110, 0b101, 0b101],
        'L' => [0b100, 0b100, 0b100, 0b100, 0b111],
        'M' => [0b101, 0b111, 0b111, 0b101, 0b101],
        'N' => [0b110, 0b101, 0b101, 0b101, 0b101],
        'O' => [0b010, 0b101, 0b101, 0b101, 0b010],
        'P' => [0b110, 0b101, 0b110, 0b100, 0b100],
        'Q' => [0b010, 0b101, 0b101, 0b110, 0b011],
        'R' => [0b110, 0b101, 0b110, 0b101, 0b101],
        'S' => [0b011, 0b100, 0b010, 0b001, 0b110],
        'T' => [0b111, 0b010, 0b010, 0b010, 0b010],
        'U' => [0b101, 0b101, 0b101, 0b101, 0b111],
        'V' => [0b101, 0b101, 0b101, 0b101, 0b010],
        'W' => [0b101, 0b101, 0b111, 0b111, 0b101],
        'X' => [0b101, 0b101, 0b010, 0b101, 0b101],
        'Y' => [0b101, 0b101, 0b010, 0b010, 0b010],
        'Z' => [0b111, 0b001, 0b010, 0b100, 0b111],
        '0' => [0b111, 0b101, 0b101, 0b101, 0b111],
        '1' => [0b010, 0b110, 0b010, 0b010, 0b111],
        '2' => [0b110, 0b001, 0b010, 0b100, 0b111],
        '3' => [0b110, 0b001, 0b010, 0b001, 0b110],
        '4' => [0b101, 0b101, 0b111, 0b001, 0b001],
        '5' => [0b111, 0b100, 0b110, 0b001, 0b110],
        '6' => [0b011, 0b100, 0b111, 0b101, 0b111],
        '7' => [0b111, 0b001, 0b010, 0b010, 0b010],
        '8' => [0b111, 0b101, 0b111, 0b101, 0b111],
        '9' => [0b111, 0b101, 0b111, 0b001, 0b110],
        ' ' => [0; 5],
        _ => return None,
    })
}

fn draw_text(img: &mut RgbImage, text: &str, x0: u32, y0: u32, scale: u32) {
    for (i, c) in text.chars().enumerate() {
        let Some(rows) = glyph(c) else { continue };
        let gx = x0 + i as u32 * 4 * scale;
        for (r, bits) in rows.iter().enumerate() {
            for col in 0..3u32 {
                if bits & (0b100 >> col) == 0 {
                    continue;
                }
                for dy in 0..scale {
                    for dx in 0..scale {
                        let (x, y) = (gx + col * scale + dx, y0 + r as u32 * scale + dy);
                        if x < img.width() && y < img.height() {
                            img.put_pixel(x, y, Rgb(INK));
                        }
                    }
                }
            }
        }
    }
}

/// Flat rectangles with a one pixel border and the label centred inside
/// when it fits.
pub fn render_scene(scene: &Scene) -> RgbImage {
    let mut img = RgbImage::from_pixel(scene.size.width, scene.size.height, Rgb(BACKGROUND));
    for e in &scene.elements {
        let r = e.bbox.rasterize(scene.size);
        if r.width == 0 || r.height == 0 {
            continue;
        }
        for y in r.y..r.y + r.height {
            for x in r.x..r.x + r.width {
                let edge =
                    x == r.x || y == r.y || x == r.x + r.width - 1 || y == r.y + r.height - 1;
                img.put_pixel(x, y, Rgb(if edge { INK } else { e.color }));
            }
        }
        let chars = e.label.chars().count() as u32;
        let inner_w = r.width.saturating_sub(4);
        let inner_h = r.height.saturating_sub(4);
        let scale = (1..=3)
            .rev()
            .find(|s| (chars * 4 - 1) * s <= inner_w && 5 * s <= inner_h);
        if let Some(s) = scale {
            let tw = (chars * 4 - 1) * s;
            draw_text(
                &mut img,
                &e.label,
                r.x + (r.width - tw) / 2,
                r.y + (r.height - 5 * s) / 2,
                s,
            );
        }
    }
    img
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mock_world::scene::{generate_scene, SceneSpec};

    #[test]
    fn background_outside_elements() {
        let s = generate_scene(4, &SceneSpec::default()).unwrap();
        let img = render_scene(&s);
        assert_eq!(img.dimensions(), (1920, 1080));
        for (x, y, p) in img.enumerate_pixels().step_by(97) {
            let (fx, fy) = (x as f64 + 0.5, y as f64 + 0.5);
            let inside = s.elements.iter().any(|e| {
                fx >= e.bbox.x_min && fx <= e.bbox.x_max && fy >= e.bbox.y_min && fy <= e.bbox.y_max
            });
            if !inside {
                assert_eq!(p.0, BACKGROUND);
            }
        }
        for e in &s.elements {
            let r = e.bbox.rasterize(s.size);
            let fill = (r.y..r.y + r.height)
                .flat_map(|y| (r.x..r.x + r.width).map(move |x| (x, y)))
                .filter(|&(x, y)| img.get_pixel(x, y).0 == e.color)
                .count();
            assert!(fill as f64 > 0.3 * e.bbox.area(), "{}", e.label);
            assert_eq!(
                img.get_pixel(e.bbox.x_min as u32, e.bbox.y_min as u32).0,
                INK
            );
        }
    }

    #[test]
    fn rerender_is_identical() {
        let s = generate_scene(9, &SceneSpec::default()).unwrap();
        assert_eq!(render_scene(&s).as_raw(), render_scene(&s).as_raw());
    }

    #[test]
    fn all_label_characters_have_glyphs() {
        for c in ('A'..='Z').chain('0'..='9') {
            assert!(glyph(c).is_some(), "{c}");
        }
    }
}
