//! Label visualization: heatmap tint, polygon and box strokes, captions.

use crate::raster::{BoundingBox, Heatmap, ImageRaster, LabeledInstance};

pub const HEATMAP_ALPHA: f32 = 0.4;
const FONT_SCALE: i64 = 2;
const GLYPH_W: i64 = 3;
const GLYPH_H: i64 = 5;

const PALETTE: [[u8; 3]; 8] = [
    [230, 25, 75],
    [60, 180, 75],
    [255, 225, 25],
    [0, 130, 200],
    [245, 130, 48],
    [145, 30, 180],
    [70, 240, 240],
    [240, 50, 230],
];

/// Blue, cyan, green, yellow, red at even stops.
const RAMP: [[f32; 3]; 5] = [
    [0.0, 0.0, 255.0],
    [0.0, 255.0, 255.0],
    [0.0, 255.0, 0.0],
    [255.0, 255.0, 0.0],
    [255.0, 0.0, 0.0],
];

pub fn ramp_color(v: f32) -> [f32; 3] {
    let t = v.clamp(0.0, 1.0) * (RAMP.len() - 1) as f32;
    let i = (t.floor() as usize).min(RAMP.len() - 2);
    let f = t - i as f32;
    let (a, b) = (RAMP[i], RAMP[i + 1]);
    [0, 1, 2].map(|c| a[c] + (b[c] - a[c]) * f)
}

/// Stable color per class token (FNV-1a into a fixed palette).
pub fn class_color(token: &str) -> [u8; 3] {
    let mut h: u32 = 0x811c_9dc5;
    for b in token.bytes() {
        h ^= b as u32;
        h = h.wrapping_mul(0x0100_0193);
    }
    PALETTE[h as usize % PALETTE.len()]
}

/// 3x5 glyph rows, most significant of the low three bits is the left column.
fn glyph(c: char) -> [u8; 5] {
    match c.to_ascii_lowercase() {
        '0' => [7, 5, 5, 5, 7],
        '1' => [2, 6, 2, 2, 7],
        '2' => [7, 1, 7, 4, 7],
        '3' => [7, 1, 7, 1, 7],
        '4' => [5, 5, 7, 1, 1],
        '5' => [7, 4, 7, 1, 7],
        '6' => [7, 4, 7, 5, 7],
        '7' => [7, 1, 1, 1, 1],
        '8' => [7, 5, 7, 5, 7],
        '9' => [7, 5, 7, 1, 7],
        'a' => [2, 5, 7, 5, 5],
        'b' => [6, 5, 6, 5, 6],
        'c' => [3, 4, 4, 4, 3],
        'd' => [6, 5, 5, 5, 6],
        'e' => [7, 4, 6, 4, 7],
        'f' => [7, 4, 6, 4, 4],
        'g' => [3, 4, 5, 5, 3],
        'h' => [5, 5, 7, 5, 5],
        'i' => [7, 2, 2, 2, 7],
        'j' => [1, 1, 1, 5, 2],
        'k' => [5, 5, 6, 5, 5],
        'l' => [4, 4, 4, 4, 7],
        'm' => [5, 7, 7, 5, 5],
        'n' => [6, 5, 5, 5, 5],
        'o' => [2, 5, 5, 5, 2],
        'p' => [6, 5, 6, 4, 4],
        'q' => [2, 5, 5, 6, 3],
        'r' => [6, 5, 6, 5, 5],
        's' => [3, 4, 2, 1, 6],
        't' => [7, 2, 2, 2, 2],
        'u' => [5, 5, 5, 5, 7],
        'v' => [5, 5, 5, 5, 2],
        'w' => [5, 5, 7, 7, 5],
        'x' => [5, 5, 2, 5, 5],
        'y' => [5, 5, 2, 2, 2],
        'z' => [7, 1, 2, 4, 7],
        '.' => [0, 0, 0, 0, 2],
        '-' => [0, 0, 7, 0, 0],
        '_' => [0, 0, 0, 0, 7],
        ' ' => [0; 5],
        _ => [7, 1, 2, 0, 2],
    }
}

struct Canvas {
    img: ImageRaster,
}

impl Canvas {
    fn put(&mut self, x: i64, y: i64, rgb: [u8; 3]) {
        if x >= 0 && y >= 0 && x < self.img.width() as i64 && y < self.img.height() as i64 {
            self.img.put(x as u32, y as u32, rgb);
        }
    }

    /// Bresenham segment.
    fn line(&mut self, (mut x0, mut y0): (i64, i64), (x1, y1): (i64, i64), rgb: [u8; 3]) {
        let dx = (x1 - x0).abs();
        let dy = -(y1 - y0).abs();
        let sx = if x0 < x1 { 1 } else { -1 };
        let sy = if y0 < y1 { 1 } else { -1 };
        let mut err = dx + dy;
        loop {
            self.put(x0, y0, rgb);
            if x0 == x1 && y0 == y1 {
                break;
            }
            let e2 = 2 * err;
            if e2 >= dy {
                err += dy;
                x0 += sx;
            }
            if e2 <= dx {
                err += dx;
                y0 += sy;
            }
        }
    }

    fn rect(&mut self, b: &BoundingBox, rgb: [u8; 3]) {
        let (x0, y0, x1, y1) = (b.x_min as i64, b.y_min as i64, b.x_max() as i64, b.y_max() as i64);
        self.line((x0, y0), (x1, y0), rgb);
        self.line((x1, y0), (x1, y1), rgb);
        self.line((x1, y1), (x0, y1), rgb);
        self.line((x0, y1), (x0, y0), rgb);
    }

    fn fill(&mut self, x: i64, y: i64, w: i64, h: i64, rgb: [u8; 3]) {
        for yy in y..y + h {
            for xx in x..x + w {
                self.put(xx, yy, rgb);
            }
        }
    }

    fn text(&mut self, x: i64, y: i64, s: &str, fg: [u8; 3], bg: [u8; 3]) {
        let advance = (GLYPH_W + 1) * FONT_SCALE;
        let n = s.chars().count() as i64;
        self.fill(x, y, n * advance + FONT_SCALE, (GLYPH_H + 2) * FONT_SCALE, bg);
        for (i, c) in s.chars().enumerate() {
            let gx = x + FONT_SCALE + i as i64 * advance;
            for (row, bits) in glyph(c).iter().enumerate() {
                for col in 0..GLYPH_W {
                    if bits >> (GLYPH_W - 1 - col) & 1 == 1 {
                        let px = gx + col * FONT_SCALE;
                        let py = y + FONT_SCALE + row as i64 * FONT_SCALE;
                        self.fill(px, py, FONT_SCALE, FONT_SCALE, fg);
                    }
                }
            }
        }
    }
}

/// Draws labels over a copy of `image`. A heatmap of matching size is
/// blended in first at [`HEATMAP_ALPHA`]; a mismatched one is ignored.
pub fn render_overlay(image: &ImageRaster, instances: &[LabeledInstance], heatmap: Option<&Heatmap>) -> ImageRaster {
    let mut img = image.clone();
    if let Some(h) = heatmap.filter(|h| (h.width(), h.height()) == (image.width(), image.height())) {
        for y in 0..img.height() {
            for x in 0..img.width() {
                let base = img.get(x, y);
                let tint = ramp_color(h.get(x, y));
                let px = [0, 1, 2].map(|c| {
                    let v = base[c] as f32 * (1.0 - HEATMAP_ALPHA) + tint[c] * HEATMAP_ALPHA;
                    v.round().clamp(0.0, 255.0) as u8
                });
                img.put(x, y, px);
            }
        }
    }
    let mut canvas = Canvas { img };
    for inst in instances {
        let color = class_color(&inst.class_token);
        for poly in &inst.polygons {
            let v = poly.vertices();
            for i in 0..v.len() {
                let (a, b) = (v[i], v[(i + 1) % v.len()]);
                canvas.line(
                    (a.x.round() as i64, a.y.round() as i64),
                    (b.x.round() as i64, b.y.round() as i64),
                    color,
                );
            }
        }
        canvas.rect(&inst.bbox, color);
    }
    // Captions last so strokes never cover them.
    for inst in instances {
        let label = format!("{} {:.2}", inst.class_token, inst.score);
        let caption_h = (GLYPH_H + 2) * FONT_SCALE;
        let (x, y) = (inst.bbox.x_min as i64, inst.bbox.y_min as i64);
        let y = if y >= caption_h { y - caption_h } else { y + 1 };
        canvas.text(x, y, &label, [255, 255, 255], class_color(&inst.class_token));
    }
    canvas.img
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::raster::{normalize_heatmap, FloatRaster, LabelSource, Polygon};

    fn image() -> ImageRaster {
        ImageRaster::filled(64, 48, [20, 20, 20]).unwrap()
    }

    fn inst() -> LabeledInstance {
        LabeledInstance {
            class_token: "car".into(),
            polygons: vec![Polygon::from_pixels(&[(20, 20), (20, 40), (50, 40), (50, 20)]).unwrap()],
            bbox: BoundingBox::from_extremes(20, 20, 50, 40),
            score: 0.87,
            source: LabelSource::Unsupervised,
        }
    }

    #[test]
    fn identity_without_labels() {
        assert_eq!(render_overlay(&image(), &[], None), image());
    }

    #[test]
    fn deterministic_and_visible() {
        let h = normalize_heatmap(&FloatRaster::from_fn(64, 48, |x, y| (x + y) as f32).unwrap()).unwrap();
        let a = render_overlay(&image(), &[inst()], Some(&h));
        assert_eq!(a, render_overlay(&image(), &[inst()], Some(&h)));
        let b = render_overlay(&image(), &[inst()], None);
        let base = image();
        assert!((20..=50).any(|x| b.get(x, 40) != base.get(x, 40)));
        assert_eq!(b.get(35, 30), base.get(35, 30));
    }

    #[test]
    fn ramp_endpoints() {
        assert_eq!(ramp_color(0.0), [0.0, 0.0, 255.0]);
        assert_eq!(ramp_color(1.0), [255.0, 0.0, 0.0]);
        assert_eq!(ramp_color(0.5), [0.0, 255.0, 0.0]);
    }
}
