//! 8-connected component extraction.

use crate::raster::{BinaryMask, BoundingBox};

pub const DEFAULT_MIN_AREA_FRACTION: f64 = 0.001;

/// One 8-connected foreground region.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Component {
    width: u32,
    height: u32,
    /// Member pixels in raster order.
    pixels: Vec<(u32, u32)>,
}

impl Component {
    pub fn area(&self) -> usize {
        self.pixels.len()
    }

    pub fn pixels(&self) -> &[(u32, u32)] {
        &self.pixels
    }

    /// First pixel in raster order.
    pub fn top_left(&self) -> (u32, u32) {
        self.pixels[0]
    }

    /// Full-size mask containing only this component.
    pub fn mask(&self) -> BinaryMask {
        let mut m = BinaryMask::empty(self.width, self.height).expect("component of a valid mask");
        for &(x, y) in &self.pixels {
            m.set(x, y, true);
        }
        m
    }

    pub fn bbox(&self) -> BoundingBox {
        fit_bbox_pixels(self.pixels.iter().copied()).expect("components are non-empty")
    }
}

/// Tight hull of a pixel set; `None` when empty.
pub fn fit_bbox_pixels(pixels: impl IntoIterator<Item = (u32, u32)>) -> Option<BoundingBox> {
    let mut it = pixels.into_iter();
    let (x, y) = it.next()?;
    let (mut x0, mut y0, mut x1, mut y1) = (x, y, x, y);
    for (x, y) in it {
        x0 = x0.min(x);
        y0 = y0.min(y);
        x1 = x1.max(x);
        y1 = y1.max(y);
    }
    Some(BoundingBox::from_extremes(x0, y0, x1, y1))
}

/// Tight hull of a mask's foreground.
pub fn fit_bbox(m: &BinaryMask) -> Option<BoundingBox> {
    fit_bbox_pixels(m.foreground())
}

/// All 8-connected components, unfiltered, ordered by descending area then
/// raster position of their first pixel.
pub fn label_components(m: &BinaryMask) -> Vec<Component> {
    let (w, h) = (m.width() as usize, m.height() as usize);
    let mut seen = vec![false; w * h];
    let mut out = Vec::new();
    let mut stack = Vec::new();
    for start in 0..w * h {
        if !m.bits()[start] || seen[start] {
            continue;
        }
        seen[start] = true;
        stack.push(start);
        let mut pixels = Vec::new();
        while let Some(i) = stack.pop() {
            let (x, y) = (i % w, i / w);
            pixels.push((x as u32, y as u32));
            for dy in -1i64..=1 {
                for dx in -1i64..=1 {
                    let (nx, ny) = (x as i64 + dx, y as i64 + dy);
                    if nx < 0 || ny < 0 || nx >= w as i64 || ny >= h as i64 {
                        continue;
                    }
                    let j = ny as usize * w + nx as usize;
                    if m.bits()[j] && !seen[j] {
                        seen[j] = true;
                        stack.push(j);
                    }
                }
            }
        }
        pixels.sort_unstable_by_key(|&(x, y)| (y, x));
        out.push(Component {
            width: m.width(),
            height: m.height(),
            pixels,
        });
    }
    // Discovery order is already raster order of first pixels, so a stable sort
    // by area keeps the tie-break.
    out.sort_by_key(|c| std::cmp::Reverse(c.area()));
    out
}

/// Components whose area reaches `min_area_fraction` of the image.
pub fn extract_components(m: &BinaryMask, min_area_fraction: f64) -> Vec<Component> {
    let image_area = m.width() as f64 * m.height() as f64;
    let min_area = min_area_fraction * image_area;
    label_components(m)
        .into_iter()
        .filter(|c| c.area() as f64 >= min_area)
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn diagonal_touch_is_one_component() {
        let m = BinaryMask::from_ascii(&["##..", "##..", "..##", "..##"]).unwrap();
        assert_eq!(label_components(&m).len(), 1);
    }

    #[test]
    fn gap_separates() {
        let m = BinaryMask::from_ascii(&["##..##", "##..##"]).unwrap();
        let comps = label_components(&m);
        assert_eq!(comps.len(), 2);
        assert_eq!(comps[0].top_left(), (0, 0));
        assert_eq!(comps[1].top_left(), (4, 0));
    }

    #[test]
    fn ordered_by_area_then_position() {
        let m = BinaryMask::from_ascii(&["#..###", "...###", "#....."]).unwrap();
        let comps = label_components(&m);
        let summary: Vec<_> = comps.iter().map(|c| (c.area(), c.top_left())).collect();
        assert_eq!(summary, vec![(6, (3, 0)), (1, (0, 0)), (1, (0, 2))]);
    }

    #[test]
    fn min_area_filter() {
        let m = BinaryMask::from_ascii(&["#.........", "......####"]).unwrap();
        // 20 px image: fraction 0.1 -> 2 px minimum.
        let comps = extract_components(&m, 0.1);
        assert_eq!(comps.len(), 1);
        assert_eq!(comps[0].area(), 4);
    }

    #[test]
    fn bbox_extremes() {
        let m = BinaryMask::from_fn(30, 30, |x, y| (5..=15).contains(&x) && (10..=20).contains(&y))
            .unwrap();
        assert_eq!(fit_bbox(&m), Some(BoundingBox::new(5, 10, 11, 11).unwrap()));
        let mut single = BinaryMask::empty(10, 10).unwrap();
        single.set(7, 7, true);
        assert_eq!(fit_bbox(&single), Some(BoundingBox::new(7, 7, 1, 1).unwrap()));
        assert_eq!(fit_bbox(&BinaryMask::empty(3, 3).unwrap()), None);
    }
}
