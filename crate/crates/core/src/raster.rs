//! Raster and annotation value types shared by every pipeline stage, plus the
//! heatmap normalization, bilinear resampling and aggregation primitives.
//!
//! Coordinates follow image convention: `x` grows right, `y` grows down and
//! the origin sits on the center of the top-left pixel.

use std::io::{Read, Write};

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum RasterError {
    #[error("raster dimensions must be at least 1x1, got {width}x{height}")]
    ZeroDimension { width: u32, height: u32 },
    #[error("buffer length {actual} does not match {width}x{height} (expected {expected})")]
    BufferLength {
        width: u32,
        height: u32,
        expected: usize,
        actual: usize,
    },
    #[error("non-finite value {value} at (x={x}, y={y})")]
    NonFinite { x: u32, y: u32, value: f32 },
    #[error("cannot aggregate an empty list of heatmaps")]
    EmptyAggregation,
    #[error("bounding box needs width and height >= 1")]
    EmptyBox,
    #[error("polygon needs at least 3 vertices, got {0}")]
    TooFewVertices(usize),
    #[error("heatmap file: {0}")]
    Io(String),
}

fn check_dims(width: u32, height: u32) -> Result<usize, RasterError> {
    if width == 0 || height == 0 {
        return Err(RasterError::ZeroDimension { width, height });
    }
    Ok(width as usize * height as usize)
}

/// 8-bit RGB image, row-major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ImageRaster {
    width: u32,
    height: u32,
    pixels: Vec<u8>,
}

impl ImageRaster {
    pub fn new(width: u32, height: u32, pixels: Vec<u8>) -> Result<Self, RasterError> {
        let expected = check_dims(width, height)? * 3;
        if pixels.len() != expected {
            return Err(RasterError::BufferLength {
                width,
                height,
                expected,
                actual: pixels.len(),
            });
        }
        Ok(Self {
            width,
            height,
            pixels,
        })
    }

    pub fn filled(width: u32, height: u32, rgb: [u8; 3]) -> Result<Self, RasterError> {
        let n = check_dims(width, height)?;
        let pixels = rgb.iter().copied().cycle().take(n * 3).collect();
        Ok(Self {
            width,
            height,
            pixels,
        })
    }

    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn height(&self) -> u32 {
        self.height
    }

    pub fn pixels(&self) -> &[u8] {
        &self.pixels
    }

    pub fn into_pixels(self) -> Vec<u8> {
        self.pixels
    }

    pub fn get(&self, x: u32, y: u32) -> [u8; 3] {
        let i = (y as usize * self.width as usize + x as usize) * 3;
        [self.pixels[i], self.pixels[i + 1], self.pixels[i + 2]]
    }

    pub fn put(&mut self, x: u32, y: u32, rgb: [u8; 3]) {
        let i = (y as usize * self.width as usize + x as usize) * 3;
        self.pixels[i..i + 3].copy_from_slice(&rgb);
    }
}

/// Unnormalized scalar raster, e.g. a raw cross-attention score map.
#[derive(Debug, Clone, PartialEq)]
pub struct FloatRaster {
    width: u32,
    height: u32,
    values: Vec<f32>,
}

impl FloatRaster {
    pub fn new(width: u32, height: u32, values: Vec<f32>) -> Result<Self, RasterError> {
        let expected = check_dims(width, height)?;
        if values.len() != expected {
            return Err(RasterError::BufferLength {
                width,
                height,
                expected,
                actual: values.len(),
            });
        }
        Ok(Self {
            width,
            height,
            values,
        })
    }

    /// Builds a raster from nested rows; all rows must have equal length.
    pub fn from_rows(rows: &[Vec<f32>]) -> Result<Self, RasterError> {
        let height = rows.len() as u32;
        let width = rows.first().map_or(0, |r| r.len()) as u32;
        let values: Vec<f32> = rows.iter().flatten().copied().collect();
        Self::new(width, height, values)
    }

    pub fn from_fn(
        width: u32,
        height: u32,
        mut f: impl FnMut(u32, u32) -> f32,
    ) -> Result<Self, RasterError> {
        let n = check_dims(width, height)?;
        let mut values = Vec::with_capacity(n);
        for y in 0..height {
            for x in 0..width {
                values.push(f(x, y));
            }
        }
        Ok(Self {
            width,
            height,
            values,
        })
    }

    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn height(&self) -> u32 {
        self.height
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub fn get(&self, x: u32, y: u32) -> f32 {
        self.values[y as usize * self.width as usize + x as usize]
    }
}

/// A per-token attribution surface with values in `[0, 1]`.
///
/// Only [`normalize_heatmap`] and the `.hm32` reader construct heatmaps, so
/// the range and finiteness guarantees hold for every instance.
#[derive(Debug, Clone, PartialEq)]
pub struct Heatmap {
    width: u32,
    height: u32,
    values: Vec<f32>,
    degenerate: bool,
}

impl Heatmap {
    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn height(&self) -> u32 {
        self.height
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    /// True when the source raster was constant; the values are then all zero.
    pub fn is_degenerate(&self) -> bool {
        self.degenerate
    }

    pub fn get(&self, x: u32, y: u32) -> f32 {
        self.values[y as usize * self.width as usize + x as usize]
    }

    pub fn as_raster(&self) -> FloatRaster {
        FloatRaster {
            width: self.width,
            height: self.height,
            values: self.values.clone(),
        }
    }

    /// Writes the `.hm32` interchange form: `u32` width, `u32` height, then
    /// row-major `f32` values, all little-endian.
    pub fn write_hm32<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        out.write_all(&self.width.to_le_bytes())?;
        out.write_all(&self.height.to_le_bytes())?;
        let mut buf = Vec::with_capacity(self.values.len() * 4);
        for v in &self.values {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        out.write_all(&buf)
    }

    /// Reads a `.hm32` payload and re-normalizes it, so files written by other
    /// tools with arbitrary ranges are accepted.
    pub fn read_hm32<R: Read>(mut input: R) -> Result<Self, RasterError> {
        let mut bytes = Vec::new();
        input
            .read_to_end(&mut bytes)
            .map_err(|e| RasterError::Io(e.to_string()))?;
        let raster = decode_hm32(&bytes)?;
        normalize_heatmap(&raster)
    }
}

/// Decodes `.hm32` bytes into a raw raster without normalizing.
pub fn decode_hm32(bytes: &[u8]) -> Result<FloatRaster, RasterError> {
    if bytes.len() < 8 {
        return Err(RasterError::Io(format!(
            "truncated header: {} bytes",
            bytes.len()
        )));
    }
    let width = u32::from_le_bytes(bytes[0..4].try_into().unwrap());
    let height = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    let body = &bytes[8..];
    let expected = width as usize * height as usize * 4;
    if body.len() != expected {
        return Err(RasterError::Io(format!(
            "payload is {} bytes, {width}x{height} needs {expected}",
            body.len()
        )));
    }
    let values = body
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    FloatRaster::new(width, height, values)
}

/// Boolean raster, `true` = foreground.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct BinaryMask {
    width: u32,
    height: u32,
    bits: Vec<bool>,
}

impl BinaryMask {
    pub fn new(width: u32, height: u32, bits: Vec<bool>) -> Result<Self, RasterError> {
        let expected = check_dims(width, height)?;
        if bits.len() != expected {
            return Err(RasterError::BufferLength {
                width,
                height,
                expected,
                actual: bits.len(),
            });
        }
        Ok(Self {
            width,
            height,
            bits,
        })
    }

    pub fn empty(width: u32, height: u32) -> Result<Self, RasterError> {
        let n = check_dims(width, height)?;
        Ok(Self {
            width,
            height,
            bits: vec![false; n],
        })
    }

    pub fn from_fn(
        width: u32,
        height: u32,
        mut f: impl FnMut(u32, u32) -> bool,
    ) -> Result<Self, RasterError> {
        let n = check_dims(width, height)?;
        let mut bits = Vec::with_capacity(n);
        for y in 0..height {
            for x in 0..width {
                bits.push(f(x, y));
            }
        }
        Ok(Self {
            width,
            height,
            bits,
        })
    }

    /// Parses rows of `#` (foreground) and `.` (background); handy for fixtures.
    pub fn from_ascii(rows: &[&str]) -> Result<Self, RasterError> {
        let height = rows.len() as u32;
        let width = rows.first().map_or(0, |r| r.len()) as u32;
        let bits: Vec<bool> = rows
            .iter()
            .flat_map(|r| r.chars().map(|c| c == '#'))
            .collect();
        Self::new(width, height, bits)
    }

    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn height(&self) -> u32 {
        self.height
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn get(&self, x: u32, y: u32) -> bool {
        self.bits[y as usize * self.width as usize + x as usize]
    }

    /// Out-of-range coordinates read as background.
    pub fn get_or_bg(&self, x: i64, y: i64) -> bool {
        if x < 0 || y < 0 || x >= self.width as i64 || y >= self.height as i64 {
            return false;
        }
        self.get(x as u32, y as u32)
    }

    pub fn set(&mut self, x: u32, y: u32, value: bool) {
        let i = y as usize * self.width as usize + x as usize;
        self.bits[i] = value;
    }

    pub fn count(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    pub fn complement(&self) -> Self {
        Self {
            width: self.width,
            height: self.height,
            bits: self.bits.iter().map(|b| !b).collect(),
        }
    }

    /// Foreground pixel coordinates in raster order.
    pub fn foreground(&self) -> impl Iterator<Item = (u32, u32)> + '_ {
        let w = self.width as usize;
        self.bits
            .iter()
            .enumerate()
            .filter(|(_, &b)| b)
            .map(move |(i, _)| ((i % w) as u32, (i / w) as u32))
    }

    /// Encodes as the 0/255 single-channel PNG interchange form.
    pub fn to_gray_bytes(&self) -> Vec<u8> {
        self.bits.iter().map(|&b| if b { 255 } else { 0 }).collect()
    }
}

/// Axis-aligned box in pixel-count convention: a single pixel at `(x, y)` is
/// `(x, y, 1, 1)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct BoundingBox {
    pub x_min: u32,
    pub y_min: u32,
    pub width: u32,
    pub height: u32,
}

impl BoundingBox {
    pub fn new(x_min: u32, y_min: u32, width: u32, height: u32) -> Result<Self, RasterError> {
        if width == 0 || height == 0 {
            return Err(RasterError::EmptyBox);
        }
        Ok(Self {
            x_min,
            y_min,
            width,
            height,
        })
    }

    /// Tight hull of inclusive pixel extremes.
    pub fn from_extremes(x_min: u32, y_min: u32, x_max: u32, y_max: u32) -> Self {
        Self {
            x_min,
            y_min,
            width: x_max - x_min + 1,
            height: y_max - y_min + 1,
        }
    }

    pub fn x_max(&self) -> u32 {
        self.x_min + self.width - 1
    }

    pub fn y_max(&self) -> u32 {
        self.y_min + self.height - 1
    }

    pub fn area(&self) -> u64 {
        self.width as u64 * self.height as u64
    }

    pub fn fits(&self, width: u32, height: u32) -> bool {
        self.width >= 1
            && self.height >= 1
            && self.x_min as u64 + self.width as u64 <= width as u64
            && self.y_min as u64 + self.height as u64 <= height as u64
    }

    pub fn contains(&self, x: u32, y: u32) -> bool {
        x >= self.x_min && x <= self.x_max() && y >= self.y_min && y <= self.y_max()
    }

    /// Intersection over union, counting pixels.
    pub fn iou(&self, other: &BoundingBox) -> f64 {
        let ix0 = self.x_min.max(other.x_min);
        let iy0 = self.y_min.max(other.y_min);
        let ix1 = self.x_max().min(other.x_max());
        let iy1 = self.y_max().min(other.y_max());
        let inter = if ix1 >= ix0 && iy1 >= iy0 {
            (ix1 - ix0 + 1) as u64 * (iy1 - iy0 + 1) as u64
        } else {
            0
        };
        let union = self.area() + other.area() - inter;
        inter as f64 / union as f64
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Point {
    pub x: f64,
    pub y: f64,
}

impl Point {
    pub fn new(x: f64, y: f64) -> Self {
        Self { x, y }
    }
}

/// Closed ring of pixel-center vertices, stored counter-clockwise as seen on
/// screen (y down), which is a negative shoelace sum in raw coordinates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<Point>", into = "Vec<Point>")]
pub struct Polygon {
    vertices: Vec<Point>,
}

impl TryFrom<Vec<Point>> for Polygon {
    type Error = RasterError;

    fn try_from(vertices: Vec<Point>) -> Result<Self, Self::Error> {
        Polygon::new(vertices)
    }
}

impl From<Polygon> for Vec<Point> {
    fn from(p: Polygon) -> Self {
        p.vertices
    }
}

impl Polygon {
    /// Accepts either winding and stores the screen-counter-clockwise one.
    pub fn new(mut vertices: Vec<Point>) -> Result<Self, RasterError> {
        if vertices.len() < 3 {
            return Err(RasterError::TooFewVertices(vertices.len()));
        }
        if signed_area(&vertices) > 0.0 {
            vertices[1..].reverse();
        }
        Ok(Self { vertices })
    }

    pub fn from_pixels(points: &[(i64, i64)]) -> Result<Self, RasterError> {
        Self::new(
            points
                .iter()
                .map(|&(x, y)| Point::new(x as f64, y as f64))
                .collect(),
        )
    }

    pub fn vertices(&self) -> &[Point] {
        &self.vertices
    }

    /// Absolute shoelace area over the vertex ring.
    pub fn area(&self) -> f64 {
        signed_area(&self.vertices).abs()
    }

    pub fn is_counter_clockwise(&self) -> bool {
        signed_area(&self.vertices) <= 0.0
    }

    /// Tight pixel-count hull of the vertices (fractional coordinates floor).
    pub fn bbox(&self) -> BoundingBox {
        let mut x0 = f64::INFINITY;
        let mut y0 = f64::INFINITY;
        let mut x1 = f64::NEG_INFINITY;
        let mut y1 = f64::NEG_INFINITY;
        for p in &self.vertices {
            x0 = x0.min(p.x);
            y0 = y0.min(p.y);
            x1 = x1.max(p.x);
            y1 = y1.max(p.y);
        }
        let f = |v: f64| v.max(0.0).floor() as u32;
        BoundingBox::from_extremes(f(x0), f(y0), f(x1), f(y1))
    }

    /// True when no two non-adjacent edges touch.
    pub fn is_simple(&self) -> bool {
        let n = self.vertices.len();
        let edge = |i: usize| (self.vertices[i], self.vertices[(i + 1) % n]);
        for i in 0..n {
            for j in i + 1..n {
                let adjacent = j == i + 1 || (i == 0 && j == n - 1);
                if adjacent {
                    continue;
                }
                let (a, b) = edge(i);
                let (c, d) = edge(j);
                if segments_touch(a, b, c, d) {
                    return false;
                }
            }
        }
        true
    }

    /// Boundary-inclusive point test using the nonzero winding rule.
    pub fn contains(&self, p: Point) -> bool {
        let n = self.vertices.len();
        let mut winding = 0i32;
        for i in 0..n {
            let a = self.vertices[i];
            let b = self.vertices[(i + 1) % n];
            if on_segment(a, b, p) {
                return true;
            }
            let cross = (b.x - a.x) * (p.y - a.y) - (p.x - a.x) * (b.y - a.y);
            if a.y <= p.y {
                if b.y > p.y && cross > 0.0 {
                    winding += 1;
                }
            } else if b.y <= p.y && cross < 0.0 {
                winding -= 1;
            }
        }
        winding != 0
    }

    /// Pixels whose centers lie inside or on the polygon.
    pub fn rasterize(&self, width: u32, height: u32) -> BinaryMask {
        let mut mask = BinaryMask::empty(width.max(1), height.max(1)).expect("nonzero dims");
        let bb = self.bbox();
        let x_end = (bb.x_max() + 1).min(width);
        let y_end = (bb.y_max() + 1).min(height);
        for y in bb.y_min.min(height)..y_end {
            for x in bb.x_min.min(width)..x_end {
                if self.contains(Point::new(x as f64, y as f64)) {
                    mask.set(x, y, true);
                }
            }
        }
        mask
    }
}

fn signed_area(vertices: &[Point]) -> f64 {
    let n = vertices.len();
    let mut acc = 0.0;
    for i in 0..n {
        let a = vertices[i];
        let b = vertices[(i + 1) % n];
        acc += a.x * b.y - b.x * a.y;
    }
    acc / 2.0
}

fn orient(a: Point, b: Point, c: Point) -> f64 {
    (b.x - a.x) * (c.y - a.y) - (b.y - a.y) * (c.x - a.x)
}

fn on_segment(a: Point, b: Point, p: Point) -> bool {
    orient(a, b, p) == 0.0
        && p.x >= a.x.min(b.x)
        && p.x <= a.x.max(b.x)
        && p.y >= a.y.min(b.y)
        && p.y <= a.y.max(b.y)
}

fn segments_touch(a: Point, b: Point, c: Point, d: Point) -> bool {
    let d1 = orient(c, d, a);
    let d2 = orient(c, d, b);
    let d3 = orient(a, b, c);
    let d4 = orient(a, b, d);
    if ((d1 > 0.0 && d2 < 0.0) || (d1 < 0.0 && d2 > 0.0))
        && ((d3 > 0.0 && d4 < 0.0) || (d3 < 0.0 && d4 > 0.0))
    {
        return true;
    }
    on_segment(c, d, a) || on_segment(c, d, b) || on_segment(a, b, c) || on_segment(a, b, d)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LabelSource {
    Unsupervised,
    Supervised,
}

/// One labeled object: a class token, its outline(s), box and confidence.
///
/// `polygons` is empty for degenerate regions (single pixels, one-pixel-wide
/// lines); the box is then the region's own hull.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabeledInstance {
    pub class_token: String,
    pub polygons: Vec<Polygon>,
    pub bbox: BoundingBox,
    pub score: f64,
    pub source: LabelSource,
}

impl LabeledInstance {
    pub fn fits(&self, width: u32, height: u32) -> bool {
        self.bbox.fits(width, height)
            && self.polygons.iter().all(|p| {
                p.vertices().iter().all(|v| {
                    v.x >= 0.0 && v.y >= 0.0 && v.x < width as f64 && v.y < height as f64
                })
            })
    }

    /// Pixels covered by the instance: the union of its polygon fills, or the
    /// box when there is no polygon.
    pub fn coverage(&self, width: u32, height: u32) -> BinaryMask {
        if self.polygons.is_empty() {
            return BinaryMask::from_fn(width, height, |x, y| self.bbox.contains(x, y))
                .expect("nonzero dims");
        }
        let mut out = BinaryMask::empty(width, height).expect("nonzero dims");
        for poly in &self.polygons {
            let fill = poly.rasterize(width, height);
            for (x, y) in fill.foreground() {
                out.set(x, y, true);
            }
        }
        out
    }
}

/// Rescales a finite raster to `[0, 1]` by min-max. Constant input yields an
/// all-zero heatmap flagged degenerate.
pub fn normalize_heatmap(raw: &FloatRaster) -> Result<Heatmap, RasterError> {
    let mut min = f32::INFINITY;
    let mut max = f32::NEG_INFINITY;
    for (i, &v) in raw.values.iter().enumerate() {
        if !v.is_finite() {
            return Err(RasterError::NonFinite {
                x: (i % raw.width as usize) as u32,
                y: (i / raw.width as usize) as u32,
                value: v,
            });
        }
        min = min.min(v);
        max = max.max(v);
    }
    // Widen before subtracting so large-magnitude inputs don't overflow.
    let (lo, hi) = (min as f64, max as f64);
    if hi == lo {
        return Ok(Heatmap {
            width: raw.width,
            height: raw.height,
            values: vec![0.0; raw.values.len()],
            degenerate: true,
        });
    }
    let span = hi - lo;
    let values = raw
        .values
        .iter()
        .map(|&v| (((v as f64) - lo) / span).clamp(0.0, 1.0) as f32)
        .collect();
    Ok(Heatmap {
        width: raw.width,
        height: raw.height,
        values,
        degenerate: false,
    })
}

/// Align-corners bilinear resampling: output corners sample input corners
/// exactly.
pub fn upscale_bilinear(
    src: &FloatRaster,
    target_width: u32,
    target_height: u32,
) -> Result<FloatRaster, RasterError> {
    check_dims(target_width, target_height)?;
    if target_width == src.width && target_height == src.height {
        return Ok(src.clone());
    }
    let axis = |target: u32, source: u32| -> Vec<(usize, usize, f64)> {
        (0..target)
            .map(|i| {
                if target == 1 || source == 1 {
                    return (0, 0, 0.0);
                }
                let pos = i as f64 * (source - 1) as f64 / (target - 1) as f64;
                let lo = (pos.floor() as usize).min(source as usize - 1);
                let hi = (lo + 1).min(source as usize - 1);
                (lo, hi, pos - lo as f64)
            })
            .collect()
    };
    let xs = axis(target_width, src.width);
    let ys = axis(target_height, src.height);
    let w = src.width as usize;
    let mut values = Vec::with_capacity(target_width as usize * target_height as usize);
    for &(y0, y1, fy) in &ys {
        for &(x0, x1, fx) in &xs {
            let v00 = src.values[y0 * w + x0] as f64;
            let v01 = src.values[y0 * w + x1] as f64;
            let v10 = src.values[y1 * w + x0] as f64;
            let v11 = src.values[y1 * w + x1] as f64;
            let top = v00 + (v01 - v00) * fx;
            let bottom = v10 + (v11 - v10) * fx;
            let v = top + (bottom - top) * fy;
            // Keep the convex-combination bound exact despite rounding.
            let lo = v00.min(v01).min(v10).min(v11);
            let hi = v00.max(v01).max(v10).max(v11);
            values.push(v.clamp(lo, hi) as f32);
        }
    }
    FloatRaster::new(target_width, target_height, values)
}

/// Upscales every map to the target size, sums them uniformly and normalizes.
pub fn aggregate_heatmaps(
    maps: &[FloatRaster],
    target_width: u32,
    target_height: u32,
) -> Result<Heatmap, RasterError> {
    if maps.is_empty() {
        return Err(RasterError::EmptyAggregation);
    }
    let n = check_dims(target_width, target_height)?;
    // f64 accumulation keeps the sum independent of input order in practice.
    let mut acc = vec![0.0f64; n];
    for map in maps {
        let up = upscale_bilinear(map, target_width, target_height)?;
        for (a, &v) in acc.iter_mut().zip(&up.values) {
            *a += v as f64;
        }
    }
    let summed = FloatRaster::new(
        target_width,
        target_height,
        acc.into_iter().map(|v| v as f32).collect(),
    )?;
    normalize_heatmap(&summed)
}
