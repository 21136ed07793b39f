//! Deterministic stand-in backend: one seeded ellipse per token of interest,
//! with a heatmap whose shape is known analytically.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{Backend, BackendError, GenerationRequest, GenerationResult, TaskKind};
use crate::raster::{normalize_heatmap, BinaryMask, BoundingBox, FloatRaster, ImageRaster};

pub const SYNTHETIC_BACKEND_ID: &str = "synthetic-v1";

/// Width of the Gaussian skirt outside the ellipse, in units of the
/// normalized elliptical radius.
const SKIRT: f64 = 0.12;
/// Attenuation of other tokens' blobs leaking into a token's heatmap.
const CROSSTALK: f64 = 0.04;
const MAX_OVERLAP_IOU: f64 = 0.1;
const PLACEMENT_ATTEMPTS: usize = 200;

/// Ground truth for one rendered object.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticObject {
    pub token: String,
    pub center_x: f64,
    pub center_y: f64,
    pub semi_major: f64,
    pub semi_minor: f64,
    /// Rotation of the major axis in radians.
    pub angle: f64,
    pub color: [u8; 3],
    /// Hull of pixels whose centers fall inside the ellipse.
    pub bbox: BoundingBox,
    pub area: u64,
}

impl SyntheticObject {
    /// Normalized elliptical radius: 1 on the boundary.
    pub fn radius_at(&self, x: f64, y: f64) -> f64 {
        let (dx, dy) = (x - self.center_x, y - self.center_y);
        let (s, c) = self.angle.sin_cos();
        let u = dx * c + dy * s;
        let v = -dx * s + dy * c;
        ((u / self.semi_major).powi(2) + (v / self.semi_minor).powi(2)).sqrt()
    }

    pub fn mask(&self, width: u32, height: u32) -> BinaryMask {
        BinaryMask::from_fn(width, height, |x, y| self.radius_at(x as f64, y as f64) <= 1.0)
            .expect("request dims are positive")
    }

    /// Unnormalized attribution: `1 - r^2/2` inside (so >= 0.5), Gaussian
    /// decay from 0.5 outside.
    fn attribution(&self, x: f64, y: f64) -> f64 {
        let r = self.radius_at(x, y);
        if r <= 1.0 {
            1.0 - 0.5 * r * r
        } else {
            0.5 * (-((r - 1.0) / SKIRT).powi(2)).exp()
        }
    }
}

#[derive(Debug, Clone, Default)]
pub struct SyntheticBackend {
    id: String,
}

impl SyntheticBackend {
    pub fn new() -> Self {
        Self {
            id: SYNTHETIC_BACKEND_ID.to_string(),
        }
    }
}

#[derive(Serialize)]
struct SeedMaterial<'a> {
    task: TaskKind,
    seed: u64,
    text: &'a str,
    negative: Option<&'a str>,
    tokens: Vec<&'a str>,
    width: u32,
    height: u32,
}

fn request_rng(req: &GenerationRequest) -> ChaCha8Rng {
    let material = SeedMaterial {
        task: req.task,
        seed: req.seed,
        text: &req.prompt.text,
        negative: req.prompt.negative_text.as_deref(),
        tokens: req.unique_tokens(),
        width: req.width,
        height: req.height,
    };
    let digest = Sha256::digest(serde_json::to_vec(&material).expect("plain data"));
    let mut seed = [0u8; 32];
    seed.copy_from_slice(&digest);
    ChaCha8Rng::from_seed(seed)
}

fn mask_iou(a: &BinaryMask, b: &BinaryMask) -> f64 {
    let (mut inter, mut union) = (0u64, 0u64);
    for (&p, &q) in a.bits().iter().zip(b.bits()) {
        inter += (p && q) as u64;
        union += (p || q) as u64;
    }
    if union == 0 {
        0.0
    } else {
        inter as f64 / union as f64
    }
}

fn place_object(
    rng: &mut ChaCha8Rng,
    token: &str,
    width: u32,
    height: u32,
    placed: &[(SyntheticObject, BinaryMask)],
) -> (SyntheticObject, BinaryMask) {
    let (w, h) = (width as f64, height as f64);
    let short = w.min(h);
    let mut last = None;
    for _ in 0..PLACEMENT_ATTEMPTS {
        let semi_major = rng.gen_range(0.08..0.2) * short;
        let semi_minor = semi_major * rng.gen_range(0.5..1.0);
        let angle = rng.gen_range(0.0..std::f64::consts::PI);
        let margin = semi_major + 2.0;
        let center_x = rng.gen_range(margin.min(w / 2.0)..(w - margin).max(w / 2.0 + 1e-9));
        let center_y = rng.gen_range(margin.min(h / 2.0)..(h - margin).max(h / 2.0 + 1e-9));
        let color = [rng.gen(), rng.gen(), rng.gen()];
        let mut obj = SyntheticObject {
            token: token.to_string(),
            center_x,
            center_y,
            semi_major,
            semi_minor,
            angle,
            color,
            bbox: BoundingBox::from_extremes(0, 0, 0, 0),
            area: 0,
        };
        let mask = obj.mask(width, height);
        let Some(bbox) = crate::labeler::components::fit_bbox(&mask) else {
            continue;
        };
        obj.bbox = bbox;
        obj.area = mask.count() as u64;
        let clear = placed
            .iter()
            .all(|(_, other)| mask_iou(&mask, other) < MAX_OVERLAP_IOU);
        if clear {
            return (obj, mask);
        }
        last = Some((obj, mask));
    }
    last.expect("at least one attempt rasterizes a pixel")
}

fn render_background(rng: &mut ChaCha8Rng, width: u32, height: u32) -> ImageRaster {
    let top: [f64; 3] = [rng.gen(), rng.gen(), rng.gen()];
    let bottom: [f64; 3] = [rng.gen(), rng.gen(), rng.gen()];
    let mut img = ImageRaster::filled(width, height, [0, 0, 0]).expect("positive dims");
    for y in 0..height {
        let t = if height > 1 {
            y as f64 / (height - 1) as f64
        } else {
            0.0
        };
        for x in 0..width {
            let jitter: f64 = rng.gen_range(-6.0..6.0);
            let px = std::array::from_fn(|c| {
                let base = 60.0 + 140.0 * (top[c] * (1.0 - t) + bottom[c] * t);
                (base + jitter).round().clamp(0.0, 255.0) as u8
            });
            img.put(x, y, px);
        }
    }
    img
}

fn lerp_px(a: [u8; 3], b: [u8; 3], s: f64) -> [u8; 3] {
    std::array::from_fn(|c| {
        (a[c] as f64 + (b[c] as f64 - a[c] as f64) * s)
            .round()
            .clamp(0.0, 255.0) as u8
    })
}

/// Renders the request; a pure function of the request contents.
pub fn synthetic_generate(req: &GenerationRequest, backend_id: &str) -> GenerationResult {
    let (width, height) = (req.width, req.height);
    let mut rng = request_rng(req);
    let mut rendered = render_background(&mut rng, width, height);

    let mut placed: Vec<(SyntheticObject, BinaryMask)> = Vec::new();
    for token in req.unique_tokens() {
        let obj = place_object(&mut rng, token, width, height, &placed);
        placed.push(obj);
    }
    for (obj, mask) in &placed {
        for (x, y) in mask.foreground() {
            let shade = 1.0 - 0.35 * obj.radius_at(x as f64, y as f64);
            let px = obj.color.map(|c| (c as f64 * shade + 20.0).min(255.0) as u8);
            rendered.put(x, y, px);
        }
    }

    let image = match (req.task, &req.init_image) {
        (TaskKind::TextToImage, _) | (_, None) => rendered,
        (task, Some(init)) => {
            let s = req.strength.unwrap_or(1.0);
            let mut out = init.clone();
            for y in 0..height {
                for x in 0..width {
                    let inside = task != TaskKind::Inpaint
                        || req.mask_image.as_ref().is_some_and(|m| m.get(x, y));
                    if inside {
                        out.put(x, y, lerp_px(init.get(x, y), rendered.get(x, y), s));
                    }
                }
            }
            out
        }
    };

    let mut heatmaps = BTreeMap::new();
    for (i, (obj, _)) in placed.iter().enumerate() {
        let raw = FloatRaster::from_fn(width, height, |x, y| {
            let (px, py) = (x as f64, y as f64);
            let own = obj.attribution(px, py);
            let leak: f64 = placed
                .iter()
                .enumerate()
                .filter(|(j, _)| *j != i)
                .map(|(_, (o, _))| CROSSTALK * o.attribution(px, py))
                .sum();
            (own + leak) as f32
        })
        .expect("positive dims");
        let h = normalize_heatmap(&raw).expect("finite by construction");
        heatmaps.insert(obj.token.clone(), h);
    }

    GenerationResult {
        image,
        heatmaps,
        echo: req.clone(),
        backend_id: backend_id.to_string(),
        ground_truth: Some(placed.into_iter().map(|(o, _)| o).collect()),
    }
}

impl Backend for SyntheticBackend {
    fn backend_id(&self) -> &str {
        &self.id
    }

    fn dispatch(&self, request: &GenerationRequest) -> Result<GenerationResult, BackendError> {
        Ok(synthetic_generate(request, &self.id))
    }
}
