//! Unsupervised labeling from cross-attention heatmaps: Otsu threshold,
//! morphological refinement, connected components, contour polygons, boxes
//! and scores.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backend::GenerationResult;
use crate::raster::{normalize_heatmap, BinaryMask, BoundingBox, Heatmap, LabelSource, LabeledInstance};

pub mod components;
pub mod contour;
pub mod morphology;
pub mod otsu;

pub use components::{extract_components, fit_bbox, label_components, Component};
pub use contour::{trace_contour, ContourError};
pub use morphology::{refine_mask, MorphologyParams, StructuringElement};
pub use otsu::{otsu_threshold, OtsuResult};

#[derive(Debug, Error, PartialEq)]
pub enum LabelError {
    #[error("score weights must be non-negative and sum to 1, got {w_area} + {w_intensity}")]
    Weights { w_area: f64, w_intensity: f64 },
    #[error("cannot score an empty component")]
    EmptyComponent,
    #[error("component is {0}x{1} but heatmap is {2}x{3}")]
    Dimensions(u32, u32, u32, u32),
}

/// Convex weights of the two score factors.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawWeights")]
pub struct ScoreWeights {
    w_area: f64,
    w_intensity: f64,
}

#[derive(Deserialize)]
struct RawWeights {
    w_area: f64,
    w_intensity: f64,
}

impl TryFrom<RawWeights> for ScoreWeights {
    type Error = LabelError;

    fn try_from(r: RawWeights) -> Result<Self, Self::Error> {
        ScoreWeights::new(r.w_area, r.w_intensity)
    }
}

impl ScoreWeights {
    pub fn new(w_area: f64, w_intensity: f64) -> Result<Self, LabelError> {
        let ok = w_area >= 0.0 && w_intensity >= 0.0 && (w_area + w_intensity - 1.0).abs() <= 1e-9;
        if !ok {
            return Err(LabelError::Weights {
                w_area,
                w_intensity,
            });
        }
        Ok(Self {
            w_area,
            w_intensity,
        })
    }

    pub fn w_area(&self) -> f64 {
        self.w_area
    }

    pub fn w_intensity(&self) -> f64 {
        self.w_intensity
    }
}

impl Default for ScoreWeights {
    fn default() -> Self {
        Self {
            w_area: 0.5,
            w_intensity: 0.5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabelingParams {
    #[serde(default)]
    pub morphology: MorphologyParams,
    #[serde(default)]
    pub score_weights: ScoreWeights,
    #[serde(default = "default_min_area")]
    pub min_area_fraction: f64,
}

fn default_min_area() -> f64 {
    components::DEFAULT_MIN_AREA_FRACTION
}

impl Default for LabelingParams {
    fn default() -> Self {
        Self {
            morphology: MorphologyParams::default(),
            score_weights: ScoreWeights::default(),
            min_area_fraction: default_min_area(),
        }
    }
}

/// `w_area * bbox_area / image_area + w_intensity * mean(heatmap over pixels)`.
pub fn score_pixels(
    pixels: &[(u32, u32)],
    bbox: &BoundingBox,
    h: &Heatmap,
    w: &ScoreWeights,
) -> Result<f64, LabelError> {
    if pixels.is_empty() {
        return Err(LabelError::EmptyComponent);
    }
    let image_area = h.width() as f64 * h.height() as f64;
    let area_fraction = (bbox.area() as f64 / image_area).min(1.0);
    let sum: f64 = pixels.iter().map(|&(x, y)| h.get(x, y) as f64).sum();
    let intensity = sum / pixels.len() as f64;
    Ok((w.w_area * area_fraction + w.w_intensity * intensity).clamp(0.0, 1.0))
}

pub fn score_instance(
    component: &BinaryMask,
    bbox: &BoundingBox,
    h: &Heatmap,
    w: &ScoreWeights,
) -> Result<f64, LabelError> {
    if (component.width(), component.height()) != (h.width(), h.height()) {
        return Err(LabelError::Dimensions(
            component.width(),
            component.height(),
            h.width(),
            h.height(),
        ));
    }
    let pixels: Vec<_> = component.foreground().collect();
    score_pixels(&pixels, bbox, h, w)
}

/// Refined foreground of one heatmap; all-background when the map is
/// degenerate or has no usable threshold.
pub fn semantic_mask(h: &Heatmap, params: &LabelingParams) -> BinaryMask {
    let Some(otsu) = otsu_threshold(h) else {
        return BinaryMask::empty(h.width(), h.height()).expect("heatmap dims are valid");
    };
    let coarse = otsu::apply_threshold(h, otsu.threshold);
    refine_mask(&coarse, &params.morphology)
}

/// Instances for one token's heatmap, in component order.
pub fn label_heatmap(token: &str, heatmap: &Heatmap, params: &LabelingParams) -> Vec<LabeledInstance> {
    let h = normalize_heatmap(&heatmap.as_raster()).expect("heatmaps are finite");
    let refined = semantic_mask(&h, params);
    extract_components(&refined, params.min_area_fraction)
        .into_iter()
        .map(|c| {
            let bbox = c.bbox();
            let polygons = match trace_contour(&c.mask()) {
                Ok(p) => vec![p],
                Err(_) => Vec::new(),
            };
            let score =
                score_pixels(c.pixels(), &bbox, &h, &params.score_weights).expect("non-empty");
            LabeledInstance {
                class_token: token.to_string(),
                polygons,
                bbox,
                score,
                source: LabelSource::Unsupervised,
            }
        })
        .collect()
}

/// Labels every `(token, heatmap)` pair and sorts by descending score; ties
/// keep input order.
pub fn label_heatmaps<'a>(
    maps: impl IntoIterator<Item = (&'a str, &'a Heatmap)>,
    params: &LabelingParams,
) -> Vec<LabeledInstance> {
    let mut out: Vec<LabeledInstance> = maps
        .into_iter()
        .flat_map(|(token, h)| label_heatmap(token, h, params))
        .collect();
    out.sort_by(|a, b| b.score.total_cmp(&a.score));
    out
}

/// Labels a generation result over its requested tokens of interest.
pub fn label_unsupervised(result: &GenerationResult, params: &LabelingParams) -> Vec<LabeledInstance> {
    let maps = result
        .echo
        .unique_tokens()
        .into_iter()
        .filter_map(|t| result.heatmaps.get_key_value(t))
        .map(|(k, v)| (k.as_str(), v));
    label_heatmaps(maps, params)
}
