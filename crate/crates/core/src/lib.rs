//! Synthetic dataset generation driven by prompt templates and diffusion
//! cross-attention heatmaps.
//!
//! The pipeline expands [`templating`] templates into generation requests, runs
//! them through a [`backend`], derives masks, polygons, boxes and scores from
//! the per-token heatmaps in [`labeler`], optionally merges external model
//! predictions via [`supervised`], and writes everything out with [`dataset`].

pub mod backend;
pub mod codec;
pub mod dataset;
pub mod labeler;
pub mod raster;
pub mod supervised;
pub mod templating;

pub use raster::{
    aggregate_heatmaps, normalize_heatmap, upscale_bilinear, BinaryMask, BoundingBox, FloatRaster,
    Heatmap, ImageRaster, LabelSource, LabeledInstance, Point, Polygon,
};
