//! Ingestion of external segmentation-model predictions and their merge with
//! unsupervised labels.

use std::collections::{BTreeMap, HashSet};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::labeler::{fit_bbox, label_components, trace_contour};
use crate::raster::{BinaryMask, BoundingBox, LabelSource, LabeledInstance, Point, Polygon};

#[derive(Debug, Error)]
pub enum IngestError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("prediction file is not valid JSON: {0}")]
    Parse(#[from] serde_json::Error),
    #[error("image_id '{0}' is not in the manifest")]
    UnknownImage(String),
    #[error("image '{image_id}' instance {index}: malformed geometry: {detail}")]
    MalformedGeometry {
        image_id: String,
        index: usize,
        detail: String,
    },
    #[error("image '{image_id}' instance {index}: RLE counts cover {actual} pixels, size needs {expected}")]
    RleLength {
        image_id: String,
        index: usize,
        expected: u64,
        actual: u64,
    },
}

/// Uncompressed run lengths over column-major pixels, starting with a
/// background run.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Rle {
    /// `[height, width]`.
    pub size: [u32; 2],
    pub counts: Vec<u64>,
}

impl Rle {
    /// Encodes a mask (inverse of [`decode_rle`]).
    pub fn encode(mask: &BinaryMask) -> Self {
        let (w, h) = (mask.width(), mask.height());
        let mut counts = Vec::new();
        let mut current = false;
        let mut run = 0u64;
        for x in 0..w {
            for y in 0..h {
                let v = mask.get(x, y);
                if v != current {
                    counts.push(run);
                    run = 0;
                    current = v;
                }
                run += 1;
            }
        }
        counts.push(run);
        Rle {
            size: [h, w],
            counts,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RawInstance {
    #[serde(rename = "class")]
    pub class_name: String,
    pub confidence: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub polygon: Option<Vec<[f64; 2]>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rle: Option<Rle>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionDocument {
    pub image_id: String,
    pub instances: Vec<RawInstance>,
}

#[derive(Deserialize)]
#[serde(untagged)]
enum PredictionFile {
    Many(Vec<PredictionDocument>),
    One(PredictionDocument),
}

/// A decoded prediction: geometry is already polygons plus a hull box.
#[derive(Debug, Clone, PartialEq)]
pub struct ExternalInstance {
    pub class_name: String,
    pub confidence: f64,
    pub polygons: Vec<Polygon>,
    pub bbox: BoundingBox,
}

impl ExternalInstance {
    pub fn to_labeled(&self) -> LabeledInstance {
        LabeledInstance {
            class_token: self.class_name.clone(),
            polygons: self.polygons.clone(),
            bbox: self.bbox,
            score: self.confidence,
            source: LabelSource::Supervised,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExternalPrediction {
    pub image_id: String,
    pub instances: Vec<ExternalInstance>,
}

/// Known images and their `(width, height)`.
pub type ImageIndex = BTreeMap<String, (u32, u32)>;

/// Expands run lengths into a mask by direct pixel walk.
pub fn decode_rle(rle: &Rle) -> Result<BinaryMask, (u64, u64)> {
    let [h, w] = rle.size;
    let expected = h as u64 * w as u64;
    let actual: u64 = rle.counts.iter().sum();
    if actual != expected || expected == 0 {
        return Err((expected, actual));
    }
    let mut mask = BinaryMask::empty(w, h).expect("nonzero dims");
    let mut k = 0u64;
    for (i, &run) in rle.counts.iter().enumerate() {
        if i % 2 == 1 {
            for j in k..k + run {
                mask.set((j / h as u64) as u32, (j % h as u64) as u32, true);
            }
        }
        k += run;
    }
    Ok(mask)
}

/// Polygons for every 8-connected region of a mask plus the overall hull.
fn mask_geometry(mask: &BinaryMask) -> Option<(Vec<Polygon>, BoundingBox)> {
    let bbox = fit_bbox(mask)?;
    let polygons = label_components(mask)
        .iter()
        .filter_map(|c| trace_contour(&c.mask()).ok())
        .collect();
    Some((polygons, bbox))
}

fn decode_instance(
    image_id: &str,
    index: usize,
    raw: &RawInstance,
    (width, height): (u32, u32),
) -> Result<ExternalInstance, IngestError> {
    let malformed = |detail: String| IngestError::MalformedGeometry {
        image_id: image_id.to_string(),
        index,
        detail,
    };
    if !(0.0..=1.0).contains(&raw.confidence) {
        return Err(malformed(format!("confidence {} outside [0, 1]", raw.confidence)));
    }
    let (polygons, bbox) = match (&raw.polygon, &raw.rle) {
        (Some(_), Some(_)) => return Err(malformed("both polygon and rle given".into())),
        (None, None) => return Err(malformed("neither polygon nor rle given".into())),
        (Some(points), None) => {
            for p in points {
                let inside = p.iter().all(|v| v.is_finite())
                    && p[0] >= 0.0
                    && p[1] >= 0.0
                    && p[0] < width as f64
                    && p[1] < height as f64;
                if !inside {
                    return Err(malformed(format!(
                        "vertex ({}, {}) outside {width}x{height}",
                        p[0], p[1]
                    )));
                }
            }
            let poly = Polygon::new(points.iter().map(|p| Point::new(p[0], p[1])).collect())
                .map_err(|e| malformed(e.to_string()))?;
            let bbox = poly.bbox();
            (vec![poly], bbox)
        }
        (None, Some(rle)) => {
            if rle.size != [height, width] {
                return Err(malformed(format!(
                    "rle size {:?} does not match image [{height}, {width}]",
                    rle.size
                )));
            }
            let mask = decode_rle(rle).map_err(|(expected, actual)| IngestError::RleLength {
                image_id: image_id.to_string(),
                index,
                expected,
                actual,
            })?;
            mask_geometry(&mask).ok_or_else(|| malformed("rle mask is empty".into()))?
        }
    };
    Ok(ExternalInstance {
        class_name: raw.class_name.clone(),
        confidence: raw.confidence,
        polygons,
        bbox,
    })
}

/// Decodes prediction documents, dropping instances below `confidence_floor`.
pub fn parse_predictions(
    bytes: &[u8],
    index: &ImageIndex,
    confidence_floor: f64,
) -> Result<Vec<ExternalPrediction>, IngestError> {
    if bytes.iter().all(u8::is_ascii_whitespace) {
        return Ok(Vec::new());
    }
    let docs = match serde_json::from_slice::<PredictionFile>(bytes)? {
        PredictionFile::Many(d) => d,
        PredictionFile::One(d) => vec![d],
    };
    docs.into_iter()
        .map(|doc| {
            let dims = *index
                .get(&doc.image_id)
                .ok_or_else(|| IngestError::UnknownImage(doc.image_id.clone()))?;
            let mut instances = Vec::new();
            for (i, raw) in doc.instances.iter().enumerate() {
                let inst = decode_instance(&doc.image_id, i, raw, dims)?;
                if inst.confidence >= confidence_floor {
                    instances.push(inst);
                }
            }
            Ok(ExternalPrediction {
                image_id: doc.image_id,
                instances,
            })
        })
        .collect()
}

pub fn ingest_predictions(
    path: &Path,
    index: &ImageIndex,
    confidence_floor: f64,
) -> Result<Vec<ExternalPrediction>, IngestError> {
    let bytes = std::fs::read(path).map_err(|source| IngestError::Io {
        path: path.display().to_string(),
        source,
    })?;
    parse_predictions(&bytes, index, confidence_floor)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MergeMode {
    SupervisedOnly,
    UnsupervisedOnly,
    PreferSupervised,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MergePolicy {
    #[serde(default = "half")]
    pub confidence_floor: f64,
    #[serde(default = "half")]
    pub match_iou: f64,
    #[serde(default = "prefer")]
    pub mode: MergeMode,
}

fn half() -> f64 {
    0.5
}

fn prefer() -> MergeMode {
    MergeMode::PreferSupervised
}

impl Default for MergePolicy {
    fn default() -> Self {
        Self {
            confidence_floor: 0.5,
            match_iou: 0.5,
            mode: MergeMode::PreferSupervised,
        }
    }
}

impl MergePolicy {
    pub fn validate(&self) -> Result<(), String> {
        for (name, v) in [
            ("confidence_floor", self.confidence_floor),
            ("match_iou", self.match_iou),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return Err(format!("{name} must be in [0, 1], got {v}"));
            }
        }
        Ok(())
    }
}

/// Combines labels for one image.
///
/// Under `prefer_supervised`, supervised instances are visited by descending
/// confidence and each claims the unclaimed unsupervised instance with the
/// highest box IoU at or above `match_iou`. The output is every supervised
/// instance (input order) followed by unclaimed unsupervised instances whose
/// class has no supervised instance in the image.
pub fn merge_labels(
    unsup: &[LabeledInstance],
    sup: &[LabeledInstance],
    policy: &MergePolicy,
) -> Vec<LabeledInstance> {
    match policy.mode {
        MergeMode::SupervisedOnly => return sup.to_vec(),
        MergeMode::UnsupervisedOnly => return unsup.to_vec(),
        MergeMode::PreferSupervised => {}
    }
    let mut order: Vec<usize> = (0..sup.len()).collect();
    order.sort_by(|&a, &b| sup[b].score.total_cmp(&sup[a].score));
    let mut claimed = vec![false; unsup.len()];
    for &s in &order {
        let best = unsup
            .iter()
            .enumerate()
            .filter(|(u, _)| !claimed[*u])
            .map(|(u, inst)| (u, sup[s].bbox.iou(&inst.bbox)))
            .filter(|&(_, iou)| iou >= policy.match_iou)
            .fold(None::<(usize, f64)>, |acc, cand| match acc {
                Some(a) if a.1 >= cand.1 => Some(a),
                _ => Some(cand),
            });
        if let Some((u, _)) = best {
            claimed[u] = true;
        }
    }
    let sup_classes: HashSet<&str> = sup.iter().map(|i| i.class_token.as_str()).collect();
    sup.iter()
        .cloned()
        .chain(
            unsup
                .iter()
                .enumerate()
                .filter(|(u, inst)| !claimed[*u] && !sup_classes.contains(inst.class_token.as_str()))
                .map(|(_, inst)| inst.clone()),
        )
        .collect()
}
