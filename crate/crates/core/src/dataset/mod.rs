//! On-disk dataset layout, provenance manifest and annotation exporters.
//!
//! A dataset root holds:
//!
//! ```text
//! images/           <image_id>.png
//! heatmaps/         <image_id>__<token>.hm32
//! sidecar/          <image_id>.json   (synthetic ground truth only)
//! labels_coco.json
//! labels_yolo/      <image_id>.txt + classes.txt
//! masks/            <image_id>.png
//! overlays/         <image_id>.png
//! manifest.json
//! ```

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::backend::{GenerationResult, SyntheticObject, TaskKind};
use crate::codec::{self, CodecError};
use crate::labeler::LabelingParams;
use crate::raster::{Heatmap, ImageRaster, LabeledInstance, RasterError};
use crate::supervised::MergePolicy;

pub mod coco;
pub mod masks;
pub mod overlay;
pub mod yolo;

pub use coco::{coco_document, parse_coco, write_coco, CocoDocument};
pub use masks::{semantic_mask_image, write_semantic_masks};
pub use overlay::render_overlay;
pub use yolo::{parse_yolo_line, write_yolo, yolo_lines, YoloLine};

pub const IMAGES_DIR: &str = "images";
pub const HEATMAPS_DIR: &str = "heatmaps";
pub const SIDECAR_DIR: &str = "sidecar";
pub const COCO_FILE: &str = "labels_coco.json";
pub const YOLO_DIR: &str = "labels_yolo";
pub const MASKS_DIR: &str = "masks";
pub const OVERLAYS_DIR: &str = "overlays";
pub const MANIFEST_FILE: &str = "manifest.json";

/// Largest class id a single-channel mask can hold.
pub const MAX_MASK_CLASSES: usize = 255;

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("{path}: {source}")]
    Json {
        path: PathBuf,
        source: serde_json::Error,
    },
    #[error("{path}: {source}")]
    Codec { path: PathBuf, source: CodecError },
    #[error("{path}: {source}")]
    Raster { path: PathBuf, source: RasterError },
    #[error("class '{0}' is not registered")]
    UnregisteredClass(String),
    #[error("image '{image_id}': instance {index} ({class_token}) lies outside {width}x{height}")]
    OutOfBounds {
        image_id: String,
        index: usize,
        class_token: String,
        width: u32,
        height: u32,
    },
    #[error("{0} classes exceed the {MAX_MASK_CLASSES} a mask can encode")]
    TooManyClasses(usize),
    #[error("duplicate image_id '{0}'")]
    DuplicateImage(String),
    #[error("malformed YOLO line '{0}'")]
    YoloLine(String),
}

pub(crate) fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> DatasetError + '_ {
    move |source| DatasetError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Where an image came from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub template_id: String,
    pub attribute_bindings: BTreeMap<String, String>,
    pub seed: u64,
    pub task: TaskKind,
    pub backend_id: String,
    pub prompt: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub negative_prompt: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetRecord {
    pub image_id: String,
    /// Relative to the dataset root.
    pub image_path: String,
    pub width: u32,
    pub height: u32,
    /// Token to relative `.hm32` path.
    #[serde(default)]
    pub heatmaps: BTreeMap<String, String>,
    #[serde(default)]
    pub instances: Vec<LabeledInstance>,
    pub provenance: Provenance,
}

impl DatasetRecord {
    /// Checks that every instance fits the image.
    pub fn check_geometry(&self) -> Result<(), DatasetError> {
        for (index, inst) in self.instances.iter().enumerate() {
            if !inst.fits(self.width, self.height) {
                return Err(DatasetError::OutOfBounds {
                    image_id: self.image_id.clone(),
                    index,
                    class_token: inst.class_token.clone(),
                    width: self.width,
                    height: self.height,
                });
            }
        }
        Ok(())
    }
}

/// A request that produced no record.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FailureRecord {
    pub image_id: String,
    pub template_id: String,
    pub seed: u64,
    pub error: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LabelMode {
    Unsupervised,
    Supervised,
    Hybrid,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub dataset_id: String,
    pub created_at: DateTime<Utc>,
    pub config_digest: String,
    pub backend_id: String,
    /// Stored so labeling can run from the dataset root alone.
    #[serde(default)]
    pub labeling: LabelingParams,
    #[serde(default)]
    pub merge_policy: MergePolicy,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label_mode: Option<LabelMode>,
    pub records: Vec<DatasetRecord>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub failures: Vec<FailureRecord>,
}

impl Manifest {
    pub fn validate(&self) -> Result<(), DatasetError> {
        let mut seen = HashSet::new();
        for r in &self.records {
            if !seen.insert(r.image_id.as_str()) {
                return Err(DatasetError::DuplicateImage(r.image_id.clone()));
            }
            r.check_geometry()?;
        }
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self, DatasetError> {
        let bytes = fs::read(path).map_err(io_err(path))?;
        let m: Manifest = serde_json::from_slice(&bytes).map_err(|source| DatasetError::Json {
            path: path.to_path_buf(),
            source,
        })?;
        m.validate()?;
        Ok(m)
    }

    pub fn write(&self, path: &Path) -> Result<(), DatasetError> {
        self.validate()?;
        let json = serde_json::to_vec_pretty(self).expect("manifest serializes");
        write_atomic(path, &json)
    }
}

/// Writes through a sibling temp file so readers never see a torn file.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), DatasetError> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(io_err(parent))?;
    }
    let tmp = path.with_extension("tmp");
    {
        let mut f = fs::File::create(&tmp).map_err(io_err(&tmp))?;
        f.write_all(bytes).map_err(io_err(&tmp))?;
    }
    fs::rename(&tmp, path).map_err(io_err(path))
}

/// SHA-256 over the canonical (sorted-key, compact) JSON form.
pub fn config_digest(config: &serde_json::Value) -> String {
    let canonical = serde_json::to_vec(config).expect("value serializes");
    let digest = Sha256::digest(&canonical);
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

/// Class token to 1-based id, assigned in sorted token order.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ClassRegistry {
    ids: BTreeMap<String, u32>,
}

impl ClassRegistry {
    pub fn new<I, S>(tokens: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let sorted: BTreeSet<String> = tokens.into_iter().map(Into::into).collect();
        let ids = sorted.into_iter().zip(1u32..).collect();
        Self { ids }
    }

    pub fn from_records(records: &[DatasetRecord]) -> Self {
        Self::new(
            records
                .iter()
                .flat_map(|r| r.instances.iter().map(|i| i.class_token.clone())),
        )
    }

    pub fn id(&self, token: &str) -> Result<u32, DatasetError> {
        self.ids
            .get(token)
            .copied()
            .ok_or_else(|| DatasetError::UnregisteredClass(token.to_string()))
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    /// `(id, token)` in id order.
    pub fn entries(&self) -> Vec<(u32, &str)> {
        let mut v: Vec<_> = self.ids.iter().map(|(t, &id)| (id, t.as_str())).collect();
        v.sort_unstable();
        v
    }
}

/// Path helpers for one dataset root.
#[derive(Debug, Clone)]
pub struct DatasetLayout {
    root: PathBuf,
}

impl DatasetLayout {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn manifest_path(&self) -> PathBuf {
        self.root.join(MANIFEST_FILE)
    }

    pub fn resolve(&self, relative: &str) -> PathBuf {
        self.root.join(relative)
    }

    pub fn sidecar_path(&self, image_id: &str) -> PathBuf {
        self.root.join(SIDECAR_DIR).join(format!("{image_id}.json"))
    }

    pub fn read_manifest(&self) -> Result<Manifest, DatasetError> {
        Manifest::read(&self.manifest_path())
    }

    pub fn write_manifest(&self, m: &Manifest) -> Result<(), DatasetError> {
        m.write(&self.manifest_path())
    }

    pub fn read_image(&self, record: &DatasetRecord) -> Result<ImageRaster, DatasetError> {
        let path = self.resolve(&record.image_path);
        let bytes = fs::read(&path).map_err(io_err(&path))?;
        codec::decode_rgb_png(&bytes).map_err(|source| DatasetError::Codec { path, source })
    }

    pub fn read_heatmap(&self, relative: &str) -> Result<Heatmap, DatasetError> {
        let path = self.resolve(relative);
        let f = fs::File::open(&path).map_err(io_err(&path))?;
        Heatmap::read_hm32(std::io::BufReader::new(f))
            .map_err(|source| DatasetError::Raster { path, source })
    }

    pub fn read_sidecar(&self, image_id: &str) -> Result<Option<Vec<SyntheticObject>>, DatasetError> {
        let path = self.sidecar_path(image_id);
        if !path.exists() {
            return Ok(None);
        }
        let bytes = fs::read(&path).map_err(io_err(&path))?;
        serde_json::from_slice(&bytes)
            .map(Some)
            .map_err(|source| DatasetError::Json { path, source })
    }

    /// Persists the image, heatmaps and any ground truth of one generation
    /// and returns its (unlabeled) record.
    pub fn write_generation(
        &self,
        image_id: &str,
        result: &GenerationResult,
    ) -> Result<DatasetRecord, DatasetError> {
        let image_rel = format!("{IMAGES_DIR}/{image_id}.png");
        let image_path = self.resolve(&image_rel);
        let png = codec::encode_rgb_png(&result.image).map_err(|source| DatasetError::Codec {
            path: image_path.clone(),
            source,
        })?;
        write_atomic(&image_path, &png)?;

        let mut heatmaps = BTreeMap::new();
        for (token, rel) in heatmap_file_names(image_id, result.heatmaps.keys().map(String::as_str)) {
            let mut buf = Vec::new();
            result.heatmaps[token]
                .write_hm32(&mut buf)
                .expect("writing to memory cannot fail");
            write_atomic(&self.resolve(&rel), &buf)?;
            heatmaps.insert(token.to_string(), rel);
        }

        if let Some(truth) = &result.ground_truth {
            let json = serde_json::to_vec_pretty(truth).expect("sidecar serializes");
            write_atomic(&self.sidecar_path(image_id), &json)?;
        }

        let prompt = &result.echo.prompt;
        Ok(DatasetRecord {
            image_id: image_id.to_string(),
            image_path: image_rel,
            width: result.image.width(),
            height: result.image.height(),
            heatmaps,
            instances: Vec::new(),
            provenance: Provenance {
                template_id: prompt.template_id.clone(),
                attribute_bindings: prompt.bindings.clone(),
                seed: result.echo.seed,
                task: result.echo.task,
                backend_id: result.backend_id.clone(),
                prompt: prompt.text.clone(),
                negative_prompt: prompt.negative_text.clone(),
            },
        })
    }
}

/// Replaces anything outside `[A-Za-z0-9_-]` with `_`.
pub fn sanitize_token(token: &str) -> String {
    let s: String = token
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '_' || c == '-' { c } else { '_' })
        .collect();
    if s.is_empty() {
        "_".into()
    } else {
        s
    }
}

/// Relative heatmap paths for each token, disambiguating tokens that
/// sanitize to the same name.
pub fn heatmap_file_names<'a>(
    image_id: &str,
    tokens: impl IntoIterator<Item = &'a str>,
) -> Vec<(&'a str, String)> {
    let mut used = HashSet::new();
    tokens
        .into_iter()
        .map(|t| {
            let base = sanitize_token(t);
            let mut name = base.clone();
            let mut n = 1;
            while !used.insert(name.clone()) {
                name = format!("{base}_{n}");
                n += 1;
            }
            (t, format!("{HEATMAPS_DIR}/{image_id}__{name}.hm32"))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::raster::{BoundingBox, LabelSource, Polygon};

    pub(crate) fn record(id: &str, w: u32, h: u32, instances: Vec<LabeledInstance>) -> DatasetRecord {
        DatasetRecord {
            image_id: id.into(),
            image_path: format!("images/{id}.png"),
            width: w,
            height: h,
            heatmaps: BTreeMap::new(),
            instances,
            provenance: Provenance {
                template_id: "t".into(),
                attribute_bindings: [("color".to_string(), "red".to_string())].into(),
                seed: 7,
                task: TaskKind::TextToImage,
                backend_id: "synthetic-v1".into(),
                prompt: "a red car".into(),
                negative_prompt: None,
            },
        }
    }

    fn instance() -> LabeledInstance {
        LabeledInstance {
            class_token: "car".into(),
            polygons: vec![Polygon::from_pixels(&[(1, 1), (1, 3), (3, 3), (3, 1)]).unwrap()],
            bbox: BoundingBox::new(1, 1, 3, 3).unwrap(),
            score: 0.123456789012345,
            source: LabelSource::Unsupervised,
        }
    }

    #[test]
    fn manifest_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let m = Manifest {
            dataset_id: "ds".into(),
            created_at: Utc::now(),
            config_digest: config_digest(&serde_json::json!({"b": 1, "a": [1.5]})),
            backend_id: "synthetic-v1".into(),
            labeling: LabelingParams::default(),
            merge_policy: MergePolicy::default(),
            label_mode: Some(LabelMode::Hybrid),
            records: vec![record("a", 8, 8, vec![instance()]), record("b", 8, 8, vec![])],
            failures: vec![FailureRecord {
                image_id: "c".into(),
                template_id: "t".into(),
                seed: 3,
                error: "boom".into(),
            }],
        };
        let p = dir.path().join("manifest.json");
        m.write(&p).unwrap();
        assert_eq!(Manifest::read(&p).unwrap(), m);
    }

    #[test]
    fn manifest_rejects_duplicates_and_out_of_bounds() {
        let mut m = Manifest {
            dataset_id: "ds".into(),
            created_at: Utc::now(),
            config_digest: String::new(),
            backend_id: String::new(),
            labeling: LabelingParams::default(),
            merge_policy: MergePolicy::default(),
            label_mode: None,
            records: vec![record("a", 8, 8, vec![]), record("a", 8, 8, vec![])],
            failures: vec![],
        };
        assert!(matches!(m.validate(), Err(DatasetError::DuplicateImage(_))));
        m.records = vec![record("a", 3, 3, vec![instance()])];
        assert!(matches!(m.validate(), Err(DatasetError::OutOfBounds { index: 0, .. })));
    }

    #[test]
    fn digest_ignores_key_order() {
        let a: serde_json::Value = serde_json::from_str(r#"{"x":1,"y":{"b":2,"a":3}}"#).unwrap();
        let b: serde_json::Value = serde_json::from_str(r#"{"y":{"a":3,"b":2},"x":1}"#).unwrap();
        assert_eq!(config_digest(&a), config_digest(&b));
        assert_eq!(config_digest(&a).len(), 64);
        let c: serde_json::Value = serde_json::from_str(r#"{"x":2,"y":{"a":3,"b":2}}"#).unwrap();
        assert_ne!(config_digest(&a), config_digest(&c));
    }

    #[test]
    fn registry_is_sorted_and_one_based() {
        let r = ClassRegistry::new(["dog", "car", "dog", "bus"]);
        assert_eq!(r.entries(), vec![(1, "bus"), (2, "car"), (3, "dog")]);
        assert!(matches!(r.id("cat"), Err(DatasetError::UnregisteredClass(_))));
    }

    #[test]
    fn heatmap_names_are_unique() {
        let names = heatmap_file_names("img", ["a b", "a_b", "ok"]);
        assert_eq!(names[0].1, "heatmaps/img__a_b.hm32");
        assert_eq!(names[1].1, "heatmaps/img__a_b_1.hm32");
        assert_eq!(names[2].1, "heatmaps/img__ok.hm32");
    }
}
