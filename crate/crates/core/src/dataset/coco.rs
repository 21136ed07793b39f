//! Instance-segmentation annotation document.
//!
//! Standard fields hold pixel-corner polygons and integer boxes. The exact
//! pixel-center polygons, score and label source ride along under a
//! `diffuforge` key so a document parses back into identical instances.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{write_atomic, ClassRegistry, DatasetError, DatasetRecord};
use crate::raster::{BoundingBox, LabelSource, LabeledInstance, Point, Polygon};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CocoDocument {
    pub images: Vec<CocoImage>,
    pub categories: Vec<CocoCategory>,
    pub annotations: Vec<CocoAnnotation>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CocoImage {
    pub id: u64,
    pub file_name: String,
    pub width: u32,
    pub height: u32,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CocoCategory {
    pub id: u32,
    pub name: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CocoAnnotation {
    pub id: u64,
    pub image_id: u64,
    pub category_id: u32,
    pub segmentation: Vec<Vec<f64>>,
    pub bbox: [u32; 4],
    pub area: f64,
    pub iscrowd: u8,
    pub diffuforge: CocoExtension,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CocoExtension {
    pub score: f64,
    pub source: LabelSource,
    /// Pixel-center vertices as flat `[x0, y0, x1, y1, ...]` lists.
    pub polygons: Vec<Vec<f64>>,
}

fn sign_positive(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else {
        0.0
    }
}

/// Maps each pixel-center vertex to the pixel corner on the outside of the
/// shape, so the ring encloses whole pixels (a 3x3 square becomes a ring of
/// area 9).
pub fn corner_ring(poly: &Polygon) -> Vec<Point> {
    let v = poly.vertices();
    let n = v.len();
    (0..n)
        .map(|i| {
            let prev = v[(i + n - 1) % n];
            let cur = v[i];
            let next = v[(i + 1) % n];
            // Vertices run counter-clockwise on screen, so (-dy, dx) points
            // outward.
            let (d1x, d1y) = (cur.x - prev.x, cur.y - prev.y);
            let (d2x, d2y) = (next.x - cur.x, next.y - cur.y);
            let bx = -d1y - d2y;
            let by = d1x + d2x;
            Point::new(cur.x + sign_positive(bx), cur.y + sign_positive(by))
        })
        .collect()
}

fn shoelace(ring: &[Point]) -> f64 {
    let n = ring.len();
    let twice: f64 = (0..n)
        .map(|i| {
            let (a, b) = (ring[i], ring[(i + 1) % n]);
            a.x * b.y - b.x * a.y
        })
        .sum();
    twice.abs() / 2.0
}

fn flatten(points: &[Point]) -> Vec<f64> {
    points.iter().flat_map(|p| [p.x, p.y]).collect()
}

/// Builds the document; images and annotations get 1-based ids in record
/// and instance order.
pub fn coco_document(
    records: &[DatasetRecord],
    registry: &ClassRegistry,
) -> Result<CocoDocument, DatasetError> {
    let categories = registry
        .entries()
        .into_iter()
        .map(|(id, name)| CocoCategory {
            id,
            name: name.to_string(),
        })
        .collect();
    let mut images = Vec::with_capacity(records.len());
    let mut annotations = Vec::new();
    for (image_id, record) in (1u64..).zip(records) {
        record.check_geometry()?;
        images.push(CocoImage {
            id: image_id,
            file_name: record.image_path.clone(),
            width: record.width,
            height: record.height,
        });
        for inst in &record.instances {
            let category_id = registry.id(&inst.class_token)?;
            let rings: Vec<Vec<Point>> = inst.polygons.iter().map(corner_ring).collect();
            let area = if rings.is_empty() {
                inst.bbox.area() as f64
            } else {
                rings.iter().map(|r| shoelace(r)).sum()
            };
            let b = inst.bbox;
            annotations.push(CocoAnnotation {
                id: annotations.len() as u64 + 1,
                image_id,
                category_id,
                segmentation: rings.iter().map(|r| flatten(r)).collect(),
                bbox: [b.x_min, b.y_min, b.width, b.height],
                area,
                iscrowd: 0,
                diffuforge: CocoExtension {
                    score: inst.score,
                    source: inst.source,
                    polygons: inst.polygons.iter().map(|p| flatten(p.vertices())).collect(),
                },
            });
        }
    }
    Ok(CocoDocument {
        images,
        categories,
        annotations,
    })
}

pub fn write_coco(
    records: &[DatasetRecord],
    registry: &ClassRegistry,
    out_path: &Path,
) -> Result<CocoDocument, DatasetError> {
    let doc = coco_document(records, registry)?;
    let json = serde_json::to_vec_pretty(&doc).expect("document serializes");
    write_atomic(out_path, &json)?;
    Ok(doc)
}

pub fn parse_coco(bytes: &[u8], path: &Path) -> Result<CocoDocument, DatasetError> {
    serde_json::from_slice(bytes).map_err(|source| DatasetError::Json {
        path: path.to_path_buf(),
        source,
    })
}

impl CocoDocument {
    /// Instances grouped by image `file_name`, in annotation order.
    pub fn instances_by_file(&self) -> Result<BTreeMap<String, Vec<LabeledInstance>>, String> {
        let files: BTreeMap<u64, &str> = self.images.iter().map(|i| (i.id, i.file_name.as_str())).collect();
        let names: BTreeMap<u32, &str> = self.categories.iter().map(|c| (c.id, c.name.as_str())).collect();
        let mut out: BTreeMap<String, Vec<LabeledInstance>> =
            files.values().map(|f| (f.to_string(), Vec::new())).collect();
        for a in &self.annotations {
            let file = files
                .get(&a.image_id)
                .ok_or_else(|| format!("annotation {}: unknown image {}", a.id, a.image_id))?;
            let class = names
                .get(&a.category_id)
                .ok_or_else(|| format!("annotation {}: unknown category {}", a.id, a.category_id))?;
            let polygons = a
                .diffuforge
                .polygons
                .iter()
                .map(|flat| {
                    let pts = flat.chunks_exact(2).map(|c| Point::new(c[0], c[1])).collect();
                    Polygon::new(pts).map_err(|e| format!("annotation {}: {e}", a.id))
                })
                .collect::<Result<Vec<_>, _>>()?;
            let [x, y, w, h] = a.bbox;
            let bbox = BoundingBox::new(x, y, w, h).map_err(|e| format!("annotation {}: {e}", a.id))?;
            out.get_mut(*file).expect("seeded above").push(LabeledInstance {
                class_token: class.to_string(),
                polygons,
                bbox,
                score: a.diffuforge.score,
                source: a.diffuforge.source,
            });
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::super::tests::record;
    use super::*;

    fn square() -> LabeledInstance {
        LabeledInstance {
            class_token: "car".into(),
            polygons: vec![Polygon::from_pixels(&[(1, 1), (1, 3), (3, 3), (3, 1)]).unwrap()],
            bbox: BoundingBox::new(1, 1, 3, 3).unwrap(),
            score: 0.7310585786300049,
            source: LabelSource::Unsupervised,
        }
    }

    #[test]
    fn square_area_is_nine() {
        let recs = vec![record("a", 8, 8, vec![square()])];
        let doc = coco_document(&recs, &ClassRegistry::from_records(&recs)).unwrap();
        assert_eq!((doc.images.len(), doc.categories.len(), doc.annotations.len()), (1, 1, 1));
        let a = &doc.annotations[0];
        // Hand shoelace over corners (1,1) (1,4) (4,4) (4,1): 3 * 3.
        assert!((a.area - 9.0).abs() < 1e-6);
        assert_eq!(a.segmentation, vec![vec![1.0, 1.0, 1.0, 4.0, 4.0, 4.0, 4.0, 1.0]]);
        assert_eq!(a.bbox, [1, 1, 3, 3]);
    }

    #[test]
    fn round_trip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let mut other = square();
        other.class_token = "dog".into();
        other.source = LabelSource::Supervised;
        other.polygons.clear();
        let recs = vec![
            record("a", 8, 8, vec![square(), other]),
            record("b", 8, 8, vec![]),
        ];
        let path = dir.path().join("labels_coco.json");
        let reg = ClassRegistry::from_records(&recs);
        write_coco(&recs, &reg, &path).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        let doc = parse_coco(&bytes, &path).unwrap();
        let by_file = doc.instances_by_file().unwrap();
        for r in &recs {
            assert_eq!(by_file[&r.image_path], r.instances);
        }
        assert_eq!(doc.annotations[1].area, 9.0);
        write_coco(&recs, &reg, &path).unwrap();
        assert_eq!(std::fs::read(&path).unwrap(), bytes);
    }

    #[test]
    fn empty_dataset_is_valid() {
        let doc = coco_document(&[], &ClassRegistry::default()).unwrap();
        let json = serde_json::to_value(&doc).unwrap();
        assert_eq!(json, serde_json::json!({"images": [], "categories": [], "annotations": []}));
    }

    #[test]
    fn errors() {
        let recs = vec![record("a", 8, 8, vec![square()])];
        assert!(matches!(
            coco_document(&recs, &ClassRegistry::new(["bus"])),
            Err(DatasetError::UnregisteredClass(c)) if c == "car"
        ));
        let small = vec![record("a", 3, 3, vec![square()])];
        assert!(matches!(
            coco_document(&small, &ClassRegistry::from_records(&small)),
            Err(DatasetError::OutOfBounds { .. })
        ));
    }
}
