//! Single-channel class-id masks.

use std::path::Path;

use super::{write_atomic, ClassRegistry, DatasetError, DatasetRecord, MAX_MASK_CLASSES};
use crate::codec;

/// Class-id pixels for one record. Higher-scoring instances are painted last
/// so they win overlaps; equal scores keep list order.
pub fn semantic_mask_image(record: &DatasetRecord, registry: &ClassRegistry) -> Result<Vec<u8>, DatasetError> {
    if registry.len() > MAX_MASK_CLASSES {
        return Err(DatasetError::TooManyClasses(registry.len()));
    }
    record.check_geometry()?;
    let (w, h) = (record.width, record.height);
    let mut out = vec![0u8; w as usize * h as usize];
    let mut order: Vec<_> = record.instances.iter().collect();
    order.sort_by(|a, b| a.score.total_cmp(&b.score));
    for inst in order {
        let id = registry.id(&inst.class_token)? as u8;
        for (x, y) in inst.coverage(w, h).foreground() {
            out[y as usize * w as usize + x as usize] = id;
        }
    }
    Ok(out)
}

/// Writes `<image_id>.png` per record.
pub fn write_semantic_masks(
    records: &[DatasetRecord],
    registry: &ClassRegistry,
    out_dir: &Path,
) -> Result<(), DatasetError> {
    for r in records {
        let values = semantic_mask_image(r, registry)?;
        let path = out_dir.join(format!("{}.png", r.image_id));
        let png = codec::encode_gray_png(r.width, r.height, values)
            .map_err(|source| DatasetError::Codec { path: path.clone(), source })?;
        write_atomic(&path, &png)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::super::tests::record;
    use super::*;
    use crate::raster::{BoundingBox, LabelSource, LabeledInstance};
    use std::collections::BTreeSet;

    fn boxed(class: &str, x: u32, y: u32, side: u32, score: f64) -> LabeledInstance {
        LabeledInstance {
            class_token: class.into(),
            polygons: vec![],
            bbox: BoundingBox::new(x, y, side, side).unwrap(),
            score,
            source: LabelSource::Unsupervised,
        }
    }

    #[test]
    fn value_set_and_precedence() {
        let reg = ClassRegistry::new(["a", "b", "c"]);
        let single = record("s", 10, 10, vec![boxed("c", 2, 2, 3, 0.5)]);
        let vals: BTreeSet<u8> = semantic_mask_image(&single, &reg).unwrap().into_iter().collect();
        assert_eq!(vals, [0, 3].into());

        let overlap = record("o", 10, 10, vec![boxed("a", 0, 0, 6, 0.9), boxed("b", 3, 3, 6, 0.4)]);
        let m = semantic_mask_image(&overlap, &reg).unwrap();
        assert_eq!(m[4 * 10 + 4], 1);
        assert_eq!(m[8 * 10 + 8], 2);

        let empty = record("e", 4, 4, vec![]);
        assert!(semantic_mask_image(&empty, &reg).unwrap().iter().all(|&v| v == 0));
    }

    #[test]
    fn too_many_classes() {
        let reg = ClassRegistry::new((0..256).map(|i| format!("c{i}")));
        let r = record("e", 4, 4, vec![]);
        assert!(matches!(semantic_mask_image(&r, &reg), Err(DatasetError::TooManyClasses(256))));
    }
}
