//! Per-image normalized box labels: `class cx cy w h`, zero-based class ids.

use std::path::Path;

use super::{write_atomic, ClassRegistry, DatasetError, DatasetRecord};
use crate::raster::BoundingBox;

pub const CLASSES_FILE: &str = "classes.txt";

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct YoloLine {
    pub class_id: u32,
    pub cx: f64,
    pub cy: f64,
    pub w: f64,
    pub h: f64,
}

impl YoloLine {
    pub fn from_bbox(class_id: u32, b: &BoundingBox, width: u32, height: u32) -> Self {
        let (iw, ih) = (width as f64, height as f64);
        Self {
            class_id,
            cx: (b.x_min as f64 + b.width as f64 / 2.0) / iw,
            cy: (b.y_min as f64 + b.height as f64 / 2.0) / ih,
            w: b.width as f64 / iw,
            h: b.height as f64 / ih,
        }
    }

    /// Pixel-space `(x_min, y_min, width, height)`.
    pub fn denormalize(&self, width: u32, height: u32) -> [f64; 4] {
        let (iw, ih) = (width as f64, height as f64);
        let (w, h) = (self.w * iw, self.h * ih);
        [self.cx * iw - w / 2.0, self.cy * ih - h / 2.0, w, h]
    }

    pub fn format(&self) -> String {
        format!(
            "{} {:.6} {:.6} {:.6} {:.6}",
            self.class_id, self.cx, self.cy, self.w, self.h
        )
    }
}

pub fn parse_yolo_line(line: &str) -> Result<YoloLine, DatasetError> {
    let bad = || DatasetError::YoloLine(line.to_string());
    let fields: Vec<&str> = line.split_whitespace().collect();
    if fields.len() != 5 {
        return Err(bad());
    }
    let class_id = fields[0].parse().map_err(|_| bad())?;
    let mut v = [0.0; 4];
    for (slot, f) in v.iter_mut().zip(&fields[1..]) {
        *slot = f.parse().map_err(|_| bad())?;
    }
    Ok(YoloLine {
        class_id,
        cx: v[0],
        cy: v[1],
        w: v[2],
        h: v[3],
    })
}

pub fn yolo_lines(record: &DatasetRecord, registry: &ClassRegistry) -> Result<String, DatasetError> {
    record.check_geometry()?;
    let mut out = String::new();
    for inst in &record.instances {
        let id = registry.id(&inst.class_token)? - 1;
        out.push_str(&YoloLine::from_bbox(id, &inst.bbox, record.width, record.height).format());
        out.push('\n');
    }
    Ok(out)
}

/// Writes `<image_id>.txt` per record and `classes.txt` listing names by id.
pub fn write_yolo(
    records: &[DatasetRecord],
    registry: &ClassRegistry,
    out_dir: &Path,
) -> Result<(), DatasetError> {
    let files = records
        .iter()
        .map(|r| Ok((r, yolo_lines(r, registry)?)))
        .collect::<Result<Vec<_>, DatasetError>>()?;
    for (r, text) in files {
        write_atomic(&out_dir.join(format!("{}.txt", r.image_id)), text.as_bytes())?;
    }
    let classes: String = registry
        .entries()
        .into_iter()
        .map(|(_, name)| format!("{name}\n"))
        .collect();
    write_atomic(&out_dir.join(CLASSES_FILE), classes.as_bytes())
}
