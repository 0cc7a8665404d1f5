use std::path::{Path, PathBuf};
use std::sync::Arc;

use image::RgbImage;
use serde::{Deserialize, Serialize};

use super::HarnessError;
use crate::geometry::{BBox, ImageSize, Point};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CaseTags {
    pub platform: String,
    /// `text` or `icon`.
    pub target_kind: String,
}

#[derive(Debug, Clone)]
pub enum ImageSource {
    /// Loaded on first use.
    Path(PathBuf),
    Memory(Arc<RgbImage>),
}

impl ImageSource {
    pub fn load(&self) -> Result<Arc<RgbImage>, HarnessError> {
        match self {
            ImageSource::Memory(img) => Ok(img.clone()),
            ImageSource::Path(p) => image::open(p)
                .map(|i| Arc::new(i.to_rgb8()))
                .map_err(|e| HarnessError::Image(format!("{}: {e}", p.display()))),
        }
    }
}

#[derive(Debug, Clone)]
pub struct EvalCase {
    pub image: ImageSource,
    pub instruction: String,
    pub gt_bbox: BBox,
    pub tags: CaseTags,
}

/// One record of the on-disk dataset format.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetRecord {
    pub img_filename: String,
    pub instruction: String,
    pub bbox: [f64; 4],
    pub platform: String,
    pub target_kind: String,
}

/// Read a JSON array of records. Image paths are resolved against the
/// directory holding the dataset file; images are not opened here.
pub fn load_dataset(path: &Path) -> Result<Vec<EvalCase>, HarnessError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| HarnessError::Io(format!("{}: {e}", path.display())))?;
    let raw: Vec<serde_json::Value> =
        serde_json::from_str(&text).map_err(|e| HarnessError::Schema {
            record: None,
            message: format!("dataset must be a JSON array of records: {e}"),
        })?;
    let base = path.parent().unwrap_or(Path::new("."));
    raw.into_iter()
        .enumerate()
        .map(|(i, v)| {
            let r: DatasetRecord = serde_json::from_value(v).map_err(|e| HarnessError::Schema {
                record: Some(i),
                message: e.to_string(),
            })?;
            let [x1, y1, x2, y2] = r.bbox;
            let gt_bbox = BBox::new(x1, y1, x2, y2).map_err(|e| HarnessError::Schema {
                record: Some(i),
                message: e.to_string(),
            })?;
            if r.instruction.trim().is_empty() {
                return Err(HarnessError::Schema {
                    record: Some(i),
                    message: "empty instruction".into(),
                });
            }
            Ok(EvalCase {
                image: ImageSource::Path(base.join(&r.img_filename)),
                instruction: r.instruction,
                gt_bbox,
                tags: CaseTags {
                    platform: r.platform,
                    target_kind: r.target_kind,
                },
            })
        })
        .collect()
}

pub fn save_dataset(path: &Path, records: &[DatasetRecord]) -> Result<(), HarnessError> {
    let text =
        serde_json::to_string_pretty(records).map_err(|e| HarnessError::Io(e.to_string()))?;
    std::fs::write(path, text + "\n")
        .map_err(|e| HarnessError::Io(format!("{}: {e}", path.display())))
}

/// Inclusive point-in-box.
pub fn score_case(pred: Point, case: &EvalCase) -> bool {
    case.gt_bbox.contains(&pred)
}

/// The ground-truth box must lie inside the image it annotates.
pub fn check_case_image(case: &EvalCase, size: ImageSize) -> Result<(), HarnessError> {
    if size.full_box().contains_box(&case.gt_bbox) {
        Ok(())
    } else {
        Err(HarnessError::Schema {
            record: None,
            message: format!(
                "bbox {:?} lies outside the {}x{} image",
                case.gt_bbox, size.width, size.height
            ),
        })
    }
}
