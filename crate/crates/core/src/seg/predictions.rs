//! COCO results files in and out, and ground truth from a COCO export.

use std::collections::HashMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use super::instance::InstanceRecord;
use crate::dataset::{CocoDataset, CocoImage, Label, Segmentation};
use crate::error::{Error, Result};
use crate::mask::{fill_polygon, Mask};
use crate::rle::Rle;

/// One detection in COCO results format.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CocoResult {
    pub image_id: u64,
    pub category_id: u64,
    pub segmentation: Segmentation,
    pub score: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bbox: Option<[f64; 4]>,
}

#[derive(Clone, Debug, Default)]
pub struct PredictionImport {
    pub records: Vec<InstanceRecord>,
    /// Records that could not be decoded, with their position.
    pub errors: Vec<String>,
    /// Non-fatal findings such as a declared box that disagrees with the mask.
    pub warnings: Vec<String>,
}

fn decode_segmentation(seg: &Segmentation, img: &CocoImage) -> Result<Mask> {
    let (h, w) = (img.height as usize, img.width as usize);
    if let Some(rle) = seg.to_rle() {
        let rle = rle?;
        if rle.size != [h, w] {
            return Err(Error::shape(format!("RLE size {:?} but image is {h}x{w}", rle.size)));
        }
        return rle.decode();
    }
    let polys = seg.polygons().expect("polygon or RLE")?;
    let mut m = Mask::new(h, w);
    for p in polys {
        let part = fill_polygon(h, w, &p);
        for y in 0..h {
            for x in 0..w {
                if part.get(y, x) {
                    m.set(y, x, true);
                }
            }
        }
    }
    Ok(m)
}

fn decode_one(v: &Value, images: &HashMap<u64, &CocoImage>, warnings: &mut Vec<String>, i: usize) -> Result<InstanceRecord> {
    let r: CocoResult = serde_json::from_value(v.clone())?;
    let img = images.get(&r.image_id).ok_or_else(|| Error::invalid(format!("unknown image id {}", r.image_id)))?;
    let label = Label::from_coco_id(r.category_id).ok_or_else(|| Error::invalid(format!("unknown category {}", r.category_id)))?;
    let mask = decode_segmentation(&r.segmentation, img)?;
    let rec = InstanceRecord::new(img.file_name.clone(), label, mask, r.score.clamp(0.0, 1.0))?;
    if let Some(b) = r.bbox {
        let t = rec.bbox.to_array();
        if b.iter().zip(t).any(|(d, c)| (d - c).abs() > 1.0) {
            warnings.push(format!("detection {i}: declared bbox {b:?} differs from mask box {t:?} by more than 1 px"));
        }
    }
    Ok(rec)
}

/// Decodes a results array; a bad detection is reported and skipped.
pub fn import_predictions(results: &Value, images: &[CocoImage]) -> Result<PredictionImport> {
    let arr = results.as_array().ok_or_else(|| Error::invalid("COCO results must be a JSON array"))?;
    let index: HashMap<u64, &CocoImage> = images.iter().map(|i| (i.id, i)).collect();
    let mut out = PredictionImport::default();
    for (i, v) in arr.iter().enumerate() {
        match decode_one(v, &index, &mut out.warnings, i) {
            Ok(r) => out.records.push(r),
            Err(e) => out.errors.push(format!("detection {i}: {e}")),
        }
    }
    Ok(out)
}

pub fn import_predictions_file(path: &Path, images: &[CocoImage]) -> Result<PredictionImport> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    import_predictions(&serde_json::from_slice(&bytes)?, images)
}

/// Encodes records as compact-RLE COCO results.
pub fn export_predictions(records: &[InstanceRecord], images: &[CocoImage]) -> Result<Vec<CocoResult>> {
    let by_name: HashMap<&str, &CocoImage> = images.iter().map(|i| (i.file_name.as_str(), i)).collect();
    records
        .iter()
        .map(|r| {
            let img = by_name
                .get(r.image_id.as_str())
                .ok_or_else(|| Error::invalid(format!("record refers to unknown image `{}`", r.image_id)))?;
            Ok(CocoResult {
                image_id: img.id,
                category_id: r.label.coco_id(),
                segmentation: Segmentation::from_rle(&Rle::encode(&r.mask)),
                score: r.score,
                bbox: Some(r.bbox.to_array()),
            })
        })
        .collect()
}

/// Ground-truth instances of a COCO export, optionally limited to a set of
/// image file names.
pub fn ground_truth(doc: &CocoDataset, only: Option<&[String]>) -> Result<Vec<InstanceRecord>> {
    let images: HashMap<u64, &CocoImage> = doc.images.iter().map(|i| (i.id, i)).collect();
    let mut out = Vec::new();
    for a in &doc.annotations {
        let img = images
            .get(&a.image_id)
            .ok_or_else(|| Error::invalid(format!("annotation {} refers to unknown image id {}", a.id, a.image_id)))?;
        if only.is_some_and(|names| !names.contains(&img.file_name)) {
            continue;
        }
        let label = Label::from_coco_id(a.category_id)
            .ok_or_else(|| Error::invalid(format!("annotation {} has unknown category {}", a.id, a.category_id)))?;
        let mask = decode_segmentation(&a.segmentation, img)?;
        if mask.is_empty() {
            log::warn!("annotation {} rasterises to an empty mask; skipped", a.id);
            continue;
        }
        out.push(InstanceRecord::ground_truth(img.file_name.clone(), label, mask)?);
    }
    Ok(out)
}
