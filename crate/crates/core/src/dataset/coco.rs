//! COCO instance-format export and import.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use super::annotation::{rasterize, Geometry, MaskAnnotation};
use super::manifest::DatasetManifest;
use super::sample::{Label, SampleRecord};
use crate::error::{Error, Result};
use crate::rle::Rle;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CocoImage {
    pub id: u64,
    pub file_name: String,
    pub width: u32,
    pub height: u32,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum RleCounts {
    Compact(String),
    Raw(Vec<u64>),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Segmentation {
    Polygons(Vec<Vec<f64>>),
    Rle { size: [usize; 2], counts: RleCounts },
}

impl Segmentation {
    pub fn from_rle(rle: &Rle) -> Self {
        Segmentation::Rle {
            size: rle.size,
            counts: RleCounts::Compact(rle.counts_string()),
        }
    }

    pub fn to_rle(&self) -> Option<Result<Rle>> {
        match self {
            Segmentation::Rle { size, counts } => Some(match counts {
                RleCounts::Compact(s) => Rle::from_counts_string(*size, s),
                RleCounts::Raw(c) => Ok(Rle {
                    size: *size,
                    counts: c.clone(),
                }),
            }),
            Segmentation::Polygons(_) => None,
        }
    }

    /// Vertex lists as `(x, y)` pairs.
    pub fn polygons(&self) -> Option<Result<Vec<Vec<(f64, f64)>>>> {
        let Segmentation::Polygons(polys) = self else { return None };
        Some(
            polys
                .iter()
                .map(|flat| {
                    if flat.len() % 2 != 0 {
                        return Err(Error::invalid("polygon has an odd number of coordinates"));
                    }
                    Ok(flat.chunks(2).map(|c| (c[0], c[1])).collect())
                })
                .collect(),
        )
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CocoAnnotation {
    pub id: u64,
    pub image_id: u64,
    pub category_id: u64,
    pub segmentation: Segmentation,
    pub bbox: [f64; 4],
    pub area: f64,
    #[serde(default)]
    pub iscrowd: u8,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CocoCategory {
    pub id: u64,
    pub name: String,
    #[serde(default)]
    pub supercategory: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CocoDataset {
    pub images: Vec<CocoImage>,
    pub annotations: Vec<CocoAnnotation>,
    pub categories: Vec<CocoCategory>,
}

pub fn categories() -> Vec<CocoCategory> {
    let mut cats: Vec<CocoCategory> = Label::ALL
        .iter()
        .map(|l| CocoCategory {
            id: l.coco_id(),
            name: l.as_str().to_string(),
            supercategory: "potato".into(),
        })
        .collect();
    cats.sort_by_key(|c| c.id);
    cats
}

/// Finds the manifest record an annotation refers to, by id or, failing
/// that, by a unique file name.
pub fn resolve_image<'a>(manifest: &'a DatasetManifest, image_id: &str) -> Option<&'a SampleRecord> {
    if let Some(r) = manifest.get(image_id) {
        return Some(r);
    }
    let mut hits = manifest.samples.iter().filter(|s| s.file_name() == Some(image_id));
    let first = hits.next()?;
    hits.next().is_none().then_some(first)
}

/// Exports every manifest sample as an image and every annotation as an
/// instance. Ids are contiguous from 1 in input order.
pub fn export_coco(manifest: &DatasetManifest, annotations: &[MaskAnnotation]) -> Result<CocoDataset> {
    let images: Vec<CocoImage> = manifest
        .samples
        .iter()
        .enumerate()
        .map(|(i, s)| CocoImage {
            id: i as u64 + 1,
            file_name: s.id.clone(),
            width: s.width,
            height: s.height,
        })
        .collect();
    let index: HashMap<&str, usize> = manifest.samples.iter().enumerate().map(|(i, s)| (s.id.as_str(), i)).collect();
    let mut out = Vec::with_capacity(annotations.len());
    for (ai, ann) in annotations.iter().enumerate() {
        let rec = resolve_image(manifest, &ann.image_id)
            .ok_or_else(|| Error::invalid(format!("annotation refers to unknown image `{}`", ann.image_id)))?;
        let img_idx = index[rec.id.as_str()];
        let mask = rasterize(ann, (rec.height as usize, rec.width as usize))?;
        let bbox = ann.bbox().expect("rasterised annotations are non-empty");
        let segmentation = match &ann.geometry {
            Geometry::Polygon(p) => Segmentation::Polygons(vec![p.iter().flat_map(|&(x, y)| [x, y]).collect()]),
            Geometry::Bitmask(m) => Segmentation::from_rle(&Rle::encode(m)),
        };
        out.push(CocoAnnotation {
            id: ai as u64 + 1,
            image_id: images[img_idx].id,
            category_id: ann.label.coco_id(),
            segmentation,
            bbox: bbox.to_array(),
            area: mask.count() as f64,
            iscrowd: 0,
        });
    }
    Ok(CocoDataset {
        images,
        annotations: out,
        categories: categories(),
    })
}

/// Reads annotations back; image ids become the COCO file names.
pub fn import_coco(doc: &CocoDataset) -> Result<Vec<MaskAnnotation>> {
    let names: HashMap<u64, &CocoImage> = doc.images.iter().map(|i| (i.id, i)).collect();
    let mut out = Vec::new();
    for a in &doc.annotations {
        let img = names
            .get(&a.image_id)
            .ok_or_else(|| Error::invalid(format!("annotation {} refers to unknown image id {}", a.id, a.image_id)))?;
        let label = Label::from_coco_id(a.category_id)
            .ok_or_else(|| Error::invalid(format!("annotation {} has unknown category {}", a.id, a.category_id)))?;
        if let Some(polys) = a.segmentation.polygons() {
            for p in polys? {
                out.push(MaskAnnotation::polygon(img.file_name.clone(), label, p));
            }
        } else if let Some(rle) = a.segmentation.to_rle() {
            out.push(MaskAnnotation {
                image_id: img.file_name.clone(),
                label,
                geometry: Geometry::Bitmask(rle?.decode()?),
            });
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{Provenance, Split};
    use crate::mask::Mask;
    use std::path::PathBuf;

    fn record(id: &str) -> SampleRecord {
        SampleRecord {
            id: id.into(),
            label: Label::BlackScurf,
            split: Split::Unassigned,
            provenance: Provenance::Raw,
            source_id: None,
            path: PathBuf::from(format!("/data/{id}")),
            width: 20,
            height: 20,
        }
    }

    fn fixture() -> (DatasetManifest, Vec<MaskAnnotation>) {
        let m = DatasetManifest::new(vec![record("black_scurf/a.png"), record("black_scurf/b.png")]).unwrap();
        let rect = vec![(2.0, 3.0), (6.0, 3.0), (6.0, 8.0), (2.0, 8.0)];
        let anns = vec![
            MaskAnnotation::polygon("black_scurf/a.png", Label::BlackScurf, rect),
            MaskAnnotation::polygon("b.png", Label::CommonScab, vec![(1.0, 1.0), (9.0, 2.0), (4.0, 7.0)]),
            MaskAnnotation {
                image_id: "black_scurf/b.png".into(),
                label: Label::BlackScurf,
                geometry: Geometry::Bitmask(Mask::from_fn(20, 20, |y, x| (10..13).contains(&y) && (4..9).contains(&x))),
            },
        ];
        (m, anns)
    }

    #[test]
    fn export_counts_ids_and_boxes() {
        let (m, anns) = fixture();
        let doc = export_coco(&m, &anns).unwrap();
        assert_eq!(doc.images.len(), 2);
        assert_eq!(doc.annotations.len(), 3);
        assert_eq!(doc.annotations.iter().map(|a| a.id).collect::<Vec<_>>(), vec![1, 2, 3]);
        assert_eq!(doc.annotations[0].bbox, [2.0, 3.0, 4.0, 5.0]);
        assert_eq!(doc.annotations[0].area, 20.0);
        assert_eq!(doc.annotations[1].image_id, 2);
        assert_eq!(doc.annotations[2].bbox, [4.0, 10.0, 5.0, 3.0]);
        assert_eq!(doc.annotations[2].area, 15.0);
    }

    #[test]
    fn dangling_image_is_named() {
        let (m, _) = fixture();
        let bad = vec![MaskAnnotation::polygon("nope.png", Label::BlackScurf, vec![(0.0, 0.0), (3.0, 0.0), (0.0, 3.0)])];
        let err = export_coco(&m, &bad).unwrap_err();
        assert!(err.to_string().contains("nope.png"));
    }

    #[test]
    fn json_round_trip_preserves_geometry_and_labels() {
        let (m, anns) = fixture();
        let doc = export_coco(&m, &anns).unwrap();
        let text = serde_json::to_string(&doc).unwrap();
        let back: CocoDataset = serde_json::from_str(&text).unwrap();
        assert_eq!(back, doc);
        let imported = import_coco(&back).unwrap();
        assert_eq!(imported.len(), 3);
        for (a, b) in anns.iter().zip(&imported) {
            assert_eq!(a.label, b.label);
            assert_eq!(a.geometry, b.geometry);
        }
    }
}
