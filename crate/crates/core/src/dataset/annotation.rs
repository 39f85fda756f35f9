//! Region annotations and the VGG Image Annotator import.

use log::warn;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use super::sample::Label;
use crate::error::{Error, Result};
use crate::mask::{self, BBox, Mask};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Geometry {
    /// Pixel-coordinate vertices `(x, y)` in drawing order.
    Polygon(Vec<(f64, f64)>),
    Bitmask(Mask),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MaskAnnotation {
    pub image_id: String,
    pub label: Label,
    pub geometry: Geometry,
}

impl MaskAnnotation {
    pub fn polygon(image_id: impl Into<String>, label: Label, poly: Vec<(f64, f64)>) -> Self {
        MaskAnnotation {
            image_id: image_id.into(),
            label,
            geometry: Geometry::Polygon(poly),
        }
    }

    /// Tight box of the geometry: the vertex extent for polygons, the set
    /// pixels for bitmasks.
    pub fn bbox(&self) -> Option<BBox> {
        match &self.geometry {
            Geometry::Polygon(p) if !p.is_empty() => {
                let (mut x0, mut y0) = (f64::INFINITY, f64::INFINITY);
                let (mut x1, mut y1) = (f64::NEG_INFINITY, f64::NEG_INFINITY);
                for &(x, y) in p {
                    x0 = x0.min(x);
                    y0 = y0.min(y);
                    x1 = x1.max(x);
                    y1 = y1.max(y);
                }
                Some(BBox::new(x0, y0, x1 - x0, y1 - y0))
            }
            Geometry::Polygon(_) => None,
            Geometry::Bitmask(m) => m.tight_bbox(),
        }
    }

    /// Checks vertex count and bounds against an image of `height x width`.
    pub fn validate(&self, height: usize, width: usize) -> Result<()> {
        match &self.geometry {
            Geometry::Polygon(p) => {
                if p.len() < 3 {
                    return Err(Error::invalid(format!(
                        "polygon on `{}` has {} vertices; at least 3 are required",
                        self.image_id,
                        p.len()
                    )));
                }
                if let Some(&(x, y)) = p
                    .iter()
                    .find(|(x, y)| !(x.is_finite() && y.is_finite() && *x >= 0.0 && *y >= 0.0 && *x <= width as f64 && *y <= height as f64))
                {
                    return Err(Error::invalid(format!(
                        "vertex ({x}, {y}) on `{}` lies outside the {width}x{height} image",
                        self.image_id
                    )));
                }
                Ok(())
            }
            Geometry::Bitmask(m) => {
                if m.height() != height || m.width() != width {
                    return Err(Error::shape(format!(
                        "bitmask on `{}` is {}x{}, image is {height}x{width}",
                        self.image_id,
                        m.height(),
                        m.width()
                    )));
                }
                Ok(())
            }
        }
    }
}

/// Rasterises an annotation with the pixel-centre even-odd rule.
pub fn rasterize(ann: &MaskAnnotation, size: (usize, usize)) -> Result<Mask> {
    let (h, w) = size;
    ann.validate(h, w)?;
    let m = match &ann.geometry {
        Geometry::Polygon(p) => {
            if mask::polygon_area(p).abs() < 1e-12 {
                return Err(Error::invalid(format!("zero-area polygon on `{}`", ann.image_id)));
            }
            mask::fill_polygon(h, w, p)
        }
        Geometry::Bitmask(m) => m.clone(),
    };
    if m.is_empty() {
        return Err(Error::invalid(format!(
            "annotation on `{}` covers no pixel centres",
            ann.image_id
        )));
    }
    Ok(m)
}

/// Result of a VGG import: good regions plus per-region diagnostics.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct VggImport {
    pub annotations: Vec<MaskAnnotation>,
    pub warnings: Vec<String>,
    pub errors: Vec<String>,
}

fn class_of(attrs: Option<&Value>) -> Option<&str> {
    let attrs = attrs?.as_object()?;
    ["class", "label", "name"]
        .iter()
        .find_map(|k| attrs.get(*k))
        .and_then(|v| match v {
            Value::String(s) => Some(s.as_str()),
            // Dropdown attributes export as {"option": true}.
            Value::Object(o) => o.iter().find(|(_, v)| v.as_bool() == Some(true)).map(|(k, _)| k.as_str()),
            _ => None,
        })
}

fn points(shape: &Value, key: &str) -> Option<Vec<f64>> {
    shape.get(key)?.as_array()?.iter().map(Value::as_f64).collect()
}

/// Parses a VGG Image Annotator project export. Image ids are the exported
/// file names.
pub fn import_vgg_annotations(doc: &Value) -> Result<VggImport> {
    let entries = doc
        .get("_via_img_metadata")
        .unwrap_or(doc)
        .as_object()
        .ok_or_else(|| Error::invalid("VGG export must be a JSON object"))?;
    let mut out = VggImport::default();
    for (key, entry) in entries {
        let Some(filename) = entry.get("filename").and_then(Value::as_str) else {
            // Project files carry settings alongside image metadata.
            if entry.get("regions").is_some() {
                out.errors.push(format!("entry `{key}` has regions but no filename"));
            }
            continue;
        };
        let regions: Vec<&Value> = match entry.get("regions") {
            Some(Value::Array(a)) => a.iter().collect(),
            Some(Value::Object(o)) => o.values().collect(),
            _ => Vec::new(),
        };
        for (ri, region) in regions.into_iter().enumerate() {
            let shape = region.get("shape_attributes").unwrap_or(&Value::Null);
            let kind = shape.get("name").and_then(Value::as_str).unwrap_or("");
            if kind != "polygon" && kind != "polyline" {
                let msg = format!("{filename} region {ri}: skipping non-polygon shape `{kind}`");
                warn!("{msg}");
                out.warnings.push(msg);
                continue;
            }
            let label = match class_of(region.get("region_attributes")) {
                Some(c) => match c.parse::<Label>() {
                    Ok(l) => l,
                    Err(e) => {
                        out.errors.push(format!("{filename} region {ri}: {e}"));
                        continue;
                    }
                },
                None => {
                    out.errors.push(format!("{filename} region {ri}: missing class attribute"));
                    continue;
                }
            };
            let (Some(xs), Some(ys)) = (points(shape, "all_points_x"), points(shape, "all_points_y")) else {
                out.errors.push(format!("{filename} region {ri}: malformed vertex lists"));
                continue;
            };
            if xs.len() != ys.len() {
                out.errors.push(format!("{filename} region {ri}: vertex lists differ in length"));
                continue;
            }
            if xs.len() < 3 {
                out.errors.push(format!(
                    "{filename} region {ri}: polygon has {} vertices; at least 3 are required",
                    xs.len()
                ));
                continue;
            }
            out.annotations.push(MaskAnnotation::polygon(
                filename,
                label,
                xs.into_iter().zip(ys).collect(),
            ));
        }
    }
    Ok(out)
}

/// Builds a VGG project export from polygon annotations; the inverse of
/// [`import_vgg_annotations`] up to region order.
pub fn to_vgg_json(anns: &[MaskAnnotation]) -> Value {
    let mut map = serde_json::Map::new();
    for a in anns {
        let Geometry::Polygon(p) = &a.geometry else { continue };
        let entry = map.entry(a.image_id.clone()).or_insert_with(|| {
            serde_json::json!({ "filename": a.image_id, "size": -1, "regions": [], "file_attributes": {} })
        });
        let region = serde_json::json!({
            "shape_attributes": {
                "name": "polygon",
                "all_points_x": p.iter().map(|v| v.0).collect::<Vec<_>>(),
                "all_points_y": p.iter().map(|v| v.1).collect::<Vec<_>>(),
            },
            "region_attributes": { "class": a.label.as_str() }
        });
        entry["regions"].as_array_mut().expect("regions array").push(region);
    }
    serde_json::json!({ "_via_img_metadata": map })
}
