use serde::{Deserialize, Serialize};

use crate::dataset::Label;
use crate::error::{Error, Result};
use crate::mask::{BBox, Mask};

/// One ground-truth or predicted object instance.
#[derive(Clone, Debug, PartialEq)]
pub struct InstanceRecord {
    pub image_id: String,
    pub label: Label,
    pub bbox: BBox,
    pub mask: Mask,
    /// 1.0 for ground truth.
    pub score: f64,
}

impl InstanceRecord {
    /// Derives the tight box from a non-empty mask.
    pub fn new(image_id: impl Into<String>, label: Label, mask: Mask, score: f64) -> Result<Self> {
        let bbox = mask.tight_bbox().ok_or_else(|| Error::invalid("instance mask is empty"))?;
        if !(0.0..=1.0).contains(&score) {
            return Err(Error::invalid(format!("score {score} outside [0, 1]")));
        }
        Ok(Self { image_id: image_id.into(), label, bbox, mask, score })
    }

    pub fn ground_truth(image_id: impl Into<String>, label: Label, mask: Mask) -> Result<Self> {
        Self::new(image_id, label, mask, 1.0)
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum IouKind {
    #[default]
    Mask,
    Bbox,
}

impl IouKind {
    pub fn as_str(self) -> &'static str {
        match self {
            IouKind::Mask => "segm",
            IouKind::Bbox => "bbox",
        }
    }
}
