use std::fmt;
use std::path::PathBuf;
use std::str::FromStr;

use image::RgbImage;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Tuber condition.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Label {
    Healthy,
    BlackScurf,
    CommonScab,
}

impl Label {
    pub const ALL: [Label; 3] = [Label::Healthy, Label::BlackScurf, Label::CommonScab];
    pub const DISEASES: [Label; 2] = [Label::BlackScurf, Label::CommonScab];

    pub fn as_str(self) -> &'static str {
        match self {
            Label::Healthy => "healthy",
            Label::BlackScurf => "black_scurf",
            Label::CommonScab => "common_scab",
        }
    }

    pub fn display_name(self) -> &'static str {
        match self {
            Label::Healthy => "Healthy",
            Label::BlackScurf => "Black Scurf",
            Label::CommonScab => "Common Scab",
        }
    }

    pub fn is_diseased(self) -> bool {
        self != Label::Healthy
    }

    /// Category id used in COCO documents.
    pub fn coco_id(self) -> u64 {
        match self {
            Label::BlackScurf => 1,
            Label::CommonScab => 2,
            Label::Healthy => 3,
        }
    }

    pub fn from_coco_id(id: u64) -> Option<Label> {
        Label::ALL.into_iter().find(|l| l.coco_id() == id)
    }
}

impl fmt::Display for Label {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Label {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let norm: String = s
            .trim()
            .to_ascii_lowercase()
            .chars()
            .map(|c| if c == '-' || c == ' ' { '_' } else { c })
            .collect();
        match norm.as_str() {
            "healthy" => Ok(Label::Healthy),
            "black_scurf" | "blackscurf" => Ok(Label::BlackScurf),
            "common_scab" | "commonscab" => Ok(Label::CommonScab),
            _ => Err(Error::invalid(format!(
                "unknown label `{s}` (expected healthy, black_scurf or common_scab)"
            ))),
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Test,
    #[default]
    Unassigned,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    Raw,
    Preprocessed,
    Augmented,
    Generated,
}

/// A decoded image with its label and lineage.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageSample {
    pub id: String,
    pub pixels: RgbImage,
    pub label: Label,
    pub split: Split,
    pub provenance: Provenance,
    pub source_id: Option<String>,
}

impl ImageSample {
    pub fn raw(id: impl Into<String>, pixels: RgbImage, label: Label) -> Self {
        ImageSample {
            id: id.into(),
            pixels,
            label,
            split: Split::Unassigned,
            provenance: Provenance::Raw,
            source_id: None,
        }
    }

    /// A sample derived from `self` with new pixels.
    pub fn derive(&self, id: impl Into<String>, pixels: RgbImage, provenance: Provenance) -> Self {
        ImageSample {
            id: id.into(),
            pixels,
            label: self.label,
            split: self.split,
            provenance,
            source_id: Some(self.id.clone()),
        }
    }

    pub fn width(&self) -> u32 {
        self.pixels.width()
    }

    pub fn height(&self) -> u32 {
        self.pixels.height()
    }

    pub fn record(&self, path: impl Into<PathBuf>) -> SampleRecord {
        SampleRecord {
            id: self.id.clone(),
            label: self.label,
            split: self.split,
            provenance: self.provenance,
            source_id: self.source_id.clone(),
            path: path.into(),
            width: self.width(),
            height: self.height(),
        }
    }
}

/// Persisted metadata for one sample; pixels live at `path`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleRecord {
    pub id: String,
    pub label: Label,
    pub split: Split,
    pub provenance: Provenance,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub source_id: Option<String>,
    pub path: PathBuf,
    pub width: u32,
    pub height: u32,
}

impl SampleRecord {
    pub fn file_name(&self) -> Option<&str> {
        self.path.file_name().and_then(|n| n.to_str())
    }
}

/// Anything with an id and a label.
pub trait Labeled {
    fn id(&self) -> &str;
    fn label(&self) -> Label;
}

impl Labeled for ImageSample {
    fn id(&self) -> &str {
        &self.id
    }
    fn label(&self) -> Label {
        self.label
    }
}

impl Labeled for SampleRecord {
    fn id(&self) -> &str {
        &self.id
    }
    fn label(&self) -> Label {
        self.label
    }
}

/// Healthy input bound to a diseased target for paired training.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImagePair {
    pub input: String,
    pub target: String,
    pub disease: Label,
}
