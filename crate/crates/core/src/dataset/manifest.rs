use std::collections::{BTreeMap, HashSet};
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::sample::{ImageSample, Label, SampleRecord, Split};
use crate::error::{Error, Result};
use crate::imaging;

pub const MANIFEST_SCHEMA_VERSION: u32 = 1;

/// How labels are encoded on disk.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Layout {
    /// `root/<label>/<file>.{png,jpg}`
    #[default]
    LabelDirectories,
}

/// A file that could not be ingested.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FileError {
    pub path: PathBuf,
    pub message: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub schema_version: u32,
    pub samples: Vec<SampleRecord>,
    pub class_counts: BTreeMap<Label, usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub split_seed: Option<u64>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub errors: Vec<FileError>,
}

impl DatasetManifest {
    pub fn new(samples: Vec<SampleRecord>) -> Result<Self> {
        let mut m = DatasetManifest {
            schema_version: MANIFEST_SCHEMA_VERSION,
            samples,
            class_counts: BTreeMap::new(),
            split_seed: None,
            errors: Vec::new(),
        };
        m.check_unique_ids()?;
        m.recount();
        Ok(m)
    }

    pub fn recount(&mut self) {
        self.class_counts.clear();
        for s in &self.samples {
            *self.class_counts.entry(s.label).or_default() += 1;
        }
    }

    pub fn check_unique_ids(&self) -> Result<()> {
        let mut seen = HashSet::new();
        for s in &self.samples {
            if !seen.insert(s.id.as_str()) {
                return Err(Error::invalid(format!("duplicate sample id `{}`", s.id)));
            }
        }
        Ok(())
    }

    pub fn get(&self, id: &str) -> Option<&SampleRecord> {
        self.samples.iter().find(|s| s.id == id)
    }

    pub fn by_label(&self, label: Label) -> impl Iterator<Item = &SampleRecord> {
        self.samples.iter().filter(move |s| s.label == label)
    }

    pub fn by_split(&self, split: Split) -> impl Iterator<Item = &SampleRecord> {
        self.samples.iter().filter(move |s| s.split == split)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let json = serde_json::to_vec_pretty(self)?;
        imaging::write_atomic(path, &json)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        let m: DatasetManifest = serde_json::from_slice(&bytes)?;
        if m.schema_version != MANIFEST_SCHEMA_VERSION {
            return Err(Error::invalid(format!(
                "manifest schema version {} is not supported (expected {})",
                m.schema_version, MANIFEST_SCHEMA_VERSION
            )));
        }
        m.check_unique_ids()?;
        Ok(m)
    }
}

fn is_image_file(path: &Path) -> bool {
    path.extension()
        .and_then(|e| e.to_str())
        .map(|e| matches!(e.to_ascii_lowercase().as_str(), "png" | "jpg" | "jpeg"))
        .unwrap_or(false)
}

fn sorted_entries(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut entries: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .collect();
    entries.sort();
    Ok(entries)
}

/// Scans `root` and returns one record per decodable image, plus an error
/// entry for each file that could not be used.
pub fn load_manifest(root: &Path, layout: Layout) -> Result<DatasetManifest> {
    let Layout::LabelDirectories = layout;
    if !root.is_dir() {
        return Err(Error::io(
            root,
            std::io::Error::new(std::io::ErrorKind::NotFound, "dataset root is not a directory"),
        ));
    }
    let mut records = Vec::new();
    let mut errors = Vec::new();
    for dir in sorted_entries(root)? {
        if !dir.is_dir() {
            continue;
        }
        let name = dir.file_name().and_then(|n| n.to_str()).unwrap_or_default();
        let label: Label = match name.parse() {
            Ok(l) => l,
            Err(e) => {
                errors.push(FileError {
                    path: dir.clone(),
                    message: e.to_string(),
                });
                continue;
            }
        };
        for file in sorted_entries(&dir)? {
            if !file.is_file() || !is_image_file(&file) {
                continue;
            }
            match read_rgb_checked(&file) {
                Ok(img) => {
                    let file_name = file.file_name().and_then(|n| n.to_str()).unwrap_or_default();
                    let sample = ImageSample::raw(format!("{}/{}", label, file_name), img, label);
                    records.push(sample.record(file.clone()));
                }
                Err(e) => errors.push(FileError {
                    path: file.clone(),
                    message: e.to_string(),
                }),
            }
        }
    }
    if records.is_empty() {
        return Err(Error::NoImages(root.to_path_buf()));
    }
    let mut manifest = DatasetManifest::new(records)?;
    manifest.errors = errors;
    Ok(manifest)
}

fn read_rgb_checked(path: &Path) -> Result<image::RgbImage> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let img = image::load_from_memory(&bytes)?;
    if img.color().channel_count() < 3 {
        return Err(Error::invalid(format!(
            "{} is not a 3-channel image",
            path.display()
        )));
    }
    Ok(img.to_rgb8())
}

/// Decodes the pixels behind a record.
pub fn load_sample(record: &SampleRecord) -> Result<ImageSample> {
    let pixels = imaging::load_rgb(&record.path)?;
    Ok(ImageSample {
        id: record.id.clone(),
        pixels,
        label: record.label,
        split: record.split,
        provenance: record.provenance,
        source_id: record.source_id.clone(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use image::RgbImage;

    fn write_png(path: &Path, w: u32, h: u32) {
        fs::create_dir_all(path.parent().unwrap()).unwrap();
        RgbImage::from_pixel(w, h, image::Rgb([10, 20, 30])).save(path).unwrap();
    }

    #[test]
    fn five_healthy_pngs_give_five_samples() {
        let dir = tempfile::tempdir().unwrap();
        for i in 0..5 {
            write_png(&dir.path().join(format!("healthy/h{i}.png")), 8, 6);
        }
        let m = load_manifest(dir.path(), Layout::LabelDirectories).unwrap();
        assert_eq!(m.samples.len(), 5);
        assert!(m.samples.iter().all(|s| s.label == Label::Healthy && s.split == Split::Unassigned));
        assert_eq!(m.class_counts[&Label::Healthy], 5);
    }

    #[test]
    fn class_counts_follow_directories() {
        let dir = tempfile::tempdir().unwrap();
        for i in 0..93 {
            write_png(&dir.path().join(format!("black_scurf/b{i:03}.png")), 2, 2);
        }
        for i in 0..126 {
            write_png(&dir.path().join(format!("common_scab/c{i:03}.png")), 2, 2);
        }
        let m = load_manifest(dir.path(), Layout::LabelDirectories).unwrap();
        assert_eq!(m.class_counts[&Label::BlackScurf], 93);
        assert_eq!(m.class_counts[&Label::CommonScab], 126);
        assert!(!m.class_counts.contains_key(&Label::Healthy));
    }

    #[test]
    fn empty_directory_is_an_error() {
        let dir = tempfile::tempdir().unwrap();
        let err = load_manifest(dir.path(), Layout::LabelDirectories).unwrap_err();
        assert!(err.to_string().contains("no images found"), "{err}");
    }

    #[test]
    fn unreadable_file_is_recorded_not_fatal() {
        let dir = tempfile::tempdir().unwrap();
        write_png(&dir.path().join("healthy/ok.png"), 4, 4);
        fs::write(dir.path().join("healthy/broken.png"), b"not a png").unwrap();
        let gray = image::GrayImage::from_pixel(4, 4, image::Luma([9]));
        gray.save(dir.path().join("healthy/gray.png")).unwrap();
        let m = load_manifest(dir.path(), Layout::LabelDirectories).unwrap();
        assert_eq!(m.samples.len(), 1);
        assert_eq!(m.errors.len(), 2);
    }

    #[test]
    fn manifest_json_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        write_png(&dir.path().join("healthy/a.png"), 4, 4);
        let m = load_manifest(dir.path(), Layout::LabelDirectories).unwrap();
        let p = dir.path().join("manifest.json");
        m.save(&p).unwrap();
        assert_eq!(DatasetManifest::load(&p).unwrap(), m);
    }
}
