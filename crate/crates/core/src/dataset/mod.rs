//! Ingest, preprocessing, augmentation, splitting, pairing and annotation
//! conversion for the tuber image corpus.

pub mod annotation;
pub mod augment;
pub mod coco;
pub mod manifest;
pub mod pairing;
pub mod preprocess;
pub mod sample;
pub mod split;
pub mod synth;

pub use annotation::{import_vgg_annotations, rasterize, Geometry, MaskAnnotation, VggImport};
pub use augment::{augment, AugmentOp};
pub use coco::{export_coco, import_coco, CocoAnnotation, CocoCategory, CocoDataset, CocoImage, RleCounts, Segmentation};
pub use manifest::{load_manifest, load_sample, DatasetManifest, FileError, Layout};
pub use pairing::pair_images;
pub use preprocess::{preprocess, PreprocessConfig};
pub use sample::{ImagePair, ImageSample, Label, Labeled, Provenance, SampleRecord, Split};
pub use split::split_dataset;
