//! Disease classifiers and their evaluation.

pub mod bench;
pub mod metrics;
pub mod model;

pub use bench::{benchmark, BenchmarkEntry};
pub use metrics::{
    accuracy, argmax, class_precision_recall, confusion, f1_score, log_loss, precision_recall_f1, Averaging,
    ClassMetrics, ClassificationReport, ConfusionMatrix,
};
pub use model::{ClassifierAdapter, ClfExample, ClfTrainConfig, CnnTrace, LinearSoftmax, TinyCnn, TinyCnnSpec, TrainSummary};

/// Paper backbones, trained here as small stand-in networks.
pub const BACKBONES: [&str; 3] = ["densenet169", "resnet152v2", "inception_resnet_v2"];
