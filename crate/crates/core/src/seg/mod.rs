//! Instance segmentation evaluation and the boundary to the external engine.

pub mod ap;
pub mod baseline;
pub mod engine;
pub mod instance;
pub mod matching;
pub mod overlap;
pub mod predictions;
pub mod visual;

pub use ap::{
    ap_from_ranked, ap_summary, average_precision, coco_thresholds, dataset_dice, evaluate, per_class_ap,
    ApInterpolation, ApSummary, SegEvalReport, DICE_AGGREGATION,
};
pub use baseline::ColorThresholdSegmenter;
pub use engine::{emit_engine_config, Backbone, EngineArtifacts, SegEngineConfig};
pub use instance::{InstanceRecord, IouKind};
pub use matching::{iou, match_instances, score_order, MatchResult};
pub use overlap::{bbox_iou, dice, mask_iou};
pub use predictions::{
    export_predictions, ground_truth, import_predictions, import_predictions_file, CocoResult, PredictionImport,
};
pub use visual::visualize;
