//! Train-then-evaluate loop over several adapters.

use serde::{Deserialize, Serialize};

use super::metrics::{Averaging, ClassificationReport};
use super::model::{ClassifierAdapter, ClfExample, ClfTrainConfig, TrainSummary};
use crate::error::Result;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkEntry {
    pub adapter: String,
    /// `None` when the adapter failed; see `error`.
    pub report: Option<ClassificationReport>,
    pub training: Option<TrainSummary>,
    pub error: Option<String>,
}

impl BenchmarkEntry {
    pub fn succeeded(&self) -> bool {
        self.report.is_some()
    }
}

fn run_one(
    adapter: &mut dyn ClassifierAdapter,
    train: &[ClfExample],
    test: &[ClfExample],
    classes: &[String],
    cfg: &ClfTrainConfig,
    averaging: Averaging,
) -> Result<(ClassificationReport, TrainSummary)> {
    let summary = adapter.train(train, classes.len(), cfg)?;
    let images: Vec<_> = test.iter().map(|e| e.image.clone()).collect();
    let labels: Vec<usize> = test.iter().map(|e| e.class).collect();
    let probs = adapter.predict_proba(&images)?;
    Ok((ClassificationReport::evaluate(adapter.name(), &probs, &labels, classes, averaging)?, summary))
}

/// Reports come back in adapter order. A failing adapter yields an entry
/// carrying its error and does not stop the others.
pub fn benchmark(
    adapters: &mut [Box<dyn ClassifierAdapter>],
    train: &[ClfExample],
    test: &[ClfExample],
    classes: &[String],
    cfg: &ClfTrainConfig,
    averaging: Averaging,
) -> Vec<BenchmarkEntry> {
    adapters
        .iter_mut()
        .map(|a| {
            let name = a.name().to_string();
            match run_one(a.as_mut(), train, test, classes, cfg, averaging) {
                Ok((report, training)) => BenchmarkEntry { adapter: name, report: Some(report), training: Some(training), error: None },
                Err(e) => {
                    log::warn!("classifier `{name}` failed: {e}");
                    BenchmarkEntry { adapter: name, report: None, training: None, error: Some(e.to_string()) }
                }
            }
        })
        .collect()
}
