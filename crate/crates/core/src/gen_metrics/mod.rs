//! FID and Inception Score for generated image sets.

pub mod extract;
pub mod frechet;
pub mod inception;

use image::RgbImage;
use serde::{Deserialize, Serialize};

pub use extract::{color_stats, ColorStatsExtractor, FeatureExtractor, RandomProjectionExtractor};
pub use frechet::{fid, fit_gaussian, matrix_sqrt_psd, trace_sqrt_product, FeatureStats};
pub use inception::{inception_score, ClassProbMatrix};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GenerationScores {
    pub fid: f64,
    pub is_mean: f64,
    pub is_std: f64,
    pub n_real: usize,
    pub n_gen: usize,
    pub extractor: String,
}

/// One row of the generation quality table.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GenerationReport {
    pub model: String,
    pub disease_class: String,
    #[serde(flatten)]
    pub scores: GenerationScores,
}

/// FID of `gen` against `real` and IS of `gen`, both through `extractor`.
pub fn score_generation(
    real: &[RgbImage],
    gen: &[RgbImage],
    extractor: &dyn FeatureExtractor,
    splits: usize,
) -> Result<GenerationScores> {
    if real.len() < 2 || gen.len() < 2 {
        return Err(Error::invalid(format!(
            "need at least 2 real and 2 generated images, got {} and {}",
            real.len(),
            gen.len()
        )));
    }
    let fr = fit_gaussian(&extractor.embed(real)?)?;
    let fg = fit_gaussian(&extractor.embed(gen)?)?;
    let (is_mean, is_std) = inception_score(&extractor.classify(gen)?, splits)?;
    Ok(GenerationScores {
        fid: fid(&fr, &fg)?,
        is_mean,
        is_std,
        n_real: real.len(),
        n_gen: gen.len(),
        extractor: extractor.name(),
    })
}
