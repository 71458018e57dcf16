//! Training, evaluation, significance testing, ablations and qualitative
//! panels, all driven by JSON configs.

mod ablate;
mod evaluate;
mod panels;
mod train;

pub use ablate::{ablate, AblationRow, AblationTable, AblationVariant};
pub use evaluate::{compare, evaluate, evaluate_model, Comparison, EvalReport, Metric};
pub use panels::{render_panel, render_panels};
pub use train::{train, train_on, EpochLog, TrainConfig, TrainSummary, Variant, SEED_ENV};

use crate::error::Result;
use crate::mask::{binarize, upsample_nearest, BinaryMask, ProbMask, DEFAULT_THRESHOLD};
use crate::model::{BBoxPrompt, LogitsMask, Model};
use ndarray::Array2;

/// `m` binarized masks at input resolution. Multi-head models return their
/// first `m` heads.
pub fn predict_masks(model: &Model, image: &Array2<f64>, bbox: &BBoxPrompt, m: usize) -> Result<Vec<BinaryMask>> {
    let logits = if model.config.mcl_heads > 0 {
        model.mcl_forward(image, bbox, m)?
    } else {
        model.unroll(image, bbox, m)?
    };
    logits_to_masks(&logits, model.config.downsample())
}

/// Nearest-neighbour upsampling of embedding-resolution logits followed by
/// thresholding the probabilities at 0.5.
pub fn logits_to_masks(logits: &[LogitsMask], factor: usize) -> Result<Vec<BinaryMask>> {
    logits
        .iter()
        .map(|z| binarize(&ProbMask::from_logits(&upsample_nearest(&z.0, factor))?, DEFAULT_THRESHOLD))
        .collect()
}
