//! Sequential multi-hypothesis mask generation.
//!
//! A promptable segmentation backbone is unrolled through a recurrent
//! module that feeds each predicted logits mask back in as the next prompt,
//! producing an arbitrary-length sequence of plausible masks. Training
//! matches the generated set against an unordered set of annotator labels
//! with a Hungarian assignment; evaluation uses the generalised energy
//! distance and majority-vote dice.

pub mod checkpoint;
pub mod dataset;
pub mod error;
pub mod harness;
pub mod loss;
pub mod mask;
pub mod matching;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod optim;
pub mod sequence;
pub mod synth;

pub use error::{Error, Result};
pub use mask::{BinaryMask, ProbMask};
pub use matching::{Assignment, CostMatrix};
pub use metrics::{EvalScores, WilcoxonResult};
pub use sequence::{ChunkPartition, Selector};
pub use model::{BBoxPrompt, Model, ModelConfig};
pub use synth::{Dataset, DatasetConfig, Sample, Split};
pub use checkpoint::Checkpoint;
pub use harness::{EvalReport, TrainConfig, Variant};
