use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::dataset::{dataset_checksum, read_bytes, read_json, read_split, sha256_hex, write_bytes, write_json};
use crate::error::{Error, Result};
use crate::metrics::{dice_avg, ged, wilcoxon_signed_rank, EvalScores};
use crate::model::Model;
use crate::synth::{Sample, Split};

use super::predict_masks;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub variant: String,
    pub m_inference: usize,
    pub seed: Option<u64>,
    pub split: Split,
    pub checkpoint_sha256: String,
    pub dataset_checksum: String,
    /// Per-sample CSV file, relative to the report's directory.
    pub csv_path: Option<String>,
    pub scores: EvalScores,
    /// Kept out of the report file so reports stay reproducible; written
    /// to a `.timing.json` sidecar instead.
    #[serde(skip)]
    pub wall_clock_secs: f64,
}

impl EvalReport {
    /// Writes the JSON report, the per-sample CSV next to it and the timing
    /// sidecar.
    pub fn write(&mut self, path: &Path) -> Result<()> {
        let csv = path.with_extension("csv");
        let csv_name = csv
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .ok_or_else(|| Error::invalid(format!("{} has no file name", path.display())))?;
        write_bytes(&csv, self.scores.to_csv().as_bytes())?;
        self.csv_path = Some(csv_name);
        write_json(path, self)?;
        write_json(
            &path.with_extension("timing.json"),
            &serde_json::json!({ "wall_clock_secs": self.wall_clock_secs }),
        )
    }

    pub fn load(path: &Path) -> Result<Self> {
        read_json(path)
    }
}

/// Scores `m` generated masks per sample. Samples are split across threads;
/// results are reassembled in input order.
pub fn evaluate_model(model: &Model, samples: &[Sample], m: usize) -> Result<EvalScores> {
    if m == 0 {
        return Err(Error::invalid("M_inference must be at least 1"));
    }
    let score = |s: &Sample| -> Result<(f64, f64)> {
        let preds = predict_masks(model, &s.image, &s.bbox, m)?;
        Ok((ged(&preds, &s.labels)?, dice_avg(&preds, &s.labels)?))
    };
    let threads = std::thread::available_parallelism().map_or(1, |n| n.get()).min(samples.len().max(1));
    let results: Vec<Result<(f64, f64)>> = if threads <= 1 {
        samples.iter().map(score).collect()
    } else {
        let chunk = samples.len().div_ceil(threads);
        std::thread::scope(|scope| {
            let handles: Vec<_> = samples
                .chunks(chunk)
                .map(|part| scope.spawn(move || part.iter().map(score).collect::<Vec<_>>()))
                .collect();
            handles
                .into_iter()
                .flat_map(|h| h.join().expect("evaluation thread panicked"))
                .collect()
        })
    };
    let mut geds = Vec::with_capacity(samples.len());
    let mut dices = Vec::with_capacity(samples.len());
    for r in results {
        let (g, d) = r?;
        geds.push(g);
        dices.push(d);
    }
    EvalScores::from_samples(samples.iter().map(|s| s.sample_id.clone()).collect(), geds, dices)
}

/// Loads a checkpoint and scores one split of a dataset directory.
pub fn evaluate(checkpoint: &Path, data: &Path, split: Split, m: usize) -> Result<EvalReport> {
    let start = Instant::now();
    let bytes = read_bytes(checkpoint)?;
    let ckpt = Checkpoint::from_bytes(&bytes, checkpoint)?;
    let samples = read_split(data, split)?;
    if let Some(s) = samples.first() {
        if s.image.dim() != (ckpt.config.image_size, ckpt.config.image_size) {
            return Err(Error::format(
                checkpoint,
                format!(
                    "model expects {n}x{n} images, dataset has {:?}",
                    s.image.dim(),
                    n = ckpt.config.image_size
                ),
            ));
        }
    }
    let variant = ckpt.metadata["variant"]
        .as_str()
        .unwrap_or(if ckpt.config.mcl_heads > 0 { "mcl" } else { "seqsam" })
        .to_string();
    let seed = ckpt.metadata["seed"].as_u64();
    let model = ckpt.into_model();
    let scores = evaluate_model(&model, &samples, m)?;
    Ok(EvalReport {
        variant,
        m_inference: m,
        seed,
        split,
        checkpoint_sha256: sha256_hex(&bytes),
        dataset_checksum: dataset_checksum(data)?,
        csv_path: None,
        scores,
        wall_clock_secs: start.elapsed().as_secs_f64(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    Ged,
    DiceAvg,
}

impl Metric {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "ged" => Ok(Metric::Ged),
            "dice_avg" | "dice" => Ok(Metric::DiceAvg),
            other => Err(Error::invalid(format!("unknown metric {other:?}; expected ged or dice_avg"))),
        }
    }

    fn scores<'a>(&self, s: &'a EvalScores) -> &'a [f64] {
        match self {
            Metric::Ged => &s.per_sample_ged,
            Metric::DiceAvg => &s.per_sample_dice_avg,
        }
    }

    fn mean(&self, s: &EvalScores) -> f64 {
        match self {
            Metric::Ged => s.mean_ged,
            Metric::DiceAvg => s.mean_dice_avg,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub metric: Metric,
    pub p_value: f64,
    pub statistic: f64,
    pub n: usize,
    pub exact: bool,
    pub mean_a: f64,
    pub mean_b: f64,
    /// `"a"`, `"b"`, or `"tie"` when the means are equal.
    pub better: String,
}

/// Paired Wilcoxon signed-rank comparison of two reports on one metric.
pub fn compare(a: &EvalReport, b: &EvalReport, metric: Metric) -> Result<Comparison> {
    if a.scores.sample_ids != b.scores.sample_ids {
        return Err(Error::invalid("reports do not cover the same samples in the same order"));
    }
    let w = wilcoxon_signed_rank(metric.scores(&a.scores), metric.scores(&b.scores))?;
    let (mean_a, mean_b) = (metric.mean(&a.scores), metric.mean(&b.scores));
    let a_wins = match metric {
        Metric::Ged => mean_a < mean_b,
        Metric::DiceAvg => mean_a > mean_b,
    };
    let better = if mean_a == mean_b {
        "tie"
    } else if a_wins {
        "a"
    } else {
        "b"
    };
    Ok(Comparison {
        metric,
        p_value: w.p_value,
        statistic: w.statistic,
        n: w.n,
        exact: w.exact,
        mean_a,
        mean_b,
        better: better.into(),
    })
}
