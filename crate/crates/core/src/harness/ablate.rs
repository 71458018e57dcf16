use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::dataset::{dataset_checksum, read_split, write_bytes, write_json};
use crate::error::{Error, Result};
use crate::sequence::Selector;
use crate::synth::Split;

use super::evaluate::evaluate;
use super::train::{train, TrainConfig, Variant};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AblationVariant {
    /// Chunked selection with the full logits chain.
    Full,
    /// K masks sampled from the whole sequence.
    RandomK,
    /// Only the first K masks.
    FirstK,
    /// Chunked selection, gradients only through the hidden state.
    NoBptt,
}

impl AblationVariant {
    pub const ALL: [AblationVariant; 4] = [
        AblationVariant::Full,
        AblationVariant::RandomK,
        AblationVariant::FirstK,
        AblationVariant::NoBptt,
    ];

    pub fn name(self) -> &'static str {
        match self {
            AblationVariant::Full => "full",
            AblationVariant::RandomK => "random_k",
            AblationVariant::FirstK => "first_k",
            AblationVariant::NoBptt => "no_bptt",
        }
    }

    /// The base config with this variant's selector and BPTT flag, writing
    /// to `<dir>/<name>.ckpt`.
    pub fn configure(self, base: &TrainConfig, dir: &Path) -> TrainConfig {
        let (selector, bptt) = match self {
            AblationVariant::Full => (Selector::Chunked, true),
            AblationVariant::RandomK => (Selector::RandomK, true),
            AblationVariant::FirstK => (Selector::FirstK, true),
            AblationVariant::NoBptt => (Selector::Chunked, false),
        };
        TrainConfig {
            variant: Variant::Seqsam,
            selector,
            bptt,
            checkpoint: dir.join(format!("{}.ckpt", self.name())),
            log: None,
            ..base.clone()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub variant: AblationVariant,
    pub selector: Selector,
    pub bptt: bool,
    pub best_epoch: usize,
    pub dice_avg: f64,
    pub ged: f64,
    pub dataset_checksum: String,
    pub m_inference: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub seed: u64,
    pub m_train: usize,
    pub k: usize,
    pub m_inference: usize,
    pub dataset_checksum: String,
    pub rows: Vec<AblationRow>,
}

impl AblationTable {
    pub fn row(&self, v: AblationVariant) -> Option<&AblationRow> {
        self.rows.iter().find(|r| r.variant == v)
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(
            out,
            "ablation  seed={}  M_train={}  K={}  M_eval={}  dataset={}",
            self.seed,
            self.m_train,
            self.k,
            self.m_inference,
            &self.dataset_checksum[..12.min(self.dataset_checksum.len())]
        );
        let _ = writeln!(out, "{:<10} {:>10} {:>10}", "variant", "dice_avg", "ged");
        for r in &self.rows {
            let _ = writeln!(out, "{:<10} {:>10.4} {:>10.4}", r.variant.name(), r.dice_avg, r.ged);
        }
        out
    }
}

/// Trains and evaluates `variants` with a shared seed and dataset, writing
/// checkpoints, `ablation.json` and `ablation.txt` into `out_dir`.
/// `m_inference` defaults to `M_train`.
pub fn ablate(
    base: &TrainConfig,
    out_dir: &Path,
    variants: &[AblationVariant],
    m_inference: Option<usize>,
) -> Result<AblationTable> {
    base.validate()?;
    if base.m_train <= base.k {
        return Err(Error::invalid(format!(
            "ablations need M_train > K (got M_train = {}, K = {})",
            base.m_train, base.k
        )));
    }
    let m = m_inference.unwrap_or(base.m_train);
    let checksum = dataset_checksum(&base.dataset)?;
    // fail early on an unreadable test split
    read_split(&base.dataset, Split::Test)?;
    let mut rows = Vec::with_capacity(variants.len());
    for &v in variants {
        let cfg = v.configure(base, out_dir);
        let summary = train(&cfg)?;
        let report = evaluate(&cfg.checkpoint, &base.dataset, Split::Test, m)?;
        rows.push(AblationRow {
            variant: v,
            selector: cfg.selector,
            bptt: cfg.bptt,
            best_epoch: summary.best_epoch,
            dice_avg: report.scores.mean_dice_avg,
            ged: report.scores.mean_ged,
            dataset_checksum: report.dataset_checksum,
            m_inference: report.m_inference,
        });
    }
    let table = AblationTable {
        seed: base.seed,
        m_train: base.m_train,
        k: base.k,
        m_inference: m,
        dataset_checksum: checksum,
        rows,
    };
    write_json(&out_dir.join("ablation.json"), &table)?;
    write_bytes(&out_dir.join("ablation.txt"), table.to_text().as_bytes())?;
    Ok(table)
}
