use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::checkpoint::Checkpoint;
use crate::dataset::{read_json, read_split, write_bytes, DatasetInfo, DATASET_INFO};
use crate::error::{Error, Result};
use crate::loss::{mcl_loss_grad, sequence_set_loss};
use crate::mask::BinaryMask;
use crate::model::{ImageEmbedding, LogitsMask, Model, ModelConfig, ModelParams};
use crate::optim::{AdamW, AdamWConfig};
use crate::sequence::Selector;
use crate::synth::{Sample, Split};

/// Environment variable that overrides the configured seed.
pub const SEED_ENV: &str = "SEQSEG_SEED";

const VAL_SEED_SALT: u64 = 0x7661_6c5f_7365_6c65;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    /// Single decoder unrolled through the recurrent module.
    Seqsam,
    /// Parallel heads trained winner-takes-all.
    Mcl,
}

impl Variant {
    pub fn name(self) -> &'static str {
        match self {
            Variant::Seqsam => "seqsam",
            Variant::Mcl => "mcl",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub dataset: PathBuf,
    pub variant: Variant,
    /// Masks generated per training step (heads, for the multi-head variant).
    pub m_train: usize,
    pub k: usize,
    pub bptt: bool,
    pub selector: Selector,
    pub lr: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub seed: u64,
    pub checkpoint: PathBuf,
    /// Per-epoch JSON-lines log; defaults to the checkpoint path with a
    /// `.log.jsonl` extension.
    pub log: Option<PathBuf>,
    pub model: ModelConfig,
    /// Use only the first N training samples.
    pub max_train_samples: Option<usize>,
    /// Use only the first N validation samples.
    pub max_val_samples: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            dataset: PathBuf::from("data"),
            variant: Variant::Seqsam,
            m_train: 3,
            k: 3,
            bptt: true,
            selector: Selector::Chunked,
            lr: 1e-4,
            weight_decay: 0.01,
            batch_size: 2,
            max_epochs: 200,
            patience: 10,
            seed: 0,
            checkpoint: PathBuf::from("model.ckpt"),
            log: None,
            model: ModelConfig::default(),
            max_train_samples: None,
            max_val_samples: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k == 0 || self.m_train < self.k {
            return Err(Error::invalid(format!(
                "m_train ({}) must be at least k ({}) and k positive",
                self.m_train, self.k
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::invalid("batch_size must be positive"));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) || !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(Error::invalid("lr must be positive and weight_decay non-negative"));
        }
        self.model_config().validate()
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        read_json(path)
    }

    /// Replaces the seed with `SEQSEG_SEED` when that variable is set.
    pub fn apply_env_overrides(&mut self) -> Result<()> {
        if let Ok(v) = std::env::var(SEED_ENV) {
            self.seed = v
                .trim()
                .parse()
                .map_err(|_| Error::invalid(format!("{SEED_ENV}={v:?} is not an unsigned integer")))?;
        }
        Ok(())
    }

    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            mcl_heads: match self.variant {
                Variant::Seqsam => 0,
                Variant::Mcl => self.m_train,
            },
            ..self.model.clone()
        }
    }

    pub fn log_path(&self) -> PathBuf {
        self.log
            .clone()
            .unwrap_or_else(|| self.checkpoint.with_extension("log.jsonl"))
    }

    fn metadata(&self, epoch: usize, val_loss: Option<f64>) -> serde_json::Value {
        json!({
            "variant": self.variant.name(),
            "m_train": self.m_train,
            "k": self.k,
            "selector": self.selector.name(),
            "bptt": self.bptt,
            "seed": self.seed,
            "epoch": epoch,
            "val_loss": val_loss,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub best: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TrainSummary {
    pub history: Vec<EpochLog>,
    /// 0 when no epoch improved on the initialization (or none ran).
    pub best_epoch: usize,
    pub best_val_loss: Option<f64>,
    pub stopped_early: bool,
    pub checkpoint: PathBuf,
    pub log: PathBuf,
    #[serde(skip)]
    pub wall_clock_secs: f64,
}

impl TrainSummary {
    pub fn first_val_loss(&self) -> Option<f64> {
        self.history.first().map(|e| e.val_loss)
    }

    pub fn last_val_loss(&self) -> Option<f64> {
        self.history.last().map(|e| e.val_loss)
    }
}

/// A sample prepared for training: cached embedding (frozen encoder only)
/// and labels at embedding resolution.
struct Prepared<'a> {
    sample: &'a Sample,
    embedding: Option<ImageEmbedding>,
    labels: Vec<BinaryMask>,
}

fn prepare<'a>(model: &Model, samples: &'a [Sample]) -> Result<Vec<Prepared<'a>>> {
    let factor = model.config.downsample();
    samples
        .iter()
        .map(|s| {
            let labels = s
                .labels
                .iter()
                .map(|l| l.downsample_area(factor))
                .collect::<Result<_>>()?;
            let embedding = if model.config.frozen_encoder {
                Some(model.encode(&s.image)?)
            } else {
                None
            };
            Ok(Prepared {
                sample: s,
                embedding,
                labels,
            })
        })
        .collect()
}

/// Loss and parameter gradient for one sample.
fn all_finite(logits: &[LogitsMask]) -> bool {
    logits.iter().all(|l| l.0.iter().all(|v| v.is_finite()))
}

fn sample_step<R: Rng + ?Sized>(
    model: &Model,
    cfg: &TrainConfig,
    p: &Prepared,
    rng: &mut R,
    need_grad: bool,
) -> Result<(f64, Option<ModelParams>)> {
    let s = p.sample;
    match cfg.variant {
        Variant::Seqsam => {
            let selected = cfg.selector.select_indices(cfg.m_train, cfg.k, rng)?;
            // steps after the last selected mask cannot affect the loss
            let steps = selected.iter().max().map_or(cfg.m_train, |&i| i + 1);
            let trace = match &p.embedding {
                Some(e) => model.forward(e, &s.bbox, steps, cfg.bptt)?,
                None => model.forward_image(&s.image, &s.bbox, steps, cfg.bptt)?,
            };
            if !all_finite(&trace.logits) {
                return Ok((f64::NAN, None));
            }
            let out = sequence_set_loss(&trace.logits, &selected, &p.labels, None)?;
            let grads = if need_grad && out.loss.is_finite() {
                Some(model.backward(&trace, &out.grad_logits)?.params)
            } else {
                None
            };
            Ok((out.loss, grads))
        }
        Variant::Mcl => {
            let trace = match &p.embedding {
                Some(e) => model.mcl_forward_embedded(e, None, &s.bbox)?,
                None => model.mcl_forward_image(&s.image, &s.bbox)?,
            };
            if !all_finite(&trace.logits) {
                return Ok((f64::NAN, None));
            }
            let (loss, g) = mcl_loss_grad(&trace.logits, &p.labels)?;
            let grads = if need_grad && loss.is_finite() {
                Some(model.mcl_backward(&trace, &g)?)
            } else {
                None
            };
            Ok((loss, grads))
        }
    }
}

fn validation_loss(model: &Model, cfg: &TrainConfig, val: &[Prepared]) -> Result<f64> {
    if val.is_empty() {
        return Err(Error::invalid("validation split is empty"));
    }
    // fixed selection stream so epochs are comparable
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ VAL_SEED_SALT);
    let mut total = 0.0;
    for p in val {
        total += sample_step(model, cfg, p, &mut rng, false)?.0;
    }
    Ok(total / val.len() as f64)
}

fn limit(samples: Vec<Sample>, n: Option<usize>) -> Vec<Sample> {
    match n {
        Some(n) => samples.into_iter().take(n).collect(),
        None => samples,
    }
}

/// Reads the train and validation splits named by `cfg.dataset` and trains.
pub fn train(cfg: &TrainConfig) -> Result<TrainSummary> {
    cfg.validate()?;
    let info: DatasetInfo = read_json(&cfg.dataset.join(DATASET_INFO))?;
    if info.config.k != cfg.k {
        return Err(Error::invalid(format!(
            "config k = {} but the dataset has {} labels per sample",
            cfg.k, info.config.k
        )));
    }
    let train = limit(read_split(&cfg.dataset, Split::Train)?, cfg.max_train_samples);
    let val = limit(read_split(&cfg.dataset, Split::Val)?, cfg.max_val_samples);
    train_on(cfg, &train, &val)
}

/// Trains on in-memory samples, writing the best-validation checkpoint and
/// the epoch log.
pub fn train_on(cfg: &TrainConfig, train: &[Sample], val: &[Sample]) -> Result<TrainSummary> {
    cfg.validate()?;
    let start = Instant::now();
    if train.is_empty() {
        return Err(Error::invalid("training split is empty"));
    }
    for s in train.iter().chain(val) {
        if s.k() != cfg.k {
            return Err(Error::invalid(format!("{}: {} labels, expected {}", s.sample_id, s.k(), cfg.k)));
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut model = Model::new(cfg.model_config(), &mut rng)?;
    let log_path = cfg.log_path();
    let mut summary = TrainSummary {
        history: Vec::new(),
        best_epoch: 0,
        best_val_loss: None,
        stopped_early: false,
        checkpoint: cfg.checkpoint.clone(),
        log: log_path.clone(),
        wall_clock_secs: 0.0,
    };
    Checkpoint::from_model(&model, cfg.metadata(0, None)).save(&cfg.checkpoint)?;
    let mut log = String::new();
    write_bytes(&log_path, log.as_bytes())?;
    if cfg.max_epochs == 0 {
        summary.wall_clock_secs = start.elapsed().as_secs_f64();
        return Ok(summary);
    }

    let train_set = prepare(&model, train)?;
    let val_set = prepare(&model, val)?;
    let mut opt = AdamW::new(
        AdamWConfig {
            lr: cfg.lr,
            weight_decay: cfg.weight_decay,
            ..AdamWConfig::default()
        },
        &model.params,
        model.config.frozen_encoder,
    );
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut since_best = 0usize;
    let mut step = 0usize;
    for epoch in 1..=cfg.max_epochs {
        // embeddings are cached only while the encoder is frozen
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            step += 1;
            let mut grads = model.params.zeros_like();
            let mut batch_loss = 0.0;
            for &i in batch {
                let (loss, g) = sample_step(&model, cfg, &train_set[i], &mut rng, true)?;
                if !loss.is_finite() {
                    return Err(Error::Divergence { epoch, step });
                }
                batch_loss += loss;
                grads.add_scaled(&g.expect("finite loss has a gradient"), 1.0);
            }
            grads.scale(1.0 / batch.len() as f64);
            if !grads.is_finite() {
                return Err(Error::Divergence { epoch, step });
            }
            opt.step(&mut model.params, &grads);
            if !model.params.is_finite() {
                return Err(Error::Divergence { epoch, step });
            }
            epoch_loss += batch_loss;
        }
        let train_loss = epoch_loss / train_set.len() as f64;
        let val_loss = validation_loss(&model, cfg, &val_set)?;
        if !val_loss.is_finite() {
            return Err(Error::Divergence { epoch, step });
        }
        let best = summary.best_val_loss.is_none_or(|b| val_loss < b);
        if best {
            summary.best_val_loss = Some(val_loss);
            summary.best_epoch = epoch;
            since_best = 0;
            Checkpoint::from_model(&model, cfg.metadata(epoch, Some(val_loss))).save(&cfg.checkpoint)?;
        } else {
            since_best += 1;
        }
        let entry = EpochLog {
            epoch,
            train_loss,
            val_loss,
            best,
        };
        log.push_str(&serde_json::to_string(&entry).expect("log entry serializes"));
        log.push('\n');
        write_bytes(&log_path, log.as_bytes())?;
        summary.history.push(entry);
        if since_best >= cfg.patience {
            summary.stopped_early = epoch < cfg.max_epochs;
            break;
        }
    }
    summary.wall_clock_secs = start.elapsed().as_secs_f64();
    Ok(summary)
}
