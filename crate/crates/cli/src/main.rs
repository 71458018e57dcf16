use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand};
use serde_json::json;

use seqseg_core::dataset::{read_json, write_dataset, DatasetInfo, DATASET_INFO};
use seqseg_core::harness::{self, AblationVariant, EvalReport, Metric, TrainConfig, SEED_ENV};
use seqseg_core::synth::{generate_dataset, DatasetConfig, Split};
use seqseg_core::{Checkpoint, Error};

#[derive(Parser)]
#[command(name = "seqseg", version, about = "Sequential multi-mask segmentation toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic multi-annotator dataset.
    GenData {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a model from a JSON config.
    Train {
        #[arg(long)]
        config: PathBuf,
    },
    /// Evaluate a checkpoint. Without --num-masks, evaluates at M = K and M = 10.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = "test")]
        split: String,
        #[arg(long)]
        num_masks: Option<usize>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Paired Wilcoxon signed-rank comparison of two reports.
    Compare {
        #[arg(long)]
        a: PathBuf,
        #[arg(long)]
        b: PathBuf,
        #[arg(long, default_value = "ged")]
        metric: String,
    },
    /// Train and evaluate the four ablation variants.
    Ablate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Masks per sample at evaluation; defaults to M_train.
        #[arg(long)]
        num_masks: Option<usize>,
    },
    /// Render input | labels | predictions panels.
    Panels {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value = "test")]
        split: String,
        /// Predicted masks per panel; defaults to the checkpoint's M_train.
        #[arg(long)]
        num_masks: Option<usize>,
        #[arg(long)]
        limit: Option<usize>,
    },
}

fn env_seed() -> Result<Option<u64>> {
    match std::env::var(SEED_ENV) {
        Ok(v) => Ok(Some(
            v.trim()
                .parse()
                .map_err(|_| Error::InvalidArgument(format!("{SEED_ENV}={v:?} is not an unsigned integer")))?,
        )),
        Err(_) => Ok(None),
    }
}

fn print(value: serde_json::Value) {
    println!("{}", serde_json::to_string_pretty(&value).expect("json"));
}

fn gen_data(config: Option<&Path>, out: &Path) -> Result<()> {
    let mut cfg: DatasetConfig = match config {
        Some(p) => read_json(p)?,
        None => DatasetConfig::default(),
    };
    if let Some(seed) = env_seed()? {
        cfg.seed = seed;
    }
    let ds = generate_dataset(&cfg)?;
    write_dataset(&ds, out)?;
    print(json!({
        "out": out,
        "train": ds.train.len(),
        "val": ds.val.len(),
        "test": ds.test.len(),
        "checksum": seqseg_core::dataset::dataset_checksum(out)?,
    }));
    Ok(())
}

fn load_train_config(path: &Path) -> Result<TrainConfig> {
    let mut cfg = TrainConfig::from_file(path)?;
    cfg.apply_env_overrides()?;
    // relative paths in a config are relative to the config file
    let base = path.parent().unwrap_or(Path::new("."));
    for p in [&mut cfg.dataset, &mut cfg.checkpoint] {
        if p.is_relative() {
            *p = base.join(&*p);
        }
    }
    if let Some(log) = cfg.log.as_mut().filter(|l| l.is_relative()) {
        *log = base.join(&*log);
    }
    Ok(cfg)
}

fn run_train(config: &Path) -> Result<()> {
    let cfg = load_train_config(config)?;
    let summary = harness::train(&cfg)?;
    eprintln!("trained {} epochs in {:.1}s", summary.history.len(), summary.wall_clock_secs);
    print(serde_json::to_value(&summary)?);
    Ok(())
}

fn run_eval(checkpoint: &Path, data: &Path, split: &str, num_masks: Option<usize>, out: &Path) -> Result<()> {
    let split = Split::parse(split)?;
    let targets: Vec<(usize, PathBuf)> = match num_masks {
        Some(m) => vec![(m, out.to_path_buf())],
        None => {
            let info: DatasetInfo = read_json(&data.join(DATASET_INFO))?;
            let heads = Checkpoint::load(checkpoint)?.config.mcl_heads;
            let stem = out.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| "report".into());
            let mut ms = vec![info.config.k];
            if info.config.k != 10 {
                ms.push(10);
            }
            ms.into_iter()
                .filter(|&m| {
                    let ok = heads == 0 || m <= heads;
                    if !ok {
                        eprintln!("skipping M = {m}: checkpoint has {heads} heads");
                    }
                    ok
                })
                .map(|m| (m, out.with_file_name(format!("{stem}_m{m}.json"))))
                .collect()
        }
    };
    let mut written = Vec::new();
    for (m, path) in targets {
        let mut report = harness::evaluate(checkpoint, data, split, m)?;
        report.write(&path)?;
        written.push(json!({
            "report": path,
            "m_inference": m,
            "mean_ged": report.scores.mean_ged,
            "mean_dice_avg": report.scores.mean_dice_avg,
            "num_samples": report.scores.num_samples,
        }));
    }
    print(json!(written));
    Ok(())
}

fn run_compare(a: &Path, b: &Path, metric: &str) -> Result<()> {
    let metric = Metric::parse(metric)?;
    let ra = EvalReport::load(a)?;
    let rb = EvalReport::load(b)?;
    let c = harness::compare(&ra, &rb, metric)?;
    let better = match c.better.as_str() {
        "a" => json!(a),
        "b" => json!(b),
        _ => json!(null),
    };
    let mut value = serde_json::to_value(&c)?;
    value["better_report"] = better;
    print(value);
    Ok(())
}

fn run_ablate(config: &Path, out: &Path, num_masks: Option<usize>) -> Result<()> {
    let cfg = load_train_config(config)?;
    let table = harness::ablate(&cfg, out, &AblationVariant::ALL, num_masks)?;
    eprint!("{}", table.to_text());
    print(serde_json::to_value(&table)?);
    Ok(())
}

fn run_panels(
    checkpoint: &Path,
    data: &Path,
    out: &Path,
    split: &str,
    num_masks: Option<usize>,
    limit: Option<usize>,
) -> Result<()> {
    let split = Split::parse(split)?;
    let m = match num_masks {
        Some(m) => m,
        None => {
            let ckpt = Checkpoint::load(checkpoint)?;
            ckpt.metadata["m_train"]
                .as_u64()
                .map(|m| m as usize)
                .context("checkpoint metadata has no m_train; pass --num-masks")?
        }
    };
    let files = harness::render_panels(checkpoint, data, split, m, out, limit)?;
    print(json!({ "panels": files.len(), "out": out, "num_masks": m }));
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData { config, out } => gen_data(config.as_deref(), &out),
        Command::Train { config } => run_train(&config),
        Command::Eval {
            checkpoint,
            data,
            split,
            num_masks,
            out,
        } => run_eval(&checkpoint, &data, &split, num_masks, &out),
        Command::Compare { a, b, metric } => run_compare(&a, &b, &metric),
        Command::Ablate { config, out, num_masks } => run_ablate(&config, &out, num_masks),
        Command::Panels {
            checkpoint,
            data,
            out,
            split,
            num_masks,
            limit,
        } => run_panels(&checkpoint, &data, &out, &split, num_masks, limit),
    }
}

/// One JSON object on one line: `{"error":"<kind>","message":"..."}`.
fn error_line(err: &anyhow::Error) -> String {
    let kind = err.downcast_ref::<Error>().map_or("other", Error::kind);
    let message = format!("{err:#}").replace('\n', " ");
    json!({ "error": kind, "message": message }).to_string()
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("{}", error_line(&err));
            ExitCode::FAILURE
        }
    }
}
