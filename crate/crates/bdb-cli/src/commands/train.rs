//! `bdb train`: run the training loop and write checkpoint, history CSV, and
//! final metrics JSON into the output directory.

use std::path::PathBuf;

use bdb_core::checkpoint::Checkpoint;
use bdb_core::data::DatasetSplit;
use bdb_core::eval::{extract_embeddings, reid_metrics, MetricsReport};
use bdb_core::masks::DropKind;
use bdb_core::train::{history_to_csv, train_loop, EpochStats};
use bdb_core::Model;

use crate::config::{parse_drop_kind, parse_pool_kind, RunConfig};
use crate::commands::{load_split, train_class_count, EXTRACT_BATCH};
use crate::{CliError, CliResult};

#[derive(Debug, clap::Args)]
pub struct Args {
    /// TOML config file; flags below override it.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Base preset: "desk" or "paper".
    #[arg(long)]
    pub preset: Option<String>,
    /// Dataset manifest; omitted means synthesize from the config.
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Directory for checkpoint.json, history.csv, metrics.json.
    #[arg(long)]
    pub out_dir: Option<PathBuf>,
    /// Training seed (also the data seed when synthesizing).
    #[arg(long)]
    pub seed: Option<u64>,
    /// Total epochs; warm-up and decay epochs stay as configured.
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Erasing variant: batch_drop_block, drop_block, dropout,
    /// spatial_dropout, batch_dropout, or none. "none" also disables the
    /// dropping branch, giving the global-branch baseline.
    #[arg(long)]
    pub drop: Option<String>,
    /// Erased height ratio for block variants.
    #[arg(long)]
    pub rh: Option<f64>,
    /// Erased width ratio for block variants.
    #[arg(long)]
    pub rw: Option<f64>,
    /// Drop probability for the dropout-family variants.
    #[arg(long)]
    pub p: Option<f64>,
    /// Dropping-branch pooling: gmp or gap.
    #[arg(long)]
    pub pool: Option<String>,
    /// Enable or disable the triplet terms (--triplet=false for softmax-only).
    #[arg(long)]
    pub triplet: Option<bool>,
    /// Enable or disable the softmax terms.
    #[arg(long)]
    pub softmax: Option<bool>,
    /// Evaluate every N epochs (0 = only implicit final metrics).
    #[arg(long)]
    pub eval_every: Option<usize>,
}

pub fn apply_overrides(cfg: &mut RunConfig, args: &Args) -> CliResult<()> {
    if let Some(s) = args.seed {
        cfg.run.seed = s;
    }
    if let Some(e) = args.epochs {
        cfg.train.total_epochs = e;
    }
    if let Some(kind) = &args.drop {
        cfg.mask.kind = parse_drop_kind(kind)?;
        if cfg.mask.kind == DropKind::None {
            cfg.model.use_drop_branch = false;
        }
    }
    if let Some(r) = args.rh {
        cfg.mask.r_h = r;
    }
    if let Some(r) = args.rw {
        cfg.mask.r_w = r;
    }
    if let Some(p) = args.p {
        cfg.mask.p = p;
    }
    if let Some(pool) = &args.pool {
        cfg.model.drop_pool = parse_pool_kind(pool)?;
    }
    if let Some(t) = args.triplet {
        cfg.loss.use_triplet = t;
    }
    if let Some(s) = args.softmax {
        cfg.loss.use_softmax = s;
    }
    if let Some(n) = args.eval_every {
        cfg.train.eval_every = n;
    }
    if let Some(dir) = &args.out_dir {
        cfg.run.out_dir = dir.to_string_lossy().into_owned();
    }
    Ok(())
}

pub struct TrainArtifacts {
    pub model: Model,
    pub history: Vec<EpochStats>,
    pub metrics: MetricsReport,
    pub checkpoint: Checkpoint,
}

/// Train on the split and evaluate the final model under the re-ID protocol.
/// Everything downstream (files, sweep rows, acceptance checks) reads from
/// the returned artifacts.
pub fn execute(cfg: &RunConfig, split: &DatasetSplit) -> CliResult<TrainArtifacts> {
    let opts = cfg.train_options(train_class_count(split))?;
    let outcome = train_loop(&opts, split)?;
    let mut model = outcome.model;
    let q = extract_embeddings(&mut model, &split.query, &split.dims, EXTRACT_BATCH)?;
    let g = extract_embeddings(&mut model, &split.gallery, &split.dims, EXTRACT_BATCH)?;
    let metrics = reid_metrics(&q, &g, 10.min(g.len()))?;
    let checkpoint = Checkpoint::capture(&model, Some(&outcome.rng));
    Ok(TrainArtifacts {
        model,
        history: outcome.history,
        metrics,
        checkpoint,
    })
}

pub fn run(args: &Args) -> CliResult<()> {
    let mut cfg = RunConfig::load(args.preset.as_deref(), args.config.as_deref())?;
    apply_overrides(&mut cfg, args)?;
    let split = load_split(&cfg, args.data.as_deref())?;
    let artifacts = execute(&cfg, &split)?;

    let out_dir = PathBuf::from(&cfg.run.out_dir);
    std::fs::create_dir_all(&out_dir)?;
    artifacts.checkpoint.save_file(out_dir.join("checkpoint.json"))?;
    std::fs::write(out_dir.join("history.csv"), history_to_csv(&artifacts.history))?;
    let metrics_json = serde_json::to_string(&artifacts.metrics)
        .map_err(|e| CliError::Runtime(format!("metrics serialization failed: {}", e)))?;
    std::fs::write(out_dir.join("metrics.json"), metrics_json + "\n")?;

    let last = artifacts
        .history
        .last()
        .ok_or_else(|| CliError::Runtime("empty training history".into()))?;
    println!(
        "trained {} epochs  loss {:.4}  rank1 {:.4}  map {:.4}",
        last.epoch, last.loss_total, artifacts.metrics.rank1, artifacts.metrics.map
    );
    println!("artifacts in {}", out_dir.display());
    Ok(())
}
