//! `bdb eval`: score a checkpoint (or pre-extracted embeddings) under the
//! re-ID protocol or the Recall@K retrieval protocol.

use std::path::{Path, PathBuf};

use bdb_core::checkpoint::Checkpoint;
use bdb_core::data::load_manifest;
use bdb_core::eval::{
    extract_embeddings, load_embeddings_file, recall_at_k, reid_metrics, save_embeddings_file,
    EmbeddingRecord,
};

use crate::commands::EXTRACT_BATCH;
use crate::{CliError, CliResult};

#[derive(Debug, clap::Args)]
pub struct Args {
    /// Checkpoint to evaluate; requires --data.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Dataset manifest matching the checkpoint's input dimensions.
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Pre-extracted embeddings for the retrieval protocol (one pooled set).
    #[arg(long)]
    pub embeddings: Option<PathBuf>,
    /// Pre-extracted query embeddings for the re-ID protocol.
    #[arg(long)]
    pub query_embeddings: Option<PathBuf>,
    /// Pre-extracted gallery embeddings for the re-ID protocol.
    #[arg(long)]
    pub gallery_embeddings: Option<PathBuf>,
    /// "reid" (CMC/mAP with camera exclusion) or "retrieval" (Recall@K over
    /// the pooled test set with self-exclusion).
    #[arg(long, default_value = "reid")]
    pub protocol: String,
    /// Ks for Recall@K, comma separated.
    #[arg(long, value_delimiter = ',', default_value = "1,2,4,8")]
    pub ks: Vec<usize>,
    /// CMC curve length for the re-ID protocol.
    #[arg(long, default_value_t = 10)]
    pub max_rank: usize,
    /// Write extracted embeddings next to the metrics: <prefix>.query /
    /// <prefix>.gallery for re-ID, <prefix>.pool for retrieval.
    #[arg(long)]
    pub save_embeddings: Option<PathBuf>,
    /// Metrics JSON path; omitted means stdout only.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

fn checkpoint_embeddings(
    checkpoint: &Path,
    data: &Path,
) -> CliResult<(Vec<EmbeddingRecord>, Vec<EmbeddingRecord>)> {
    let ck = Checkpoint::load_file(checkpoint)?;
    let (mut model, _) = ck.restore()?;
    let split = load_manifest(data)?;
    split.validate()?;
    let q = extract_embeddings(&mut model, &split.query, &split.dims, EXTRACT_BATCH)?;
    let g = extract_embeddings(&mut model, &split.gallery, &split.dims, EXTRACT_BATCH)?;
    Ok((q, g))
}

fn require_both(checkpoint: &Option<PathBuf>, data: &Option<PathBuf>) -> CliResult<()> {
    if checkpoint.is_some() != data.is_some() {
        return Err(CliError::Config(
            "--checkpoint and --data must be given together".into(),
        ));
    }
    Ok(())
}

fn with_suffix(prefix: &Path, suffix: &str) -> PathBuf {
    let mut name = prefix.as_os_str().to_owned();
    name.push(".");
    name.push(suffix);
    PathBuf::from(name)
}

pub fn run(args: &Args) -> CliResult<()> {
    require_both(&args.checkpoint, &args.data)?;
    let report = match args.protocol.as_str() {
        "reid" => {
            let (q, g) = match (&args.checkpoint, &args.query_embeddings, &args.gallery_embeddings)
            {
                (Some(ck), None, None) => {
                    checkpoint_embeddings(ck, args.data.as_deref().expect("paired above"))?
                }
                (None, Some(qf), Some(gf)) => {
                    (load_embeddings_file(qf)?, load_embeddings_file(gf)?)
                }
                _ => {
                    return Err(CliError::Config(
                        "re-ID protocol needs either --checkpoint with --data, or both \
                         --query-embeddings and --gallery-embeddings"
                            .into(),
                    ))
                }
            };
            if let Some(prefix) = &args.save_embeddings {
                save_embeddings_file(with_suffix(prefix, "query"), &q)?;
                save_embeddings_file(with_suffix(prefix, "gallery"), &g)?;
            }
            let metrics = reid_metrics(&q, &g, args.max_rank.min(g.len()))?;
            serde_json::json!({
                "protocol": "reid",
                "rank1": metrics.rank1,
                "map": metrics.map,
                "cmc": metrics.cmc,
                "num_queries": metrics.num_queries,
                "skipped_queries": metrics.skipped_queries,
                "max_rank": metrics.max_rank,
            })
        }
        "retrieval" => {
            let pool = match (&args.checkpoint, &args.embeddings) {
                (Some(ck), None) => {
                    // The retrieval protocol scores the pooled test set.
                    let (q, g) =
                        checkpoint_embeddings(ck, args.data.as_deref().expect("paired above"))?;
                    let mut pool = q;
                    pool.extend(g);
                    pool
                }
                (None, Some(f)) => load_embeddings_file(f)?,
                _ => {
                    return Err(CliError::Config(
                        "retrieval protocol needs either --checkpoint with --data, or --embeddings"
                            .into(),
                    ))
                }
            };
            if let Some(prefix) = &args.save_embeddings {
                save_embeddings_file(with_suffix(prefix, "pool"), &pool)?;
            }
            let metrics = recall_at_k(&pool, &args.ks)?;
            let recall: serde_json::Map<String, serde_json::Value> = metrics
                .recall_at
                .iter()
                .map(|(k, v)| (k.to_string(), serde_json::json!(v)))
                .collect();
            serde_json::json!({
                "protocol": "retrieval",
                "recall_at": recall,
                "num_points": pool.len(),
            })
        }
        other => {
            return Err(CliError::Config(format!(
                "unknown protocol '{}', expected 'reid' or 'retrieval'",
                other
            )))
        }
    };

    let text = serde_json::to_string(&report)
        .map_err(|e| CliError::Runtime(format!("metrics serialization failed: {}", e)))?;
    println!("{}", text);
    if let Some(path) = &args.out {
        if let Some(dir) = path.parent() {
            if !dir.as_os_str().is_empty() {
                std::fs::create_dir_all(dir)?;
            }
        }
        std::fs::write(path, text + "\n")?;
    }
    Ok(())
}
