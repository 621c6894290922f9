//! Subcommand implementations. Each module owns its clap argument struct and
//! a `run` entry point; the heavy lifting stays in `bdb-core`.

pub mod ablate;
pub mod eval;
pub mod export_activation;
pub mod gen_data;
pub mod train;

use std::path::Path;

use bdb_core::data::{gen_synthetic, load_manifest, DatasetSplit};

use crate::config::RunConfig;
use crate::CliResult;

/// Batch width for embedding extraction; batching is a throughput knob only,
/// eval-mode outputs are independent of it.
pub const EXTRACT_BATCH: usize = 32;

/// Data source shared by train/eval/ablate: a manifest on disk wins,
/// otherwise the split is synthesized from the config (seeded, so reruns see
/// identical data).
pub fn load_split(cfg: &RunConfig, manifest: Option<&Path>) -> CliResult<DatasetSplit> {
    let split = match manifest {
        Some(path) => load_manifest(path)?,
        None => gen_synthetic(&cfg.synthetic_config())?,
    };
    split.validate()?;
    Ok(split)
}

/// Identity count of the train split, needed to size the classifier heads.
pub fn train_class_count(split: &DatasetSplit) -> usize {
    use std::collections::BTreeSet;
    split
        .train
        .iter()
        .map(|r| r.identity)
        .collect::<BTreeSet<_>>()
        .len()
}
