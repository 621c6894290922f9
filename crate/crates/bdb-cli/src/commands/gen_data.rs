//! `bdb gen-data`: synthesize a dataset and write it as a manifest file.

use std::path::PathBuf;

use bdb_core::data::{save_manifest, DatasetSplit, Record};

use crate::config::RunConfig;
use crate::CliResult;

#[derive(Debug, clap::Args)]
pub struct Args {
    /// Manifest file to write.
    #[arg(long)]
    pub out: PathBuf,
    /// TOML config file; flags below override it.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Base preset: "desk" or "paper".
    #[arg(long)]
    pub preset: Option<String>,
    /// RNG seed for the generator.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Distinct train identities.
    #[arg(long)]
    pub train_ids: Option<usize>,
    /// Distinct test identities (split between query and gallery roles).
    #[arg(long)]
    pub test_ids: Option<usize>,
    /// Images per identity.
    #[arg(long)]
    pub images_per_id: Option<usize>,
    /// Camera count; re-ID evaluation needs at least 2.
    #[arg(long)]
    pub cameras: Option<usize>,
}

pub fn run(args: &Args) -> CliResult<()> {
    let mut cfg = RunConfig::load(args.preset.as_deref(), args.config.as_deref())?;
    if let Some(s) = args.seed {
        cfg.run.seed = s;
    }
    if let Some(n) = args.train_ids {
        cfg.data.num_train_ids = n;
    }
    if let Some(n) = args.test_ids {
        cfg.data.num_test_ids = n;
    }
    if let Some(n) = args.images_per_id {
        cfg.data.images_per_id = n;
    }
    if let Some(n) = args.cameras {
        cfg.data.cameras = n;
    }

    let split = bdb_core::data::gen_synthetic(&cfg.synthetic_config())?;
    if let Some(dir) = args.out.parent() {
        if !dir.as_os_str().is_empty() {
            std::fs::create_dir_all(dir)?;
        }
    }
    save_manifest(&split, &args.out)?;
    print!("{}", stats_table(&split));
    println!("wrote {}", args.out.display());
    Ok(())
}

fn count_ids_cams(records: &[Record]) -> (usize, usize) {
    use std::collections::BTreeSet;
    let ids: BTreeSet<usize> = records.iter().map(|r| r.identity).collect();
    let cams: BTreeSet<usize> = records.iter().map(|r| r.camera).collect();
    (ids.len(), cams.len())
}

/// Per-split statistics in the shape of a dataset summary table.
pub fn stats_table(split: &DatasetSplit) -> String {
    let mut out = String::from("split    identities  images  cameras\n");
    for (name, records) in [
        ("train", &split.train),
        ("query", &split.query),
        ("gallery", &split.gallery),
    ] {
        let (ids, cams) = count_ids_cams(records);
        out.push_str(&format!(
            "{:<8} {:>10}  {:>6}  {:>7}\n",
            name,
            ids,
            records.len(),
            cams
        ));
    }
    out
}
