//! `bdb export-activation`: dump per-sample spatial energy grids of a trained
//! model's feature maps, plus an entropy summary. High entropy means the
//! activation energy is spread over the grid instead of concentrated.

use std::fmt::Write as _;
use std::path::PathBuf;

use bdb_core::checkpoint::Checkpoint;
use bdb_core::data::{load_manifest, records_to_tensor, Record};
use bdb_core::model::spatial_energy_map;

use crate::commands::EXTRACT_BATCH;
use crate::{CliError, CliResult};

#[derive(Debug, clap::Args)]
pub struct Args {
    /// Trained model to inspect.
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Dataset manifest matching the checkpoint's input dimensions.
    #[arg(long)]
    pub data: PathBuf,
    /// Which records to map: train, query, gallery, or test (query+gallery).
    #[arg(long, default_value = "query")]
    pub split: String,
    /// Map to export: "drop" (input of the dropping branch; backbone output
    /// when the branch is disabled) or "backbone".
    #[arg(long, default_value = "drop")]
    pub stage: String,
    /// Directory for <sample_id>.csv grids and entropy.csv.
    #[arg(long)]
    pub out_dir: PathBuf,
}

pub fn run(args: &Args) -> CliResult<()> {
    let ck = Checkpoint::load_file(&args.checkpoint)?;
    let (model, _) = ck.restore()?;
    let split = load_manifest(&args.data)?;
    split.validate()?;

    let records: Vec<&Record> = match args.split.as_str() {
        "train" => split.train.iter().collect(),
        "query" => split.query.iter().collect(),
        "gallery" => split.gallery.iter().collect(),
        "test" => split.query.iter().chain(split.gallery.iter()).collect(),
        other => {
            return Err(CliError::Config(format!(
                "unknown split '{}', expected train, query, gallery, or test",
                other
            )))
        }
    };
    if records.is_empty() {
        return Err(CliError::Config(format!("split '{}' is empty", args.split)));
    }

    std::fs::create_dir_all(&args.out_dir)?;
    let mut summary = String::from("sample_id,entropy\n");
    let mut entropy_sum = 0.0;
    for chunk in records.chunks(EXTRACT_BATCH) {
        let x = records_to_tensor(chunk, &split.dims)?;
        let map = match args.stage.as_str() {
            "drop" => model.drop_branch_map(&x)?,
            "backbone" => model.feature_map(&x)?,
            other => {
                return Err(CliError::Config(format!(
                    "unknown stage '{}', expected drop or backbone",
                    other
                )))
            }
        };
        let energy = spatial_energy_map(&map)?;
        for (bi, record) in chunk.iter().enumerate() {
            let mut grid = String::new();
            for r in 0..energy.h {
                let row: Vec<String> = (0..energy.w)
                    .map(|c| energy.energy[(bi * energy.h + r) * energy.w + c].to_string())
                    .collect();
                writeln!(grid, "{}", row.join(",")).expect("string write");
            }
            std::fs::write(args.out_dir.join(format!("{}.csv", record.sample_id)), grid)?;
            writeln!(summary, "{},{}", record.sample_id, energy.entropy[bi])
                .expect("string write");
            entropy_sum += energy.entropy[bi];
        }
    }
    std::fs::write(args.out_dir.join("entropy.csv"), summary)?;
    println!(
        "exported {} grids to {}  mean entropy {}",
        records.len(),
        args.out_dir.display(),
        entropy_sum / records.len() as f64
    );
    Ok(())
}
