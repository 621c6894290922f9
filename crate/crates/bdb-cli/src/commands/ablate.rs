//! `bdb ablate`: train a named family of configurations over several seeds
//! and report mean +/- std Rank-1 and mAP per configuration.
//!
//! Sweeps:
//!   branches  global-only baseline vs. dropping-branch slice vs. both
//!   variants  the five erasing kinds under the same two-branch model
//!   ratio     erased height ratio r_h over --values
//!   pooling   GMP vs. GAP on the dropping branch
//!
//! Runs are paired: seed index i uses the same synthesized split and the
//! same training seed across every configuration, so row differences come
//! from the configuration alone. Independent runs execute on a rayon pool
//! capped by the BDB_THREADS env var.

use std::path::PathBuf;

use rayon::prelude::*;

use bdb_core::data::DatasetSplit;
use bdb_core::eval::{reid_metrics, EmbeddingRecord};
use bdb_core::masks::DropKind;
use bdb_core::model::{spatial_energy_map, Model};
use bdb_core::data::records_to_tensor;

use crate::commands::train::execute;
use crate::config::RunConfig;
use crate::{CliError, CliResult};

#[derive(Debug, clap::Args)]
pub struct Args {
    /// TOML config file; the sweep varies one axis on top of it.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Base preset: "desk" or "paper".
    #[arg(long)]
    pub preset: Option<String>,
    /// Sweep name: branches, variants, ratio, or pooling.
    #[arg(long)]
    pub sweep: String,
    /// Ratio values for --sweep ratio, comma separated.
    #[arg(long, value_delimiter = ',')]
    pub values: Option<Vec<f64>>,
    /// Seeds per configuration (seed i = config seed + i).
    #[arg(long, default_value_t = 3)]
    pub seeds: u64,
    /// Shorter runs for smoke tests; overrides the configured epoch count.
    #[arg(long)]
    pub epochs: Option<usize>,
    /// CSV output path; omitted means stdout only.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Clone, Debug)]
pub struct SweepRow {
    pub label: String,
    /// Per-seed values, in seed order.
    pub rank1: Vec<f64>,
    pub map: Vec<f64>,
    /// Mean test-set spatial entropy per seed (branches sweep only).
    pub entropy: Vec<f64>,
}

impl SweepRow {
    fn new(label: &str) -> Self {
        Self {
            label: label.to_string(),
            rank1: Vec::new(),
            map: Vec::new(),
            entropy: Vec::new(),
        }
    }

    pub fn rank1_mean(&self) -> f64 {
        mean(&self.rank1)
    }

    pub fn map_mean(&self) -> f64 {
        mean(&self.map)
    }

    pub fn entropy_mean(&self) -> f64 {
        mean(&self.entropy)
    }
}

pub struct SweepReport {
    pub sweep: String,
    pub seeds: u64,
    pub rows: Vec<SweepRow>,
}

fn mean(v: &[f64]) -> f64 {
    if v.is_empty() {
        return 0.0;
    }
    v.iter().sum::<f64>() / v.len() as f64
}

/// Population standard deviation; sweeps describe exactly the seeds they ran.
fn std_dev(v: &[f64]) -> f64 {
    if v.is_empty() {
        return 0.0;
    }
    let m = mean(v);
    (v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / v.len() as f64).sqrt()
}

impl SweepReport {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("sweep,config,seeds,rank1_mean,rank1_std,map_mean,map_std\n");
        for row in &self.rows {
            out.push_str(&format!(
                "{},{},{},{},{},{},{}\n",
                self.sweep,
                row.label,
                self.seeds,
                mean(&row.rank1),
                std_dev(&row.rank1),
                mean(&row.map),
                std_dev(&row.map)
            ));
        }
        out
    }
}

/// What one training run contributes to the report.
struct Contribution {
    row: usize,
    rank1: f64,
    map: f64,
    entropy: Option<f64>,
}

/// One training run. `slice_row` asks for a second scoring pass over the
/// dropping-branch columns of the descriptor; `measure_entropy` attaches the
/// test-set spatial entropy of the map feeding the dropping branch (the
/// backbone map when the branch is disabled).
struct Job {
    cfg: RunConfig,
    seed_index: u64,
    row: usize,
    slice_row: Option<usize>,
    measure_entropy: bool,
}

fn slice_vectors(records: &[EmbeddingRecord], from: usize) -> Vec<EmbeddingRecord> {
    records
        .iter()
        .map(|r| EmbeddingRecord {
            sample_id: r.sample_id.clone(),
            identity: r.identity,
            camera: r.camera,
            vector: r.vector[from..].to_vec(),
        })
        .collect()
}

/// Mean spatial entropy of the dropping-branch input map over the test set.
fn test_set_entropy(model: &Model, split: &DatasetSplit) -> CliResult<f64> {
    let mut sum = 0.0;
    let mut count = 0usize;
    let test: Vec<_> = split.query.iter().chain(split.gallery.iter()).collect();
    for chunk in test.chunks(crate::commands::EXTRACT_BATCH) {
        let x = records_to_tensor(chunk, &split.dims)?;
        let map = model.drop_branch_map(&x)?;
        let energy = spatial_energy_map(&map)?;
        sum += energy.entropy.iter().sum::<f64>();
        count += energy.entropy.len();
    }
    if count == 0 {
        return Err(CliError::Runtime("empty test set".into()));
    }
    Ok(sum / count as f64)
}

fn run_job(job: &Job, split: &DatasetSplit) -> CliResult<Vec<Contribution>> {
    let artifacts = execute(&job.cfg, split)?;
    let entropy = if job.measure_entropy {
        Some(test_set_entropy(&artifacts.model, split)?)
    } else {
        None
    };
    let mut out = vec![Contribution {
        row: job.row,
        rank1: artifacts.metrics.rank1,
        map: artifacts.metrics.map,
        entropy,
    }];
    if let Some(row) = job.slice_row {
        let gd = artifacts.model.cfg.branches.global_reduce_dim;
        let mut model = artifacts.model;
        let q = bdb_core::eval::extract_embeddings(
            &mut model,
            &split.query,
            &split.dims,
            crate::commands::EXTRACT_BATCH,
        )?;
        let g = bdb_core::eval::extract_embeddings(
            &mut model,
            &split.gallery,
            &split.dims,
            crate::commands::EXTRACT_BATCH,
        )?;
        let report = reid_metrics(
            &slice_vectors(&q, gd),
            &slice_vectors(&g, gd),
            10.min(g.len()),
        )?;
        out.push(Contribution {
            row,
            rank1: report.rank1,
            map: report.map,
            entropy: None,
        });
    }
    Ok(out)
}

/// Build (labels, jobs) for one sweep over `seeds` paired runs.
fn plan_sweep(
    base: &RunConfig,
    sweep: &str,
    values: Option<&[f64]>,
    seeds: u64,
) -> CliResult<(Vec<String>, Vec<Job>)> {
    if values.is_some() && sweep != "ratio" {
        return Err(CliError::Config(format!(
            "--values only applies to the ratio sweep, not '{}'",
            sweep
        )));
    }
    let mut labels: Vec<String> = Vec::new();
    let mut jobs: Vec<Job> = Vec::new();
    let seeded = |cfg: &RunConfig, i: u64| -> RunConfig {
        let mut c = cfg.clone();
        c.run.seed = base.run.seed + i;
        c
    };
    match sweep {
        "branches" => {
            labels = vec![
                "global_only".into(),
                "drop_only".into(),
                "both".into(),
            ];
            let mut baseline = base.clone();
            baseline.model.use_drop_branch = false;
            baseline.mask.kind = DropKind::None;
            for i in 0..seeds {
                jobs.push(Job {
                    cfg: seeded(&baseline, i),
                    seed_index: i,
                    row: 0,
                    slice_row: None,
                    measure_entropy: true,
                });
                jobs.push(Job {
                    cfg: seeded(base, i),
                    seed_index: i,
                    row: 2,
                    slice_row: Some(1),
                    measure_entropy: true,
                });
            }
        }
        "variants" => {
            let kinds = [
                (DropKind::BatchDropBlock, "batch_drop_block"),
                (DropKind::DropBlock, "drop_block"),
                (DropKind::Dropout, "dropout"),
                (DropKind::SpatialDropout, "spatial_dropout"),
                (DropKind::BatchDropout, "batch_dropout"),
            ];
            for (row, (kind, name)) in kinds.iter().enumerate() {
                labels.push((*name).into());
                let mut cfg = base.clone();
                cfg.mask.kind = *kind;
                for i in 0..seeds {
                    jobs.push(Job {
                        cfg: seeded(&cfg, i),
                        seed_index: i,
                        row,
                        slice_row: None,
                        measure_entropy: false,
                    });
                }
            }
        }
        "ratio" => {
            let defaults = [0.1, 0.3, 0.5, 0.7];
            let vals: Vec<f64> = values.map(<[f64]>::to_vec).unwrap_or(defaults.to_vec());
            if vals.is_empty() {
                return Err(CliError::Config("ratio sweep needs at least one value".into()));
            }
            for (row, &v) in vals.iter().enumerate() {
                labels.push(format!("r_h={}", v));
                let mut cfg = base.clone();
                cfg.mask.r_h = v;
                for i in 0..seeds {
                    jobs.push(Job {
                        cfg: seeded(&cfg, i),
                        seed_index: i,
                        row,
                        slice_row: None,
                        measure_entropy: false,
                    });
                }
            }
        }
        "pooling" => {
            for (row, name) in ["gmp", "gap"].iter().enumerate() {
                labels.push((*name).into());
                let mut cfg = base.clone();
                cfg.model.drop_pool = crate::config::parse_pool_kind(name)?;
                for i in 0..seeds {
                    jobs.push(Job {
                        cfg: seeded(&cfg, i),
                        seed_index: i,
                        row,
                        slice_row: None,
                        measure_entropy: false,
                    });
                }
            }
        }
        other => {
            return Err(CliError::Config(format!(
                "unknown sweep '{}', expected branches, variants, ratio, or pooling",
                other
            )))
        }
    }
    Ok((labels, jobs))
}

fn thread_pool() -> CliResult<rayon::ThreadPool> {
    let threads = match std::env::var("BDB_THREADS") {
        Ok(v) => v.parse::<usize>().map_err(|_| {
            CliError::Config(format!("BDB_THREADS must be a non-negative integer, got '{}'", v))
        })?,
        Err(_) => 0, // 0 lets rayon pick the core count
    };
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| CliError::Runtime(format!("thread pool: {}", e)))
}

pub fn run_sweep(
    base: &RunConfig,
    sweep: &str,
    values: Option<&[f64]>,
    seeds: u64,
) -> CliResult<SweepReport> {
    if seeds == 0 {
        return Err(CliError::Config("--seeds must be at least 1".into()));
    }
    let (labels, jobs) = plan_sweep(base, sweep, values, seeds)?;

    // One split per seed index, shared by every configuration at that seed.
    let splits: Vec<DatasetSplit> = (0..seeds)
        .map(|i| {
            let mut cfg = base.synthetic_config();
            cfg.seed = base.run.seed + i;
            Ok(bdb_core::data::gen_synthetic(&cfg)?)
        })
        .collect::<CliResult<_>>()?;

    let pool = thread_pool()?;
    let results: Vec<Vec<Contribution>> = pool.install(|| {
        jobs.par_iter()
            .map(|job| run_job(job, &splits[job.seed_index as usize]))
            .collect::<CliResult<_>>()
    })?;

    let mut rows: Vec<SweepRow> = labels.iter().map(|l| SweepRow::new(l)).collect();
    // Jobs are ordered seed-major within each configuration, so pushing in
    // job order keeps per-seed vectors aligned across rows.
    for contribution in results.iter().flatten() {
        let row = &mut rows[contribution.row];
        row.rank1.push(contribution.rank1);
        row.map.push(contribution.map);
        if let Some(e) = contribution.entropy {
            row.entropy.push(e);
        }
    }
    Ok(SweepReport {
        sweep: sweep.to_string(),
        seeds,
        rows,
    })
}

pub fn run(args: &Args) -> CliResult<()> {
    let mut cfg = RunConfig::load(args.preset.as_deref(), args.config.as_deref())?;
    if let Some(e) = args.epochs {
        cfg.train.total_epochs = e;
    }
    let report = run_sweep(&cfg, &args.sweep, args.values.as_deref(), args.seeds)?;
    let csv = report.to_csv();
    print!("{}", csv);
    if args.sweep == "branches" {
        for row in &report.rows {
            if !row.entropy.is_empty() {
                println!("entropy {} {}", row.label, row.entropy_mean());
            }
        }
    }
    if let Some(path) = &args.out {
        if let Some(dir) = path.parent() {
            if !dir.as_os_str().is_empty() {
                std::fs::create_dir_all(dir)?;
            }
        }
        std::fs::write(path, csv)?;
    }
    Ok(())
}
