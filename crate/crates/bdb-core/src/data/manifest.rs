//! Manifest file format: one header line
//! `bdb-manifest v1 grid_h=<..> grid_w=<..> patch_dim=<..>`
//! followed by JSON lines, one record each.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{DatasetSplit, GridDims, Record};
use crate::error::{Error, Result};

const MAGIC: &str = "bdb-manifest";
const VERSION: &str = "v1";

#[derive(Serialize, Deserialize)]
struct RecordLine {
    id: String,
    identity: usize,
    camera: usize,
    split: String,
    patches: Vec<f64>,
}

fn parse_header(line: &str) -> Result<GridDims> {
    let err = |msg: String| Error::Parse { line: 1, msg };
    let mut tokens = line.split_whitespace();
    if tokens.next() != Some(MAGIC) || tokens.next() != Some(VERSION) {
        return Err(err(format!("expected '{} {}' header", MAGIC, VERSION)));
    }
    let mut grid_h = None;
    let mut grid_w = None;
    let mut patch_dim = None;
    for tok in tokens {
        let (key, value) = tok
            .split_once('=')
            .ok_or_else(|| err(format!("malformed header token '{}'", tok)))?;
        let value: usize = value
            .parse()
            .map_err(|_| err(format!("header value '{}' is not a positive integer", tok)))?;
        match key {
            "grid_h" => grid_h = Some(value),
            "grid_w" => grid_w = Some(value),
            "patch_dim" => patch_dim = Some(value),
            other => return Err(err(format!("unknown header key '{}'", other))),
        }
    }
    match (grid_h, grid_w, patch_dim) {
        (Some(grid_h), Some(grid_w), Some(patch_dim))
            if grid_h > 0 && grid_w > 0 && patch_dim > 0 =>
        {
            Ok(GridDims {
                grid_h,
                grid_w,
                patch_dim,
            })
        }
        _ => Err(err("header needs positive grid_h, grid_w and patch_dim".into())),
    }
}

/// Parses and validates a manifest file.
pub fn load_manifest(path: &Path) -> Result<DatasetSplit> {
    let file = File::open(path)?;
    let mut lines = BufReader::new(file).lines();
    let header = lines
        .next()
        .ok_or_else(|| Error::Parse {
            line: 1,
            msg: "empty file".into(),
        })??;
    let dims = parse_header(&header)?;
    let want = dims.values_per_record();

    let mut split = DatasetSplit {
        dims,
        train: Vec::new(),
        query: Vec::new(),
        gallery: Vec::new(),
    };
    for (i, line) in lines.enumerate() {
        let line_no = i + 2;
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let parsed: RecordLine = serde_json::from_str(&line).map_err(|e| Error::Parse {
            line: line_no,
            msg: e.to_string(),
        })?;
        if parsed.patches.len() != want {
            return Err(Error::Parse {
                line: line_no,
                msg: format!(
                    "record {} has {} patch values, header implies {}",
                    parsed.id,
                    parsed.patches.len(),
                    want
                ),
            });
        }
        let record = Record {
            sample_id: parsed.id,
            identity: parsed.identity,
            camera: parsed.camera,
            patches: parsed.patches,
        };
        match parsed.split.as_str() {
            "train" => split.train.push(record),
            "query" => split.query.push(record),
            "gallery" => split.gallery.push(record),
            other => {
                return Err(Error::Parse {
                    line: line_no,
                    msg: format!("unknown split '{}'", other),
                })
            }
        }
    }
    split.validate()?;
    Ok(split)
}

/// Writes a manifest; records go out train, query, gallery, preserving order
/// within each split, so a fixed split always serializes identically.
pub fn save_manifest(split: &DatasetSplit, path: &Path) -> Result<()> {
    split.validate()?;
    let mut out = BufWriter::new(File::create(path)?);
    writeln!(
        out,
        "{} {} grid_h={} grid_w={} patch_dim={}",
        MAGIC, VERSION, split.dims.grid_h, split.dims.grid_w, split.dims.patch_dim
    )?;
    for (name, records) in [
        ("train", &split.train),
        ("query", &split.query),
        ("gallery", &split.gallery),
    ] {
        for r in records {
            let line = RecordLine {
                id: r.sample_id.clone(),
                identity: r.identity,
                camera: r.camera,
                split: name.to_string(),
                patches: r.patches.clone(),
            };
            writeln!(out, "{}", serde_json::to_string(&line).expect("serializable"))?;
        }
    }
    out.flush()?;
    Ok(())
}
