//! Embedding extraction and retrieval metrics.
//!
//! Two protocols are covered: re-identification (CMC/Rank-k and mAP with
//! same-identity-same-camera gallery exclusion) and general retrieval
//! (Recall@K with self-exclusion). All rankings use ascending Euclidean
//! distance with ties broken by gallery input order, so results are
//! deterministic.

use std::collections::BTreeMap;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{records_to_tensor, GridDims, Record};
use crate::error::{Error, Result};
use crate::model::{Mode, Model};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingRecord {
    #[serde(rename = "id")]
    pub sample_id: String,
    pub identity: usize,
    pub camera: usize,
    #[serde(rename = "v")]
    pub vector: Vec<f64>,
}

/// Retrieval results. `cmc[k-1]` is CMC@k; for Recall@K evaluations the
/// re-ID fields stay empty and `recall_at` carries the requested Ks.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub cmc: Vec<f64>,
    pub rank1: f64,
    pub map: f64,
    pub recall_at: BTreeMap<usize, f64>,
    /// Queries that were actually scored.
    pub num_queries: usize,
    /// Queries dropped for having no valid relevant gallery item.
    pub skipped_queries: usize,
    pub max_rank: usize,
}

fn check_uniform_dim(records: &[EmbeddingRecord]) -> Result<usize> {
    let dim = records
        .first()
        .map(|r| r.vector.len())
        .ok_or_else(|| Error::Eval("empty embedding set".into()))?;
    for r in records {
        if r.vector.len() != dim {
            return Err(Error::Eval(format!(
                "embedding {} has dim {}, expected {}",
                r.sample_id,
                r.vector.len(),
                dim
            )));
        }
        if r.vector.iter().any(|v| !v.is_finite()) {
            return Err(Error::Eval(format!(
                "embedding {} contains non-finite values",
                r.sample_id
            )));
        }
    }
    Ok(dim)
}

/// Exact pairwise Euclidean distances, rows indexed by `a`.
pub fn distance_matrix(a: &[EmbeddingRecord], b: &[EmbeddingRecord]) -> Result<Vec<Vec<f64>>> {
    let da = check_uniform_dim(a)?;
    let db = check_uniform_dim(b)?;
    if da != db {
        return Err(Error::Eval(format!(
            "embedding dims differ between sets: {} vs {}",
            da, db
        )));
    }
    Ok(a.iter()
        .map(|qa| {
            b.iter()
                .map(|qb| {
                    qa.vector
                        .iter()
                        .zip(&qb.vector)
                        .map(|(x, y)| (x - y) * (x - y))
                        .sum::<f64>()
                        .sqrt()
                })
                .collect()
        })
        .collect())
}

/// Indices of `row` sorted by ascending distance; the stable sort keeps
/// input order between equal distances.
fn ranked_indices(row: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..row.len()).collect();
    order.sort_by(|&i, &j| row[i].partial_cmp(&row[j]).expect("finite distances"));
    order
}

/// Re-ID protocol: rank the gallery per query, drop gallery entries sharing
/// both identity and camera with the query, then score CMC and AP over the
/// remaining list. Queries with no relevant item (same identity, different
/// camera) anywhere in the gallery are skipped and counted.
pub fn reid_metrics(
    query: &[EmbeddingRecord],
    gallery: &[EmbeddingRecord],
    max_rank: usize,
) -> Result<MetricsReport> {
    if gallery.is_empty() {
        return Err(Error::Eval("empty gallery".into()));
    }
    if max_rank == 0 {
        return Err(Error::Eval("max_rank must be at least 1".into()));
    }
    let dist = distance_matrix(query, gallery)?;

    let mut cmc_counts = vec![0usize; max_rank];
    let mut ap_sum = 0.0;
    let mut scored = 0usize;
    let mut skipped = 0usize;
    for (qi, q) in query.iter().enumerate() {
        let total_relevant = gallery
            .iter()
            .filter(|g| g.identity == q.identity && g.camera != q.camera)
            .count();
        if total_relevant == 0 {
            skipped += 1;
            continue;
        }
        scored += 1;

        let mut ap = 0.0;
        let mut hits = 0usize;
        let mut kept_pos = 0usize;
        let mut first_hit: Option<usize> = None;
        for &gi in &ranked_indices(&dist[qi]) {
            let g = &gallery[gi];
            if g.identity == q.identity && g.camera == q.camera {
                continue;
            }
            if g.identity == q.identity {
                hits += 1;
                ap += hits as f64 / (kept_pos + 1) as f64;
                first_hit.get_or_insert(kept_pos);
            }
            kept_pos += 1;
        }
        ap_sum += ap / total_relevant as f64;
        if let Some(pos) = first_hit {
            for k in pos..max_rank {
                cmc_counts[k] += 1;
            }
        }
    }
    if scored == 0 {
        return Err(Error::Eval("no query has a valid relevant gallery item".into()));
    }
    let cmc: Vec<f64> = cmc_counts
        .iter()
        .map(|&c| c as f64 / scored as f64)
        .collect();
    Ok(MetricsReport {
        rank1: cmc[0],
        map: ap_sum / scored as f64,
        cmc,
        recall_at: BTreeMap::new(),
        num_queries: scored,
        skipped_queries: skipped,
        max_rank,
    })
}

/// Recall@K over a single embedding set: each sample queries all others
/// (itself excluded) and scores a hit when the top-K neighbors contain at
/// least one same-identity item.
pub fn recall_at_k(embeddings: &[EmbeddingRecord], ks: &[usize]) -> Result<MetricsReport> {
    if embeddings.len() < 2 {
        return Err(Error::Eval("Recall@K needs at least 2 embeddings".into()));
    }
    for &k in ks {
        if k == 0 {
            return Err(Error::Eval("Recall@0 is undefined".into()));
        }
        if k >= embeddings.len() {
            return Err(Error::Eval(format!(
                "K = {} but only {} embeddings ({} neighbors after self-exclusion)",
                k,
                embeddings.len(),
                embeddings.len() - 1
            )));
        }
    }
    let dist = distance_matrix(embeddings, embeddings)?;
    let max_k = ks.iter().copied().max().unwrap_or(0);

    let mut hits: BTreeMap<usize, usize> = ks.iter().map(|&k| (k, 0)).collect();
    for (qi, q) in embeddings.iter().enumerate() {
        let neighbors: Vec<usize> = ranked_indices(&dist[qi])
            .into_iter()
            .filter(|&gi| gi != qi)
            .take(max_k)
            .collect();
        for &k in ks {
            if neighbors[..k].iter().any(|&gi| embeddings[gi].identity == q.identity) {
                *hits.get_mut(&k).expect("key inserted above") += 1;
            }
        }
    }
    let n = embeddings.len() as f64;
    let recall_at: BTreeMap<usize, f64> = hits.into_iter().map(|(k, h)| (k, h as f64 / n)).collect();
    Ok(MetricsReport {
        cmc: Vec::new(),
        rank1: recall_at.get(&1).copied().unwrap_or(0.0),
        map: 0.0,
        recall_at,
        num_queries: embeddings.len(),
        skipped_queries: 0,
        max_rank: max_k,
    })
}

/// Runs the model in eval mode over `records` in chunks of `batch_size` and
/// collects the concatenated descriptors. Eval-mode batch norm uses frozen
/// running statistics, so the split into batches cannot change any value.
pub fn extract_embeddings(
    model: &mut Model,
    records: &[Record],
    dims: &GridDims,
    batch_size: usize,
) -> Result<Vec<EmbeddingRecord>> {
    if batch_size == 0 {
        return Err(Error::Eval("batch_size must be at least 1".into()));
    }
    let bb = &model.cfg.backbone;
    if bb.grid_h != dims.grid_h || bb.grid_w != dims.grid_w || bb.in_patch_dim != dims.patch_dim {
        return Err(Error::Config(format!(
            "model expects {}x{} grid of dim-{} patches, data is {}x{} of dim {}",
            bb.grid_h, bb.grid_w, bb.in_patch_dim, dims.grid_h, dims.grid_w, dims.patch_dim
        )));
    }
    // The rng is threaded through forward() but eval mode never draws from it.
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut out = Vec::with_capacity(records.len());
    for chunk in records.chunks(batch_size) {
        let refs: Vec<&Record> = chunk.iter().collect();
        let x = records_to_tensor(&refs, dims)?;
        let fwd = model.forward(&x, Mode::Eval, &mut rng)?;
        let desc = fwd
            .descriptor
            .ok_or_else(|| Error::Eval("eval forward produced no descriptor".into()))?;
        let dim = desc.shape()[1];
        let data = desc.data();
        for (i, r) in chunk.iter().enumerate() {
            let vector = data[i * dim..(i + 1) * dim].to_vec();
            if vector.iter().any(|v| !v.is_finite()) {
                return Err(Error::Eval(format!(
                    "descriptor for {} contains non-finite values",
                    r.sample_id
                )));
            }
            out.push(EmbeddingRecord {
                sample_id: r.sample_id.clone(),
                identity: r.identity,
                camera: r.camera,
                vector,
            });
        }
    }
    Ok(out)
}

const MAGIC: &str = "bdb-embeddings";
const VERSION: &str = "v1";

pub fn save_embeddings<W: Write>(writer: W, records: &[EmbeddingRecord]) -> Result<()> {
    let dim = check_uniform_dim(records)?;
    let mut w = BufWriter::new(writer);
    writeln!(w, "{} {} dim={}", MAGIC, VERSION, dim)?;
    for r in records {
        writeln!(w, "{}", serde_json::to_string(r).map_err(io_from_json)?)?;
    }
    w.flush()?;
    Ok(())
}

pub fn load_embeddings<R: std::io::Read>(reader: R) -> Result<Vec<EmbeddingRecord>> {
    let mut lines = BufReader::new(reader).lines();
    let header = lines
        .next()
        .transpose()?
        .ok_or_else(|| Error::Parse { line: 1, msg: "missing header".into() })?;
    let dim = parse_header(&header)?;
    let mut out = Vec::new();
    for (idx, line) in lines.enumerate() {
        let line_no = idx + 2;
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: EmbeddingRecord = serde_json::from_str(&line).map_err(|e| Error::Parse {
            line: line_no,
            msg: e.to_string(),
        })?;
        if rec.vector.len() != dim {
            return Err(Error::Parse {
                line: line_no,
                msg: format!("vector has dim {}, header says {}", rec.vector.len(), dim),
            });
        }
        out.push(rec);
    }
    check_uniform_dim(&out)?;
    Ok(out)
}

pub fn save_embeddings_file<P: AsRef<Path>>(path: P, records: &[EmbeddingRecord]) -> Result<()> {
    save_embeddings(std::fs::File::create(path)?, records)
}

pub fn load_embeddings_file<P: AsRef<Path>>(path: P) -> Result<Vec<EmbeddingRecord>> {
    load_embeddings(std::fs::File::open(path)?)
}

fn parse_header(header: &str) -> Result<usize> {
    let parts: Vec<&str> = header.split_whitespace().collect();
    if parts.len() != 3 || parts[0] != MAGIC || parts[1] != VERSION {
        return Err(Error::Parse {
            line: 1,
            msg: format!("expected '{} {} dim=<d>', got '{}'", MAGIC, VERSION, header),
        });
    }
    let dim = parts[2]
        .strip_prefix("dim=")
        .and_then(|v| v.parse::<usize>().ok())
        .filter(|&d| d > 0)
        .ok_or_else(|| Error::Parse {
            line: 1,
            msg: format!("bad dim field '{}'", parts[2]),
        })?;
    Ok(dim)
}

fn io_from_json(e: serde_json::Error) -> Error {
    Error::Io(std::io::Error::new(std::io::ErrorKind::InvalidData, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn emb(id: &str, identity: usize, camera: usize, v: &[f64]) -> EmbeddingRecord {
        EmbeddingRecord {
            sample_id: id.into(),
            identity,
            camera,
            vector: v.to_vec(),
        }
    }

    #[test]
    fn distance_matrix_known_values() {
        let a = vec![emb("a", 0, 0, &[0.0]), emb("b", 0, 0, &[3.0]), emb("c", 0, 0, &[4.0])];
        let d = distance_matrix(&a, &a).unwrap();
        let expect = [[0.0, 3.0, 4.0], [3.0, 0.0, 1.0], [4.0, 1.0, 0.0]];
        for i in 0..3 {
            for j in 0..3 {
                assert_eq!(d[i][j], expect[i][j]);
            }
        }
    }

    #[test]
    fn distance_matrix_dim_mismatch() {
        let a = vec![emb("a", 0, 0, &[0.0, 1.0])];
        let b = vec![emb("b", 0, 0, &[0.0])];
        assert!(matches!(distance_matrix(&a, &b), Err(Error::Eval(_))));
    }

    #[test]
    fn reid_hand_example_matches_protocol() {
        // Same-camera same-identity entry is removed; the two relevant items
        // land at kept positions 2 and 3, so AP = (1/2 + 2/3) / 2 = 7/12.
        let query = vec![emb("q", 1, 0, &[0.0])];
        let gallery = vec![
            emb("g0", 1, 0, &[0.1]),
            emb("g1", 2, 1, &[0.2]),
            emb("g2", 1, 1, &[0.3]),
            emb("g3", 1, 2, &[0.5]),
        ];
        let rep = reid_metrics(&query, &gallery, 3).unwrap();
        assert_eq!(rep.rank1, 0.0);
        assert_eq!(rep.cmc, vec![0.0, 1.0, 1.0]);
        assert!((rep.map - 7.0 / 12.0).abs() < 1e-12);
        assert_eq!(rep.num_queries, 1);
        assert_eq!(rep.skipped_queries, 0);
    }

    #[test]
    fn single_relevant_item_ranked_first() {
        let query = vec![emb("q", 7, 0, &[0.0])];
        let gallery = vec![emb("g0", 7, 1, &[0.1]), emb("g1", 3, 1, &[5.0])];
        let rep = reid_metrics(&query, &gallery, 2).unwrap();
        assert_eq!(rep.rank1, 1.0);
        assert_eq!(rep.map, 1.0);
    }

    #[test]
    fn query_without_valid_match_is_skipped_and_counted() {
        let query = vec![
            emb("q0", 1, 0, &[0.0]),
            emb("q1", 9, 0, &[0.0]), // identity 9 absent from the gallery
        ];
        let gallery = vec![emb("g0", 1, 1, &[0.1]), emb("g1", 2, 1, &[0.2])];
        let rep = reid_metrics(&query, &gallery, 1).unwrap();
        assert_eq!(rep.num_queries, 1);
        assert_eq!(rep.skipped_queries, 1);
        assert_eq!(rep.rank1, 1.0);
    }

    #[test]
    fn same_camera_only_matches_also_skip() {
        // The only same-identity entry shares the camera, so it is excluded
        // and the query has nothing to find.
        let query = vec![emb("q", 1, 0, &[0.0])];
        let gallery = vec![emb("g0", 1, 0, &[0.1]), emb("g1", 2, 1, &[0.2])];
        assert!(matches!(reid_metrics(&query, &gallery, 1), Err(Error::Eval(_))));
    }

    #[test]
    fn empty_gallery_rejected() {
        let query = vec![emb("q", 1, 0, &[0.0])];
        assert!(matches!(reid_metrics(&query, &[], 1), Err(Error::Eval(_))));
    }

    #[test]
    fn cmc_is_non_decreasing_and_saturates() {
        let query = vec![emb("q0", 1, 0, &[0.0]), emb("q1", 2, 0, &[10.0])];
        let gallery = vec![
            emb("g0", 2, 1, &[9.0]),
            emb("g1", 1, 1, &[1.0]),
            emb("g2", 3, 1, &[0.5]),
        ];
        let rep = reid_metrics(&query, &gallery, 3).unwrap();
        for k in 1..rep.cmc.len() {
            assert!(rep.cmc[k] >= rep.cmc[k - 1]);
        }
        assert_eq!(rep.cmc[rep.cmc.len() - 1], 1.0);
        assert_eq!(rep.rank1, rep.cmc[0]);
    }

    #[test]
    fn metrics_invariant_under_uniform_scaling() {
        let query = vec![emb("q0", 1, 0, &[0.3, -1.0]), emb("q1", 2, 0, &[2.0, 0.1])];
        let gallery = vec![
            emb("g0", 1, 1, &[0.2, -0.8]),
            emb("g1", 2, 1, &[1.5, 0.4]),
            emb("g2", 1, 2, &[4.0, 4.0]),
            emb("g3", 3, 1, &[-2.0, 1.0]),
        ];
        let base = reid_metrics(&query, &gallery, 4).unwrap();
        let scale = |r: &EmbeddingRecord| EmbeddingRecord {
            vector: r.vector.iter().map(|v| v * 37.5).collect(),
            ..r.clone()
        };
        let sq: Vec<_> = query.iter().map(scale).collect();
        let sg: Vec<_> = gallery.iter().map(scale).collect();
        let scaled = reid_metrics(&sq, &sg, 4).unwrap();
        assert_eq!(base.cmc, scaled.cmc);
        assert!((base.map - scaled.map).abs() < 1e-12);
    }

    #[test]
    fn ties_break_by_gallery_input_order() {
        // Both gallery items sit at distance 1; the first one listed wins
        // rank 1, so swapping them flips Rank-1.
        let query = vec![emb("q", 1, 0, &[0.0])];
        let g_t = emb("t", 1, 1, &[1.0]);
        let g_f = emb("f", 2, 1, &[-1.0]);
        let hit_first = reid_metrics(&query, &[g_t.clone(), g_f.clone()], 1).unwrap();
        let hit_second = reid_metrics(&query, &[g_f, g_t], 1).unwrap();
        assert_eq!(hit_first.rank1, 1.0);
        assert_eq!(hit_second.rank1, 0.0);
    }

    #[test]
    fn recall_two_samples_same_class() {
        let e = vec![emb("a", 5, 0, &[0.0]), emb("b", 5, 0, &[1.0])];
        let rep = recall_at_k(&e, &[1]).unwrap();
        assert_eq!(rep.recall_at[&1], 1.0);
    }

    #[test]
    fn recall_all_singletons_is_zero() {
        let e = vec![
            emb("a", 1, 0, &[0.0]),
            emb("b", 2, 0, &[1.0]),
            emb("c", 3, 0, &[2.0]),
        ];
        let rep = recall_at_k(&e, &[1, 2]).unwrap();
        assert_eq!(rep.recall_at[&1], 0.0);
        assert_eq!(rep.recall_at[&2], 0.0);
    }

    #[test]
    fn recall_excludes_self() {
        // Without self-exclusion every query would hit itself at rank 1.
        // With it, interleaved classes on a line push the nearest same-class
        // point past an opposite-class neighbor, so Recall@1 = 0.
        let e = vec![
            emb("a", 1, 0, &[0.0]),
            emb("b", 2, 0, &[1.0]),
            emb("c", 1, 0, &[2.0]),
            emb("d", 2, 0, &[3.0]),
        ];
        let rep = recall_at_k(&e, &[1, 2, 3]).unwrap();
        assert_eq!(rep.recall_at[&1], 0.0);
        assert_eq!(rep.recall_at[&2], 0.5);
        assert_eq!(rep.recall_at[&3], 1.0);
    }

    #[test]
    fn recall_k_at_or_past_set_size_rejected() {
        let e = vec![emb("a", 1, 0, &[0.0]), emb("b", 1, 0, &[1.0])];
        assert!(recall_at_k(&e, &[1]).is_ok());
        assert!(matches!(recall_at_k(&e, &[2]), Err(Error::Eval(_))));
    }

    #[test]
    fn embeddings_round_trip_through_file_format() {
        let recs = vec![
            emb("a", 1, 0, &[0.25, -1.5]),
            emb("b", 2, 1, &[1.0 / 3.0, 7e-20]),
        ];
        let mut buf = Vec::new();
        save_embeddings(&mut buf, &recs).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with("bdb-embeddings v1 dim=2\n"));
        let back = load_embeddings(&buf[..]).unwrap();
        assert_eq!(back, recs);
    }

    #[test]
    fn malformed_embedding_line_reports_line_number() {
        let text = "bdb-embeddings v1 dim=2\n{\"id\":\"a\",\"identity\":1,\"camera\":0,\"v\":[0.0,1.0]}\nnot json\n";
        match load_embeddings(text.as_bytes()) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 3),
            other => panic!("expected parse error, got {:?}", other),
        }
    }

    #[test]
    fn header_dim_mismatch_detected() {
        let text = "bdb-embeddings v1 dim=3\n{\"id\":\"a\",\"identity\":1,\"camera\":0,\"v\":[0.0,1.0]}\n";
        match load_embeddings(text.as_bytes()) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("expected parse error, got {:?}", other),
        }
    }

    #[test]
    fn report_serializes_to_single_json_document() {
        let rep = MetricsReport {
            cmc: vec![0.5, 1.0],
            rank1: 0.5,
            map: 0.75,
            recall_at: BTreeMap::new(),
            num_queries: 2,
            skipped_queries: 0,
            max_rank: 2,
        };
        let json = serde_json::to_string(&rep).unwrap();
        let back: MetricsReport = serde_json::from_str(&json).unwrap();
        assert_eq!(back, rep);
    }
}
