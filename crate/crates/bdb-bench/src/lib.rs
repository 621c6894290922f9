//! Shared fixtures for the criterion benches: deterministic random tensors,
//! a desk-sized model, and embedding sets shaped like real evaluation runs.

use bdb_core::data::{gen_synthetic, records_to_tensor, SyntheticConfig};
use bdb_core::eval::EmbeddingRecord;
use bdb_core::masks::DropSpec;
use bdb_core::model::{BackboneConfig, BranchConfig, Model, ModelConfig, PoolKind};
use bdb_core::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_tensor(seed: u64, shape: &[usize]) -> Tensor {
    let mut r = rng(seed);
    let n: usize = shape.iter().product();
    let data: Vec<f64> = (0..n).map(|_| r.sample::<f64, _>(StandardNormal)).collect();
    Tensor::param(data, shape).expect("random tensor")
}

/// Model at the default desk dimensions: 8x4 grid, 8-dim patches,
/// 16 feature channels, both branches enabled.
pub fn desk_model(seed: u64) -> Model {
    let cfg = ModelConfig {
        backbone: BackboneConfig {
            grid_h: 8,
            grid_w: 4,
            in_patch_dim: 8,
            feat_channels: 16,
            mixing_blocks: 2,
        },
        branches: BranchConfig {
            global_reduce_dim: 12,
            drop_reduce_dim: 24,
            drop_spec: DropSpec::batch_drop_block(0.5, 1.0),
            drop_pool: PoolKind::Gmp,
            use_drop_branch: true,
        },
        num_classes: 12,
    };
    let mut r = rng(seed);
    Model::new(cfg, &mut r).expect("model")
}

/// One training batch at desk dimensions: 16 images as a [16, 8*4*8] tensor
/// plus their identity labels.
pub fn desk_batch(seed: u64) -> (Tensor, Vec<usize>) {
    let cfg = SyntheticConfig {
        seed,
        ..SyntheticConfig::default()
    };
    let split = gen_synthetic(&cfg).expect("synthetic split");
    let records: Vec<_> = split.train.iter().take(16).collect();
    let labels = records.iter().map(|r| r.identity).collect();
    let x = records_to_tensor(&records, &split.dims).expect("batch tensor");
    (x, labels)
}

pub fn random_embeddings(seed: u64, n: usize, dim: usize, ids: usize, cams: usize, tag: &str) -> Vec<EmbeddingRecord> {
    let mut r = rng(seed);
    (0..n)
        .map(|i| EmbeddingRecord {
            sample_id: format!("{}{}", tag, i),
            identity: r.random_range(0..ids),
            camera: r.random_range(0..cams),
            vector: (0..dim).map(|_| r.sample::<f64, _>(StandardNormal)).collect(),
        })
        .collect()
}
