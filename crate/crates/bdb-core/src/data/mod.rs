//! Dataset model: records, splits, manifest IO, identity-balanced sampling,
//! augmentations, and the synthetic generator.

mod augment;
mod manifest;
mod sampler;
mod synthetic;

pub use augment::{augment, AugmentSpec, NormStats};
pub use manifest::{load_manifest, save_manifest};
pub use sampler::{epoch_batches, BatchPlan};
pub use synthetic::{gen_synthetic, SyntheticConfig};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Patch-grid geometry shared by every record of a dataset.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct GridDims {
    pub grid_h: usize,
    pub grid_w: usize,
    pub patch_dim: usize,
}

impl GridDims {
    pub fn patches(&self) -> usize {
        self.grid_h * self.grid_w
    }

    pub fn values_per_record(&self) -> usize {
        self.patches() * self.patch_dim
    }
}

/// One sample: a flattened patch grid plus identity and camera labels.
#[derive(Clone, Debug, PartialEq)]
pub struct Record {
    pub sample_id: String,
    pub identity: usize,
    pub camera: usize,
    /// Row-major `[grid_h * grid_w, patch_dim]`.
    pub patches: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetSplit {
    pub dims: GridDims,
    pub train: Vec<Record>,
    pub query: Vec<Record>,
    pub gallery: Vec<Record>,
}

fn identity_set(records: &[Record]) -> std::collections::BTreeSet<usize> {
    records.iter().map(|r| r.identity).collect()
}

impl DatasetSplit {
    /// Checks the invariants every consumer relies on: nonempty train split,
    /// uniform patch dimensions, train/test identity disjointness, and a
    /// cross-camera gallery match for every query.
    pub fn validate(&self) -> Result<()> {
        if self.train.is_empty() {
            return Err(Error::Dataset("train split is empty".into()));
        }
        let want = self.dims.values_per_record();
        for (split, records) in [
            ("train", &self.train),
            ("query", &self.query),
            ("gallery", &self.gallery),
        ] {
            if let Some(r) = records.iter().find(|r| r.patches.len() != want) {
                return Err(Error::Dataset(format!(
                    "{} record {} has {} patch values, header implies {}",
                    split,
                    r.sample_id,
                    r.patches.len(),
                    want
                )));
            }
        }
        let train_ids = identity_set(&self.train);
        let mut test_ids = identity_set(&self.query);
        test_ids.extend(identity_set(&self.gallery));
        if let Some(id) = train_ids.intersection(&test_ids).next() {
            return Err(Error::Dataset(format!(
                "identity {} appears in both train and test splits",
                id
            )));
        }
        for q in &self.query {
            let ok = self
                .gallery
                .iter()
                .any(|g| g.identity == q.identity && g.camera != q.camera);
            if !ok {
                return Err(Error::Dataset(format!(
                    "query {} (identity {}, camera {}) has no gallery match under a different camera",
                    q.sample_id, q.identity, q.camera
                )));
            }
        }
        Ok(())
    }
}

/// Stacks records into a `[B, patches, patch_dim]` constant tensor, in the
/// given order.
pub fn records_to_tensor(records: &[&Record], dims: &GridDims) -> Result<Tensor> {
    if records.is_empty() {
        return Err(Error::Dataset("cannot tensorize zero records".into()));
    }
    let per = dims.values_per_record();
    let mut data = Vec::with_capacity(records.len() * per);
    for r in records {
        if r.patches.len() != per {
            return Err(Error::Dimension(format!(
                "record {} has {} patch values, expected {}",
                r.sample_id,
                r.patches.len(),
                per
            )));
        }
        data.extend_from_slice(&r.patches);
    }
    Tensor::constant(data, &[records.len(), dims.patches(), dims.patch_dim])
}
