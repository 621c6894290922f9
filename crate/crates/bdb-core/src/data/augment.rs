//! Input-space augmentations on the patch grid.
//!
//! Application order: horizontal flip, normalization, Cutout, Random
//! Erasing. The value-filling augmentations run after normalization, as is
//! conventional for their image-space counterparts. Labels are never
//! touched.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{GridDims, Record};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AugmentSpec {
    /// Mirror the grid columns with probability 0.5.
    pub hflip: bool,
    /// Per-dimension (x - mean) / std with train-split statistics.
    pub normalize: bool,
    /// Zero a random square region of the grid.
    pub cutout: bool,
    /// Cutout side length as a ratio of min(grid_h, grid_w), at least 1 cell.
    pub cutout_ratio: f64,
    /// With probability 0.5, fill a random rectangle with uniform noise.
    pub random_erasing: bool,
}

impl Default for AugmentSpec {
    fn default() -> Self {
        Self {
            hflip: true,
            normalize: true,
            cutout: false,
            cutout_ratio: 0.25,
            random_erasing: false,
        }
    }
}

/// Dataset-level per-dimension normalization statistics, computed on the
/// train split only. Constant dimensions keep std 1 so they map to 0.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl NormStats {
    pub fn from_train(train: &[Record], dims: &GridDims) -> Result<Self> {
        let d = dims.values_per_record();
        if train.is_empty() {
            return Err(Error::Dataset("cannot compute statistics of an empty split".into()));
        }
        let n = train.len() as f64;
        let mut mean = vec![0.0; d];
        for r in train {
            for (m, v) in mean.iter_mut().zip(&r.patches) {
                *m += v;
            }
        }
        for m in &mut mean {
            *m /= n;
        }
        let mut var = vec![0.0; d];
        for r in train {
            for i in 0..d {
                let diff = r.patches[i] - mean[i];
                var[i] += diff * diff;
            }
        }
        let std = var
            .iter()
            .map(|v| {
                let s = (v / n).sqrt();
                if s > 0.0 {
                    s
                } else {
                    1.0
                }
            })
            .collect();
        Ok(Self { mean, std })
    }
}

fn flip_columns(patches: &mut [f64], dims: &GridDims) {
    let d = dims.patch_dim;
    for row in 0..dims.grid_h {
        for col in 0..dims.grid_w / 2 {
            let a = (row * dims.grid_w + col) * d;
            let b = (row * dims.grid_w + (dims.grid_w - 1 - col)) * d;
            for k in 0..d {
                patches.swap(a + k, b + k);
            }
        }
    }
}

fn fill_region(
    patches: &mut [f64],
    dims: &GridDims,
    top: usize,
    left: usize,
    eh: usize,
    ew: usize,
    mut value: impl FnMut() -> f64,
) {
    for r in top..top + eh {
        for c in left..left + ew {
            let base = (r * dims.grid_w + c) * dims.patch_dim;
            for k in 0..dims.patch_dim {
                patches[base + k] = value();
            }
        }
    }
}

/// Applies the enabled augmentations to one record. `stats` is required when
/// normalization is enabled.
pub fn augment<R: Rng>(
    record: &Record,
    spec: &AugmentSpec,
    stats: Option<&NormStats>,
    dims: &GridDims,
    rng: &mut R,
) -> Result<Record> {
    if record.patches.len() != dims.values_per_record() {
        return Err(Error::Dimension(format!(
            "record {} has {} values, dims imply {}",
            record.sample_id,
            record.patches.len(),
            dims.values_per_record()
        )));
    }
    if !(0.0..=1.0).contains(&spec.cutout_ratio) {
        return Err(Error::Config(format!(
            "cutout_ratio must lie in [0,1], got {}",
            spec.cutout_ratio
        )));
    }
    let mut out = record.clone();

    if spec.hflip && rng.random_bool(0.5) {
        flip_columns(&mut out.patches, dims);
    }

    if spec.normalize {
        let stats = stats.ok_or_else(|| {
            Error::Config("normalization enabled but no statistics supplied".into())
        })?;
        if stats.mean.len() != out.patches.len() {
            return Err(Error::Dimension(format!(
                "statistics cover {} dims, record has {}",
                stats.mean.len(),
                out.patches.len()
            )));
        }
        for i in 0..out.patches.len() {
            out.patches[i] = (out.patches[i] - stats.mean[i]) / stats.std[i];
        }
    }

    if spec.cutout {
        let side = ((spec.cutout_ratio * dims.grid_h.min(dims.grid_w) as f64).floor() as usize).max(1);
        let top = rng.random_range(0..dims.grid_h - side + 1);
        let left = rng.random_range(0..dims.grid_w - side + 1);
        fill_region(&mut out.patches, dims, top, left, side, side, || 0.0);
    }

    if spec.random_erasing && rng.random_bool(0.5) {
        let area = dims.grid_h as f64 * dims.grid_w as f64 * rng.random_range(0.02..0.4);
        let aspect = rng.random_range(0.3..3.3);
        let eh = ((area * aspect).sqrt().round() as usize).clamp(1, dims.grid_h);
        let ew = ((area / aspect).sqrt().round() as usize).clamp(1, dims.grid_w);
        let top = rng.random_range(0..dims.grid_h - eh + 1);
        let left = rng.random_range(0..dims.grid_w - ew + 1);
        fill_region(&mut out.patches, dims, top, left, eh, ew, || rng.random::<f64>());
    }

    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn dims() -> GridDims {
        GridDims {
            grid_h: 4,
            grid_w: 4,
            patch_dim: 2,
        }
    }

    fn record(patches: Vec<f64>) -> Record {
        Record {
            sample_id: "r".into(),
            identity: 3,
            camera: 1,
            patches,
        }
    }

    fn indexed_record(dims: &GridDims) -> Record {
        record((0..dims.values_per_record()).map(|i| i as f64).collect())
    }

    #[test]
    fn flip_is_an_involution() {
        let dims = dims();
        let r = indexed_record(&dims);
        let mut once = r.patches.clone();
        flip_columns(&mut once, &dims);
        assert_ne!(once, r.patches);
        flip_columns(&mut once, &dims);
        assert_eq!(once, r.patches);
    }

    #[test]
    fn flip_moves_whole_patches() {
        let dims = dims();
        let r = indexed_record(&dims);
        let mut flipped = r.patches.clone();
        flip_columns(&mut flipped, &dims);
        // Row 0: positions 0..4 hold patches [0,1],[2,3],[4,5],[6,7] before,
        // reversed per column after.
        assert_eq!(&flipped[0..2], &[6.0, 7.0]);
        assert_eq!(&flipped[6..8], &[0.0, 1.0]);
    }

    #[test]
    fn normalization_standardizes_each_dimension() {
        let dims = GridDims {
            grid_h: 1,
            grid_w: 1,
            patch_dim: 2,
        };
        let train = vec![
            record(vec![1.0, 10.0]),
            record(vec![3.0, 30.0]),
            record(vec![5.0, 20.0]),
        ];
        let stats = NormStats::from_train(&train, &dims).unwrap();
        let spec = AugmentSpec {
            hflip: false,
            normalize: true,
            cutout: false,
            cutout_ratio: 0.25,
            random_erasing: false,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let normed: Vec<Record> = train
            .iter()
            .map(|r| augment(r, &spec, Some(&stats), &dims, &mut rng).unwrap())
            .collect();
        for dim in 0..2 {
            let vals: Vec<f64> = normed.iter().map(|r| r.patches[dim]).collect();
            let mean = vals.iter().sum::<f64>() / 3.0;
            let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 3.0;
            assert!(mean.abs() < 1e-12);
            assert!((var - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn constant_dimension_normalizes_to_zero() {
        let dims = GridDims {
            grid_h: 1,
            grid_w: 1,
            patch_dim: 1,
        };
        let train = vec![record(vec![4.0]), record(vec![4.0])];
        let stats = NormStats::from_train(&train, &dims).unwrap();
        assert_eq!(stats.std, vec![1.0]);
        let spec = AugmentSpec {
            hflip: false,
            normalize: true,
            cutout: false,
            cutout_ratio: 0.25,
            random_erasing: false,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let out = augment(&train[0], &spec, Some(&stats), &dims, &mut rng).unwrap();
        assert_eq!(out.patches, vec![0.0]);
    }

    #[test]
    fn cutout_zeroes_a_square_and_nothing_else() {
        let dims = dims();
        let r = record(vec![1.0; dims.values_per_record()]);
        let spec = AugmentSpec {
            hflip: false,
            normalize: false,
            cutout: true,
            cutout_ratio: 0.5, // floor(0.5 * 4) = 2x2 cells
            random_erasing: false,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let out = augment(&r, &spec, None, &dims, &mut rng).unwrap();
        let zeros: Vec<usize> = (0..dims.patches())
            .filter(|p| out.patches[p * 2] == 0.0 && out.patches[p * 2 + 1] == 0.0)
            .collect();
        assert_eq!(zeros.len(), 4, "expected a 2x2 zero block, got {:?}", zeros);
        for p in 0..dims.patches() {
            if !zeros.contains(&p) {
                assert_eq!(out.patches[p * 2], 1.0);
                assert_eq!(out.patches[p * 2 + 1], 1.0);
            }
        }
    }

    #[test]
    fn labels_never_change() {
        let dims = dims();
        let r = indexed_record(&dims);
        let spec = AugmentSpec {
            hflip: true,
            normalize: false,
            cutout: true,
            cutout_ratio: 0.25,
            random_erasing: true,
        };
        for seed in 0..10 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let out = augment(&r, &spec, None, &dims, &mut rng).unwrap();
            assert_eq!(out.identity, r.identity);
            assert_eq!(out.camera, r.camera);
            assert_eq!(out.sample_id, r.sample_id);
        }
    }

    #[test]
    fn missing_stats_is_a_config_error() {
        let dims = dims();
        let r = indexed_record(&dims);
        let spec = AugmentSpec::default();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(matches!(
            augment(&r, &spec, None, &dims, &mut rng),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn random_erasing_fills_a_rectangle_when_triggered() {
        let dims = dims();
        let r = record(vec![-5.0; dims.values_per_record()]);
        let spec = AugmentSpec {
            hflip: false,
            normalize: false,
            cutout: false,
            cutout_ratio: 0.25,
            random_erasing: true,
        };
        let mut triggered = false;
        for seed in 0..20 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let out = augment(&r, &spec, None, &dims, &mut rng).unwrap();
            let changed: Vec<usize> = (0..dims.patches())
                .filter(|p| (0..2).any(|k| out.patches[p * 2 + k] != -5.0))
                .collect();
            if changed.is_empty() {
                continue;
            }
            triggered = true;
            // Filled values are uniform draws in [0,1).
            for &p in &changed {
                for k in 0..2 {
                    let v = out.patches[p * 2 + k];
                    assert!((0.0..1.0).contains(&v), "fill value {}", v);
                }
            }
            // Changed cells form a rectangle.
            let rows: Vec<usize> = changed.iter().map(|p| p / dims.grid_w).collect();
            let cols: Vec<usize> = changed.iter().map(|p| p % dims.grid_w).collect();
            let (rmin, rmax) = (*rows.iter().min().unwrap(), *rows.iter().max().unwrap());
            let (cmin, cmax) = (*cols.iter().min().unwrap(), *cols.iter().max().unwrap());
            assert_eq!((rmax - rmin + 1) * (cmax - cmin + 1), changed.len());
        }
        assert!(triggered, "random erasing never fired over 20 seeds");
    }
}
