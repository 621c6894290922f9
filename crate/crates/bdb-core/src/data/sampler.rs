//! Identity-balanced P x K batch sampling.

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::Record;
use crate::error::{Error, Result};

/// P identities per batch, K instances each.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BatchPlan {
    pub p: usize,
    pub k: usize,
}

impl BatchPlan {
    pub fn batch_size(&self) -> usize {
        self.p * self.k
    }

    pub fn validate(&self) -> Result<()> {
        if self.p < 2 || self.k < 2 {
            return Err(Error::Sampler(format!(
                "batch plan needs P >= 2 and K >= 2, got P={} K={}",
                self.p, self.k
            )));
        }
        Ok(())
    }
}

/// One epoch of batches as indices into `train`. Identities are shuffled and
/// chunked into groups of P (any remainder smaller than P is dropped); each
/// identity contributes K instances, drawn without replacement when it has
/// at least K images and with replacement otherwise.
pub fn epoch_batches<R: Rng>(
    train: &[Record],
    plan: &BatchPlan,
    rng: &mut R,
) -> Result<Vec<Vec<usize>>> {
    plan.validate()?;
    // Identity -> indices, in ascending identity order for determinism.
    let mut by_id: Vec<(usize, Vec<usize>)> = Vec::new();
    for (i, r) in train.iter().enumerate() {
        match by_id.binary_search_by_key(&r.identity, |(id, _)| *id) {
            Ok(pos) => by_id[pos].1.push(i),
            Err(pos) => by_id.insert(pos, (r.identity, vec![i])),
        }
    }
    if by_id.len() < plan.p {
        return Err(Error::Sampler(format!(
            "need at least P={} identities, train split has {}",
            plan.p,
            by_id.len()
        )));
    }

    let mut order: Vec<usize> = (0..by_id.len()).collect();
    order.shuffle(rng);

    let mut batches = Vec::new();
    for group in order.chunks_exact(plan.p) {
        let mut batch = Vec::with_capacity(plan.batch_size());
        for &slot in group {
            let indices = &by_id[slot].1;
            if indices.len() >= plan.k {
                let mut pool = indices.clone();
                pool.shuffle(rng);
                batch.extend_from_slice(&pool[..plan.k]);
            } else {
                for _ in 0..plan.k {
                    batch.push(indices[rng.random_range(0..indices.len())]);
                }
            }
        }
        batches.push(batch);
    }
    Ok(batches)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn record(identity: usize) -> Record {
        Record {
            sample_id: format!("r{}", identity),
            identity,
            camera: 0,
            patches: vec![0.0],
        }
    }

    fn train_set(counts: &[(usize, usize)]) -> Vec<Record> {
        let mut out = Vec::new();
        for &(id, n) in counts {
            for _ in 0..n {
                out.push(record(id));
            }
        }
        out
    }

    #[test]
    fn batches_have_exact_pk_layout() {
        let train = train_set(&[(10, 5), (11, 4), (12, 4)]);
        let plan = BatchPlan { p: 2, k: 4 };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let batches = epoch_batches(&train, &plan, &mut rng).unwrap();
        assert_eq!(batches.len(), 1); // 3 identities, groups of 2, remainder dropped
        for batch in &batches {
            assert_eq!(batch.len(), 8);
            let mut per_id = std::collections::HashMap::new();
            for &i in batch {
                *per_id.entry(train[i].identity).or_insert(0usize) += 1;
            }
            assert_eq!(per_id.len(), 2);
            assert!(per_id.values().all(|&c| c == 4));
        }
    }

    #[test]
    fn small_identity_duplicates_via_replacement() {
        let train = train_set(&[(0, 2), (1, 2)]);
        let plan = BatchPlan { p: 2, k: 4 };
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let batches = epoch_batches(&train, &plan, &mut rng).unwrap();
        let batch = &batches[0];
        // Each identity has 2 images but contributes 4 slots, so duplicates
        // must appear.
        let mut seen = std::collections::HashMap::new();
        for &i in batch {
            *seen.entry(i).or_insert(0usize) += 1;
        }
        assert!(seen.values().any(|&c| c > 1));
    }

    #[test]
    fn rich_identity_draws_without_replacement() {
        let train = train_set(&[(0, 6), (1, 6)]);
        let plan = BatchPlan { p: 2, k: 4 };
        for seed in 0..20 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let batches = epoch_batches(&train, &plan, &mut rng).unwrap();
            for batch in &batches {
                let mut sorted = batch.clone();
                sorted.sort_unstable();
                sorted.dedup();
                assert_eq!(sorted.len(), batch.len(), "duplicate despite 6 >= 4 images");
            }
        }
    }

    #[test]
    fn every_identity_appears_when_p_divides_count() {
        let train = train_set(&[(0, 3), (1, 3), (2, 3), (3, 3)]);
        let plan = BatchPlan { p: 2, k: 2 };
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let batches = epoch_batches(&train, &plan, &mut rng).unwrap();
        assert_eq!(batches.len(), 2);
        let mut seen = std::collections::HashSet::new();
        for batch in &batches {
            for &i in batch {
                seen.insert(train[i].identity);
            }
        }
        assert_eq!(seen.len(), 4);
    }

    #[test]
    fn too_few_identities_rejected() {
        let train = train_set(&[(0, 4)]);
        let plan = BatchPlan { p: 2, k: 2 };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(epoch_batches(&train, &plan, &mut rng).is_err());
    }

    #[test]
    fn degenerate_plan_rejected() {
        let train = train_set(&[(0, 4), (1, 4)]);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(epoch_batches(&train, &BatchPlan { p: 1, k: 4 }, &mut rng).is_err());
        assert!(epoch_batches(&train, &BatchPlan { p: 2, k: 1 }, &mut rng).is_err());
    }

    #[test]
    fn seed_determines_the_epoch() {
        let train = train_set(&[(0, 5), (1, 5), (2, 5), (3, 5)]);
        let plan = BatchPlan { p: 2, k: 3 };
        let a = epoch_batches(&train, &plan, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        let b = epoch_batches(&train, &plan, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        assert_eq!(a, b);
    }
}
