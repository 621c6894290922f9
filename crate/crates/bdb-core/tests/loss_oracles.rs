//! Brute-force oracle checks for the loss functions. Each oracle recomputes
//! the loss from the mathematical definition with plain loops and naive
//! distance arithmetic, independently of the tensor engine.

use bdb_core::losses::{
    batch_hard_soft_margin_triplet, lifted_structure_loss, softmax_ce, BatchLabels,
};
use bdb_core::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

fn naive_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}

fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

fn random_batch(seed: u64) -> (Vec<Vec<f64>>, Vec<usize>, usize, usize, usize) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let p = rng.random_range(2..=5);
    let k = rng.random_range(2..=4);
    let d = rng.random_range(2..=8);
    let labels: Vec<usize> = (0..p).flat_map(|id| std::iter::repeat_n(id * 3 + 1, k)).collect();
    let rows: Vec<Vec<f64>> = (0..p * k)
        .map(|_| (0..d).map(|_| rng.sample::<f64, _>(StandardNormal)).collect())
        .collect();
    (rows, labels, p, k, d)
}

fn to_tensor(rows: &[Vec<f64>]) -> Tensor {
    let d = rows[0].len();
    Tensor::constant(rows.concat(), &[rows.len(), d]).unwrap()
}

/// Triple loop: per anchor, hardest (max-distance) positive and hardest
/// (min-distance) negative, softplus of the gap, summed.
fn oracle_triplet(rows: &[Vec<f64>], labels: &[usize]) -> f64 {
    let n = rows.len();
    let mut total = 0.0;
    for a in 0..n {
        let mut hardest_pos = f64::NEG_INFINITY;
        let mut hardest_neg = f64::INFINITY;
        for b in 0..n {
            let d = naive_dist(&rows[a], &rows[b]);
            if labels[b] == labels[a] {
                hardest_pos = hardest_pos.max(d);
            } else {
                hardest_neg = hardest_neg.min(d);
            }
        }
        total += softplus(hardest_pos - hardest_neg);
    }
    total
}

#[test]
fn triplet_matches_triple_loop_oracle_on_50_batches() {
    for seed in 0..50 {
        let (rows, labels, p, k, d) = random_batch(seed);
        let feats = to_tensor(&rows);
        let got = batch_hard_soft_margin_triplet(&feats, &BatchLabels::new(labels.clone()))
            .unwrap()
            .item()
            .unwrap();
        let want = oracle_triplet(&rows, &labels);
        assert!(
            (got - want).abs() < 1e-10,
            "seed {} (P={},K={},D={}): {} vs oracle {}",
            seed,
            p,
            k,
            d,
            got,
            want
        );
    }
}

#[test]
fn all_identical_embeddings_give_exactly_n_ln2() {
    // Every distance is 0, so each anchor contributes softplus(0) = ln 2.
    for (p, k) in [(2, 2), (3, 3), (4, 2)] {
        let n = p * k;
        let rows: Vec<Vec<f64>> = vec![vec![0.7, -0.2, 1.5]; n];
        let labels: Vec<usize> = (0..p).flat_map(|id| std::iter::repeat_n(id, k)).collect();
        let got = batch_hard_soft_margin_triplet(&to_tensor(&rows), &BatchLabels::new(labels))
            .unwrap()
            .item()
            .unwrap();
        assert_eq!(got, n as f64 * std::f64::consts::LN_2, "N = {}", n);
    }
}

/// Pairwise brute force over unordered positive pairs (i < j):
/// J_ij = log(sum_neg(i) e^{m-D_ik} + sum_neg(j) e^{m-D_jl}) + D_ij,
/// loss = sum max(0, J)^2 / (2 |P|).
fn oracle_lifted(rows: &[Vec<f64>], labels: &[usize], margin: f64) -> f64 {
    let n = rows.len();
    let mut total = 0.0;
    let mut pairs = 0usize;
    for i in 0..n {
        for j in i + 1..n {
            if labels[i] != labels[j] {
                continue;
            }
            pairs += 1;
            let mut neg_sum = 0.0;
            for k in 0..n {
                if labels[k] != labels[i] {
                    neg_sum += (margin - naive_dist(&rows[i], &rows[k])).exp();
                }
                if labels[k] != labels[j] {
                    neg_sum += (margin - naive_dist(&rows[j], &rows[k])).exp();
                }
            }
            let j_ij = neg_sum.ln() + naive_dist(&rows[i], &rows[j]);
            total += j_ij.max(0.0).powi(2);
        }
    }
    total / (2.0 * pairs as f64)
}

#[test]
fn lifted_structure_matches_brute_force_on_50_batches() {
    for seed in 100..150 {
        let (rows, labels, p, k, d) = random_batch(seed);
        let feats = to_tensor(&rows);
        let margin = 1.0;
        let got = lifted_structure_loss(&feats, &BatchLabels::new(labels.clone()), margin)
            .unwrap()
            .item()
            .unwrap();
        let want = oracle_lifted(&rows, &labels, margin);
        assert!(
            (got - want).abs() < 1e-10,
            "seed {} (P={},K={},D={}): {} vs oracle {}",
            seed,
            p,
            k,
            d,
            got,
            want
        );
    }
}

/// Direct recomputation without the max-shift trick: mean over rows of
/// -log(exp(logit_label) / sum exp(logits)).
fn oracle_softmax_ce(logits: &[Vec<f64>], labels: &[usize]) -> f64 {
    let n = logits.len();
    let mut total = 0.0;
    for (row, &label) in logits.iter().zip(labels) {
        let denom: f64 = row.iter().map(|v| v.exp()).sum();
        total += -(row[label].exp() / denom).ln();
    }
    total / n as f64
}

#[test]
fn softmax_ce_matches_unshifted_recomputation() {
    for seed in 0..50 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = rng.random_range(2..=8);
        let c = rng.random_range(2..=6);
        let rows: Vec<Vec<f64>> = (0..n)
            .map(|_| (0..c).map(|_| rng.random_range(-4.0..4.0)).collect())
            .collect();
        let labels: Vec<usize> = (0..n).map(|_| rng.random_range(0..c)).collect();
        let got = softmax_ce(&to_tensor(&rows), &labels).unwrap().item().unwrap();
        let want = oracle_softmax_ce(&rows, &labels);
        assert!(
            (got - want).abs() < 1e-12,
            "seed {}: {} vs oracle {}",
            seed,
            got,
            want
        );
    }
}
