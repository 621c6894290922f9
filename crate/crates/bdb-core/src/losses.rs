//! Metric-learning objectives: batch-hard soft-margin triplet, softmax
//! cross-entropy, and two alternative embedding losses (lifted structure,
//! distance-weighted margin) used for comparisons.

use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Per-sample identity labels for one batch. The sampler produces batches of
/// P distinct identities with exactly K instances each; the losses themselves
/// only need every present identity at least twice.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BatchLabels {
    identity: Vec<usize>,
}

impl BatchLabels {
    pub fn new(identity: Vec<usize>) -> Self {
        Self { identity }
    }

    pub fn len(&self) -> usize {
        self.identity.len()
    }

    pub fn is_empty(&self) -> bool {
        self.identity.is_empty()
    }

    pub fn ids(&self) -> &[usize] {
        &self.identity
    }

    /// Counts per distinct identity, in first-appearance order.
    fn id_counts(&self) -> Vec<(usize, usize)> {
        let mut counts: Vec<(usize, usize)> = Vec::new();
        for &id in &self.identity {
            match counts.iter_mut().find(|(i, _)| *i == id) {
                Some((_, c)) => *c += 1,
                None => counts.push((id, 1)),
            }
        }
        counts
    }

    /// Metric losses need at least two identities and no singleton identity,
    /// otherwise some anchor has no positive or no negative.
    pub fn validate_for_metric_loss(&self) -> Result<()> {
        let counts = self.id_counts();
        if counts.len() < 2 {
            return Err(Error::BatchComposition(format!(
                "metric loss needs at least 2 identities, batch has {}",
                counts.len()
            )));
        }
        if let Some((id, c)) = counts.iter().find(|(_, c)| *c < 2) {
            return Err(Error::BatchComposition(format!(
                "identity {} has only {} sample(s); every identity needs at least 2",
                id, c
            )));
        }
        Ok(())
    }

    /// Checks the P x K layout: every identity appears exactly K times.
    /// Returns (P, K).
    pub fn validate_pk(&self) -> Result<(usize, usize)> {
        let counts = self.id_counts();
        if counts.is_empty() {
            return Err(Error::BatchComposition("empty batch".into()));
        }
        let k = counts[0].1;
        if let Some((id, c)) = counts.iter().find(|(_, c)| *c != k) {
            return Err(Error::BatchComposition(format!(
                "identity {} has {} samples, expected K={}",
                id, c, k
            )));
        }
        Ok((counts.len(), k))
    }

    /// N x N constant with 1 where the two samples share an identity
    /// (diagonal included).
    fn same_id_mask(&self) -> Vec<f64> {
        let n = self.identity.len();
        let mut m = vec![0.0; n * n];
        for i in 0..n {
            for j in 0..n {
                if self.identity[i] == self.identity[j] {
                    m[i * n + j] = 1.0;
                }
            }
        }
        m
    }
}

/// Euclidean distance matrix D[i][j] = |x_i - x_j| for rows of an `[N, D]`
/// tensor. Built from squared norms and the Gram matrix; the square root
/// keeps exact zeros on the diagonal while its gradient is guarded near 0.
pub fn pairwise_euclidean(x: &Tensor) -> Result<Tensor> {
    let shape = x.shape();
    if shape.len() != 2 || shape[0] == 0 {
        return Err(Error::Dimension(format!(
            "pairwise_euclidean needs a nonempty [N, D] tensor, got {:?}",
            shape
        )));
    }
    let n = shape[0];
    let sq = x.mul(x)?.sum_axes(&[1])?; // [N]
    let col = sq.reshape(&[n, 1])?.expand_axis(1, n)?; // [N, N], row i = |x_i|^2
    let row = sq.reshape(&[1, n])?.expand_axis(0, n)?; // [N, N], col j = |x_j|^2
    let gram = x.matmul(&x.transpose()?)?;
    let d2 = col.add(&row)?.sub(&gram.mul_scalar(2.0))?;
    Ok(d2.sqrt_eps(1e-12))
}

/// Batch-hard triplet loss with a soft margin: per anchor, the hardest
/// positive is the farthest same-identity sample and the hardest negative the
/// closest different-identity sample; the per-anchor term is
/// softplus(hardpos - hardneg) and the batch loss is the sum over anchors.
pub fn batch_hard_soft_margin_triplet(feats: &Tensor, labels: &BatchLabels) -> Result<Tensor> {
    let n = labels.len();
    if feats.shape().first() != Some(&n) {
        return Err(Error::Dimension(format!(
            "feature rows {:?} do not match {} labels",
            feats.shape(),
            n
        )));
    }
    labels.validate_for_metric_loss()?;

    let d = pairwise_euclidean(feats)?;
    let same = Tensor::constant(labels.same_id_mask(), &[n, n])?;

    // Distances are nonnegative, so zeroing different-identity entries leaves
    // the rowwise max on the hardest positive.
    let hardest_pos = d.mul(&same)?.max_axes(&[1])?;

    // For the hardest negative, push same-identity entries above every real
    // distance, then take min = -max(-x).
    let big = d.data().iter().cloned().fold(0.0_f64, f64::max) + 1.0;
    let shifted = d.add(&Tensor::constant(
        labels.same_id_mask().iter().map(|v| v * big).collect(),
        &[n, n],
    )?)?;
    let hardest_neg = shifted.mul_scalar(-1.0).max_axes(&[1])?.mul_scalar(-1.0);

    hardest_pos.sub(&hardest_neg)?.softplus().sum_all()
}

/// Mean negative log-likelihood of integer `labels` under row-softmax of
/// `logits`. The detached rowwise max shift makes both the value and the
/// gradient exact: logsumexp(x) == m + logsumexp(x - m) for any constant m.
pub fn softmax_ce(logits: &Tensor, labels: &[usize]) -> Result<Tensor> {
    let shape = logits.shape();
    if shape.len() != 2 || shape[0] != labels.len() || shape[0] == 0 {
        return Err(Error::Dimension(format!(
            "softmax_ce needs [N, C] logits matching {} labels, got {:?}",
            labels.len(),
            shape
        )));
    }
    let (n, c) = (shape[0], shape[1]);
    if let Some(&bad) = labels.iter().find(|&&l| l >= c) {
        return Err(Error::Label(format!(
            "label {} out of range for {} classes",
            bad, c
        )));
    }
    let row_max = logits.max_axes(&[1])?.detach().reshape(&[n, 1])?.expand_axis(1, c)?;
    let shifted = logits.sub(&row_max)?;
    let log_norm = shifted
        .exp()
        .sum_axes(&[1])?
        .log()
        .reshape(&[n, 1])?
        .expand_axis(1, c)?;
    let log_probs = shifted.sub(&log_norm)?;
    let mut one_hot = vec![0.0; n * c];
    for (i, &l) in labels.iter().enumerate() {
        one_hot[i * c + l] = 1.0;
    }
    let picked = log_probs.mul(&Tensor::constant(one_hot, &[n, c])?)?;
    Ok(picked.sum_all()?.mul_scalar(-1.0 / n as f64))
}

/// Lifted-structure objective: for every unordered positive pair (i, j),
/// J = log( sum_k exp(m - D_ik) + sum_l exp(m - D_jl) ) + D_ij over the
/// negatives k of i and l of j, and the loss is sum max(0, J)^2 / (2 |P|).
pub fn lifted_structure_loss(feats: &Tensor, labels: &BatchLabels, margin: f64) -> Result<Tensor> {
    let n = labels.len();
    if feats.shape().first() != Some(&n) {
        return Err(Error::Dimension(format!(
            "feature rows {:?} do not match {} labels",
            feats.shape(),
            n
        )));
    }
    labels.validate_for_metric_loss()?;

    let d = pairwise_euclidean(feats)?;
    let same = labels.same_id_mask();
    let diff: Vec<f64> = same.iter().map(|v| 1.0 - v).collect();

    // Per-row sum over negatives of exp(margin - distance).
    let neg_mask = Tensor::constant(diff, &[n, n])?;
    let exp_term = d.mul_scalar(-1.0).add_scalar(margin).exp().mul(&neg_mask)?;
    let row_neg = exp_term.sum_axes(&[1])?; // [N]
    let col = row_neg.reshape(&[n, 1])?.expand_axis(1, n)?;
    let row = row_neg.reshape(&[1, n])?.expand_axis(0, n)?;
    // The additive floor keeps log and its gradient finite if every
    // exponential underflows (negatives extremely far away).
    let j = col.add(&row)?.add_scalar(1e-300).log().add(&d)?;
    let hinged = j.relu();
    let sq = hinged.mul(&hinged)?;

    // Unordered positive pairs: i < j with equal identity.
    let mut pos = vec![0.0; n * n];
    let mut pair_count = 0usize;
    for i in 0..n {
        for jx in (i + 1)..n {
            if same[i * n + jx] == 1.0 {
                pos[i * n + jx] = 1.0;
                pair_count += 1;
            }
        }
    }
    let masked = sq.mul(&Tensor::constant(pos, &[n, n])?)?;
    Ok(masked.sum_all()?.mul_scalar(1.0 / (2.0 * pair_count as f64)))
}

/// Hyper-parameters of the distance-weighted margin loss. Defaults follow the
/// cited method: margin width alpha, boundary beta, and the distance band the
/// sampling density is evaluated on.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MarginParams {
    pub alpha: f64,
    pub beta: f64,
    /// Distances are clamped into [clip_lo, clip_hi] before evaluating the
    /// sampling density (the density formula assumes unit-sphere embeddings
    /// and degenerates outside that band).
    pub clip_lo: f64,
    pub clip_hi: f64,
    /// Negatives farther than this get zero sampling weight unless that
    /// empties the candidate set.
    pub nonzero_loss_cutoff: f64,
}

impl Default for MarginParams {
    fn default() -> Self {
        Self {
            alpha: 0.2,
            beta: 1.2,
            clip_lo: 0.5,
            clip_hi: 1.99,
            nonzero_loss_cutoff: 1.4,
        }
    }
}

/// Margin loss with distance-weighted negative sampling: per anchor, the
/// positive is the hardest same-identity sample, the negative is drawn with
/// probability proportional to the clamped inverse of the pairwise-distance
/// density q(d) ∝ d^(D-2) (1 - d^2/4)^((D-3)/2), and the per-anchor term is
/// max(0, alpha + d_pos - beta) + max(0, alpha - d_neg + beta), summed.
pub fn weighted_margin_loss<R: Rng>(
    feats: &Tensor,
    labels: &BatchLabels,
    params: &MarginParams,
    rng: &mut R,
) -> Result<Tensor> {
    let n = labels.len();
    if feats.shape().first() != Some(&n) {
        return Err(Error::Dimension(format!(
            "feature rows {:?} do not match {} labels",
            feats.shape(),
            n
        )));
    }
    labels.validate_for_metric_loss()?;
    let dim = feats.shape()[1] as f64;

    let d = pairwise_euclidean(feats)?;
    let dm = d.data().to_vec();
    let ids = labels.ids();

    // Sampling weights come from detached distances; only the selected
    // entries stay on the tape.
    let mut chosen_neg = Vec::with_capacity(n);
    for i in 0..n {
        let candidates: Vec<usize> = (0..n).filter(|&j| ids[j] != ids[i]).collect();
        let log_w = |j: usize| -> f64 {
            let dist = dm[i * n + j].clamp(params.clip_lo, params.clip_hi);
            // log of 1/q(d) for q(d) ∝ d^(D-2) (1 - d^2/4)^((D-3)/2)
            (2.0 - dim) * dist.ln() - (dim - 3.0) / 2.0 * (1.0 - dist * dist / 4.0).ln()
        };
        let in_band: Vec<usize> = candidates
            .iter()
            .copied()
            .filter(|&j| dm[i * n + j] < params.nonzero_loss_cutoff)
            .collect();
        let pool = if in_band.is_empty() { &candidates } else { &in_band };
        let max_lw = pool.iter().map(|&j| log_w(j)).fold(f64::NEG_INFINITY, f64::max);
        let weights: Vec<f64> = pool.iter().map(|&j| (log_w(j) - max_lw).exp()).collect();
        let total: f64 = weights.iter().sum();
        let mut u = rng.random::<f64>() * total;
        let mut pick = pool[pool.len() - 1];
        for (w, &j) in weights.iter().zip(pool.iter()) {
            if u < *w {
                pick = j;
                break;
            }
            u -= *w;
        }
        chosen_neg.push(pick);
    }

    let same = Tensor::constant(labels.same_id_mask(), &[n, n])?;
    let hardest_pos = d.mul(&same)?.max_axes(&[1])?; // [N]

    // Gather the sampled negative distance per anchor through the tape.
    let mut neg_rows = Vec::with_capacity(n);
    for (i, &j) in chosen_neg.iter().enumerate() {
        neg_rows.push(d.narrow(0, i, 1)?.narrow(1, j, 1)?.reshape(&[1])?);
    }
    let mut d_neg = neg_rows[0].clone();
    for r in &neg_rows[1..] {
        d_neg = Tensor::concat(&d_neg, r, 0)?;
    }

    let pos_term = hardest_pos.add_scalar(params.alpha - params.beta).relu();
    let neg_term = d_neg.mul_scalar(-1.0).add_scalar(params.alpha + params.beta).relu();
    pos_term.add(&neg_term)?.sum_all()
}

/// A total loss together with its named parts. Component order is the
/// caller's insertion order, kept stable for logging.
pub struct LossValue {
    pub total: Tensor,
    pub components: Vec<(String, Tensor)>,
}

/// total = unweighted sum of the named scalar components.
pub fn combine(components: Vec<(String, Tensor)>) -> Result<LossValue> {
    if components.is_empty() {
        return Err(Error::Spec("combine needs at least one loss component".into()));
    }
    for (name, t) in &components {
        if t.numel() != 1 {
            return Err(Error::Dimension(format!(
                "loss component {} is not scalar: shape {:?}",
                name,
                t.shape()
            )));
        }
    }
    let mut total = components[0].1.clone();
    for (_, t) in &components[1..] {
        total = total.add(t)?;
    }
    Ok(LossValue { total, components })
}
