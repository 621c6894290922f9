//! Batch normalization over the batch axis of a `[B, F]` tensor, as a single
//! fused tape op with a hand-derived backward rule.

use serde::{Deserialize, Serialize};

use super::Tensor;
use crate::error::{Error, Result};

/// Per-feature running statistics carried across training steps and used to
/// normalize at evaluation time.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct RunningStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

impl RunningStats {
    /// Fresh statistics: mean 0, variance 1.
    pub fn new(features: usize) -> Self {
        Self {
            mean: vec![0.0; features],
            var: vec![1.0; features],
        }
    }

    pub fn features(&self) -> usize {
        self.mean.len()
    }
}

#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum BnMode {
    Train,
    Eval,
}

/// y = gamma * (x - mean) / sqrt(var + eps) + beta, columnwise.
///
/// Train mode normalizes with the biased batch variance, then folds the batch
/// statistics into `stats` as
/// `running = (1 - momentum) * running + momentum * batch`, where the variance
/// contribution is the unbiased estimate. Eval mode normalizes with `stats`
/// and leaves them untouched. Train mode needs B >= 2; otherwise the batch
/// variance is degenerate.
pub fn batch_norm(
    x: &Tensor,
    gamma: &Tensor,
    beta: &Tensor,
    stats: &mut RunningStats,
    mode: BnMode,
    momentum: f64,
    eps: f64,
) -> Result<Tensor> {
    let shape = x.shape();
    if shape.len() != 2 {
        return Err(Error::Dimension(format!(
            "batch_norm needs a [B, F] input, got {:?}",
            shape
        )));
    }
    let (b, f) = (shape[0], shape[1]);
    if gamma.shape() != [f] || beta.shape() != [f] || stats.features() != f {
        return Err(Error::Dimension(format!(
            "batch_norm parameter width mismatch: input F={}, gamma {:?}, beta {:?}, stats F={}",
            f,
            gamma.shape(),
            beta.shape(),
            stats.features()
        )));
    }
    if mode == BnMode::Train && b < 2 {
        return Err(Error::BatchSize(format!(
            "batch_norm in train mode needs at least 2 rows, got {}",
            b
        )));
    }

    let xd = x.data();
    let (mean, var) = match mode {
        BnMode::Train => {
            let mut mean = vec![0.0; f];
            for i in 0..b {
                for j in 0..f {
                    mean[j] += xd[i * f + j];
                }
            }
            for m in &mut mean {
                *m /= b as f64;
            }
            let mut var = vec![0.0; f];
            for i in 0..b {
                for j in 0..f {
                    let d = xd[i * f + j] - mean[j];
                    var[j] += d * d;
                }
            }
            for v in &mut var {
                *v /= b as f64;
            }
            // Running update uses the unbiased variance, matching the usual
            // framework convention so checkpoints transfer cleanly.
            let unbias = b as f64 / (b as f64 - 1.0);
            for j in 0..f {
                stats.mean[j] = (1.0 - momentum) * stats.mean[j] + momentum * mean[j];
                stats.var[j] = (1.0 - momentum) * stats.var[j] + momentum * var[j] * unbias;
            }
            (mean, var)
        }
        BnMode::Eval => (stats.mean.clone(), stats.var.clone()),
    };

    let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
    let gd = gamma.data();
    let bd = beta.data();
    let mut xhat = vec![0.0; b * f];
    let mut out = vec![0.0; b * f];
    for i in 0..b {
        for j in 0..f {
            let h = (xd[i * f + j] - mean[j]) * inv_std[j];
            xhat[i * f + j] = h;
            out[i * f + j] = gd[j] * h + bd[j];
        }
    }

    let (xc, gc) = (x.clone(), gamma.clone());
    let beta_req = beta.requires_grad();
    let rule = move |g: &[f64]| -> Vec<Option<Vec<f64>>> {
        let gd = gc.data();
        // Column sums of g and of g * xhat drive every term below.
        let mut sum_g = vec![0.0; f];
        let mut sum_gh = vec![0.0; f];
        for i in 0..b {
            for j in 0..f {
                sum_g[j] += g[i * f + j];
                sum_gh[j] += g[i * f + j] * xhat[i * f + j];
            }
        }
        let gx = if xc.requires_grad() {
            let mut gx = vec![0.0; b * f];
            match mode {
                BnMode::Train => {
                    // dL/dx = gamma * inv_std / B * (B*g - sum_g - xhat * sum_gh)
                    let n = b as f64;
                    for i in 0..b {
                        for j in 0..f {
                            let t = n * g[i * f + j] - sum_g[j] - xhat[i * f + j] * sum_gh[j];
                            gx[i * f + j] = gd[j] * inv_std[j] * t / n;
                        }
                    }
                }
                BnMode::Eval => {
                    // Statistics are constants here.
                    for i in 0..b {
                        for j in 0..f {
                            gx[i * f + j] = g[i * f + j] * gd[j] * inv_std[j];
                        }
                    }
                }
            }
            Some(gx)
        } else {
            None
        };
        let gg = if gc.requires_grad() { Some(sum_gh) } else { None };
        let gb = if beta_req { Some(sum_g) } else { None };
        vec![gx, gg, gb]
    };
    Ok(Tensor::from_op(
        out,
        vec![b, f],
        vec![x.clone(), gamma.clone(), beta.clone()],
        Box::new(rule),
    ))
}
