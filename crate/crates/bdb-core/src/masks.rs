//! Structured feature-erasing masks.
//!
//! All generators are pure functions of (dimensions, spec, rng) and return a
//! binary pattern plus the rule describing how it broadcasts over a
//! `[B, C, H, W]` feature tensor. The flagship variant zeroes the same
//! spatial rectangle in every feature map of the batch; the others exist for
//! ablation comparisons. Kept units are never rescaled, and masks are only
//! meant for training-time forwards: evaluation runs unmasked.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DropKind {
    BatchDropBlock,
    DropBlock,
    Dropout,
    SpatialDropout,
    BatchDropout,
    None,
}

/// What to erase. Block kinds read `r_h`/`r_w` and ignore `p`; dropout kinds
/// read `p` and ignore the ratios.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DropSpec {
    pub kind: DropKind,
    #[serde(default)]
    pub r_h: f64,
    #[serde(default)]
    pub r_w: f64,
    #[serde(default)]
    pub p: f64,
}

impl DropSpec {
    pub fn batch_drop_block(r_h: f64, r_w: f64) -> Self {
        Self {
            kind: DropKind::BatchDropBlock,
            r_h,
            r_w,
            p: 0.0,
        }
    }

    pub fn none() -> Self {
        Self {
            kind: DropKind::None,
            r_h: 0.0,
            r_w: 0.0,
            p: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.r_h) || !(0.0..=1.0).contains(&self.r_w) {
            return Err(Error::Spec(format!(
                "erase ratios must lie in [0,1], got r_h={} r_w={}",
                self.r_h, self.r_w
            )));
        }
        if !(0.0..1.0).contains(&self.p) {
            return Err(Error::Spec(format!(
                "drop probability must lie in [0,1), got p={}",
                self.p
            )));
        }
        Ok(())
    }

    fn expect_kind(&self, kind: DropKind, op: &str) -> Result<()> {
        self.validate()?;
        if self.kind != kind {
            return Err(Error::Spec(format!(
                "{} needs kind {:?}, spec has {:?}",
                op, kind, self.kind
            )));
        }
        Ok(())
    }
}

/// How a pattern maps onto `[B, C, H, W]`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Broadcast {
    /// Pattern `[H, W]`, identical for every (batch, channel) slice.
    SharedOverBatchAndChannel,
    /// Pattern `[B, H, W]`, one spatial mask per sample, shared over channels.
    PerSample,
    /// Pattern `[B, C]`, a zero erases the whole spatial extent of a channel.
    PerChannel,
    /// Pattern `[B, C, H, W]`, fully independent entries.
    PerElement,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DropMask {
    /// Binary values, stored as 0.0 / 1.0 for direct multiplication.
    pub pattern: Vec<f64>,
    pub shape: Vec<usize>,
    pub broadcast: Broadcast,
}

impl DropMask {
    pub fn zeros_count(&self) -> usize {
        self.pattern.iter().filter(|&&v| v == 0.0).count()
    }
}

/// dh = max(1, floor(r * extent)) when r > 0, else 0. The floor keeps the
/// block inside the map; the minimum of 1 keeps small maps meaningful.
fn block_len(r: f64, extent: usize) -> usize {
    if r > 0.0 {
        ((r * extent as f64).floor() as usize).max(1)
    } else {
        0
    }
}

fn rect_pattern<R: Rng>(h: usize, w: usize, dh: usize, dw: usize, rng: &mut R) -> Vec<f64> {
    let mut pattern = vec![1.0; h * w];
    if dh == 0 || dw == 0 {
        return pattern;
    }
    // Top-left corner uniform over all valid placements; row drawn first.
    let top = rng.random_range(0..h - dh + 1);
    let left = rng.random_range(0..w - dw + 1);
    for r in top..top + dh {
        for c in left..left + dw {
            pattern[r * w + c] = 0.0;
        }
    }
    pattern
}

/// One dh x dw rectangle of zeros in an `[H, W]` pattern that every image in
/// the batch shares.
pub fn batch_drop_block_mask<R: Rng>(
    h: usize,
    w: usize,
    spec: &DropSpec,
    rng: &mut R,
) -> Result<DropMask> {
    spec.expect_kind(DropKind::BatchDropBlock, "batch_drop_block_mask")?;
    if h == 0 || w == 0 {
        return Err(Error::Dimension(format!("mask needs h,w >= 1, got {}x{}", h, w)));
    }
    let dh = block_len(spec.r_h, h);
    let dw = block_len(spec.r_w, w);
    Ok(DropMask {
        pattern: rect_pattern(h, w, dh, dw, rng),
        shape: vec![h, w],
        broadcast: Broadcast::SharedOverBatchAndChannel,
    })
}

/// B independent rectangles of the same size, one per sample.
pub fn drop_block_mask<R: Rng>(
    b: usize,
    h: usize,
    w: usize,
    spec: &DropSpec,
    rng: &mut R,
) -> Result<DropMask> {
    spec.expect_kind(DropKind::DropBlock, "drop_block_mask")?;
    if b == 0 || h == 0 || w == 0 {
        return Err(Error::Dimension(format!(
            "mask needs b,h,w >= 1, got b={} {}x{}",
            b, h, w
        )));
    }
    let dh = block_len(spec.r_h, h);
    let dw = block_len(spec.r_w, w);
    let mut pattern = Vec::with_capacity(b * h * w);
    for _ in 0..b {
        pattern.extend(rect_pattern(h, w, dh, dw, rng));
    }
    Ok(DropMask {
        pattern,
        shape: vec![b, h, w],
        broadcast: Broadcast::PerSample,
    })
}

fn bernoulli_keep<R: Rng>(n: usize, p: f64, rng: &mut R) -> Vec<f64> {
    (0..n)
        .map(|_| if rng.random_bool(1.0 - p) { 1.0 } else { 0.0 })
        .collect()
}

/// i.i.d. Bernoulli(1-p) keep decisions per element.
pub fn dropout_mask<R: Rng>(
    b: usize,
    c: usize,
    h: usize,
    w: usize,
    spec: &DropSpec,
    rng: &mut R,
) -> Result<DropMask> {
    spec.expect_kind(DropKind::Dropout, "dropout_mask")?;
    Ok(DropMask {
        pattern: bernoulli_keep(b * c * h * w, spec.p, rng),
        shape: vec![b, c, h, w],
        broadcast: Broadcast::PerElement,
    })
}

/// Bernoulli(1-p) keep decisions per (sample, channel); a dropped channel is
/// erased over its whole spatial extent.
pub fn spatial_dropout_mask<R: Rng>(
    b: usize,
    c: usize,
    spec: &DropSpec,
    rng: &mut R,
) -> Result<DropMask> {
    spec.expect_kind(DropKind::SpatialDropout, "spatial_dropout_mask")?;
    Ok(DropMask {
        pattern: bernoulli_keep(b * c, spec.p, rng),
        shape: vec![b, c],
        broadcast: Broadcast::PerChannel,
    })
}

/// One `[H, W]` pattern of i.i.d. Bernoulli(1-p) entries shared by the whole
/// batch: isolated positions rather than a contiguous block.
pub fn batch_dropout_mask<R: Rng>(
    h: usize,
    w: usize,
    spec: &DropSpec,
    rng: &mut R,
) -> Result<DropMask> {
    spec.expect_kind(DropKind::BatchDropout, "batch_dropout_mask")?;
    Ok(DropMask {
        pattern: bernoulli_keep(h * w, spec.p, rng),
        shape: vec![h, w],
        broadcast: Broadcast::SharedOverBatchAndChannel,
    })
}

/// Dispatches on `spec.kind` for a `[B, C, H, W]` activation; `None` kind
/// yields no mask.
pub fn make_mask<R: Rng>(
    b: usize,
    c: usize,
    h: usize,
    w: usize,
    spec: &DropSpec,
    rng: &mut R,
) -> Result<Option<DropMask>> {
    match spec.kind {
        DropKind::BatchDropBlock => batch_drop_block_mask(h, w, spec, rng).map(Some),
        DropKind::DropBlock => drop_block_mask(b, h, w, spec, rng).map(Some),
        DropKind::Dropout => dropout_mask(b, c, h, w, spec, rng).map(Some),
        DropKind::SpatialDropout => spatial_dropout_mask(b, c, spec, rng).map(Some),
        DropKind::BatchDropout => batch_dropout_mask(h, w, spec, rng).map(Some),
        DropKind::None => {
            spec.validate()?;
            Ok(None)
        }
    }
}

/// Elementwise product of a `[B, C, H, W]` tensor with the broadcast mask.
/// Kept units pass through unscaled; gradient flows only through kept units.
pub fn apply_mask(t: &Tensor, m: &DropMask) -> Result<Tensor> {
    let shape = t.shape();
    if shape.len() != 4 {
        return Err(Error::Dimension(format!(
            "apply_mask needs a [B, C, H, W] tensor, got {:?}",
            shape
        )));
    }
    let (b, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
    let expected: &[usize] = match m.broadcast {
        Broadcast::SharedOverBatchAndChannel => &[h, w],
        Broadcast::PerSample => &[b, h, w],
        Broadcast::PerChannel => &[b, c],
        Broadcast::PerElement => &[b, c, h, w],
    };
    if m.shape != expected {
        return Err(Error::Dimension(format!(
            "mask shape {:?} does not broadcast onto {:?} under {:?}",
            m.shape, shape, m.broadcast
        )));
    }
    let hw = h * w;
    let mut full = vec![0.0; b * c * hw];
    for bi in 0..b {
        for ci in 0..c {
            let base = (bi * c + ci) * hw;
            match m.broadcast {
                Broadcast::SharedOverBatchAndChannel => {
                    full[base..base + hw].copy_from_slice(&m.pattern);
                }
                Broadcast::PerSample => {
                    full[base..base + hw].copy_from_slice(&m.pattern[bi * hw..(bi + 1) * hw]);
                }
                Broadcast::PerChannel => {
                    let v = m.pattern[bi * c + ci];
                    full[base..base + hw].fill(v);
                }
                Broadcast::PerElement => {
                    full[base..base + hw].copy_from_slice(&m.pattern[base..base + hw]);
                }
            }
        }
    }
    let mask_t = Tensor::constant(full, shape)?;
    t.mul(&mask_t)
}
