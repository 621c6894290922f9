//! Two-branch embedding network over a toy patch-grid backbone.
//!
//! The backbone maps `[B, patches, patch_dim]` inputs to a `[B, C, H, W]`
//! feature map with strict locality: position (i, j) depends only on input
//! patch (i, j). The global branch average-pools that map into a compact
//! descriptor; the dropping branch runs a bottleneck block, erases a
//! batch-shared spatial block at train time, and max-pools what survives.
//! At evaluation time the two branch features concatenate into the final
//! descriptor and nothing is erased.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::masks::{apply_mask, make_mask, DropSpec};
use crate::tensor::{batch_norm, BnMode, RunningStats, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PoolKind {
    /// Global max pooling over (H, W).
    Gmp,
    /// Global average pooling over (H, W).
    Gap,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BackboneConfig {
    pub grid_h: usize,
    pub grid_w: usize,
    pub in_patch_dim: usize,
    pub feat_channels: usize,
    pub mixing_blocks: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BranchConfig {
    pub global_reduce_dim: usize,
    pub drop_reduce_dim: usize,
    pub drop_spec: DropSpec,
    /// Pooling on the dropping branch; GAP exists only for the pooling
    /// comparison sweep.
    pub drop_pool: PoolKind,
    pub use_drop_branch: bool,
}

impl Default for BranchConfig {
    fn default() -> Self {
        Self {
            global_reduce_dim: 512,
            drop_reduce_dim: 1024,
            drop_spec: DropSpec::batch_drop_block(0.3, 1.0),
            drop_pool: PoolKind::Gmp,
            use_drop_branch: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub backbone: BackboneConfig,
    pub branches: BranchConfig,
    pub num_classes: usize,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let b = &self.backbone;
        if b.grid_h == 0 || b.grid_w == 0 || b.in_patch_dim == 0 || b.feat_channels == 0 {
            return Err(Error::Config(format!(
                "backbone dims must be positive: {:?}",
                b
            )));
        }
        if self.branches.global_reduce_dim == 0 || self.branches.drop_reduce_dim == 0 {
            return Err(Error::Config("branch reduce dims must be positive".into()));
        }
        if self.num_classes == 0 {
            return Err(Error::Config("num_classes must be positive".into()));
        }
        self.branches.drop_spec.validate()
    }

    /// Length of the evaluation descriptor under this config.
    pub fn descriptor_dim(&self) -> usize {
        if self.branches.use_drop_branch {
            self.branches.global_reduce_dim + self.branches.drop_reduce_dim
        } else {
            self.branches.global_reduce_dim
        }
    }
}

/// Fully-connected layer with weight `[in, out]` and bias `[out]`, both
/// initialized uniformly in +-sqrt(1/fan_in).
struct Linear {
    w: Tensor,
    b: Tensor,
}

impl Linear {
    fn new<R: Rng>(in_dim: usize, out_dim: usize, rng: &mut R) -> Self {
        let bound = (1.0 / in_dim as f64).sqrt();
        let draw = |n: usize, rng: &mut R| -> Vec<f64> {
            (0..n).map(|_| rng.random_range(-bound..bound)).collect()
        };
        let w = Tensor::param(draw(in_dim * out_dim, rng), &[in_dim, out_dim]).expect("sized");
        let b = Tensor::param(draw(out_dim, rng), &[out_dim]).expect("sized");
        Self { w, b }
    }

    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let rows = x.shape()[0];
        let out = self.w.shape()[1];
        let bias = self.b.reshape(&[1, out])?.expand_axis(0, rows)?;
        x.matmul(&self.w)?.add(&bias)
    }
}

/// Shared-weight residual channel mixer, applied at one spatial position at a
/// time: y = x + relu(W x + b).
struct ResidualBlock {
    lin: Linear,
}

impl ResidualBlock {
    fn new<R: Rng>(dim: usize, rng: &mut R) -> Self {
        Self {
            lin: Linear::new(dim, dim, rng),
        }
    }

    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        x.add(&self.lin.forward(x)?.relu())
    }
}

struct Backbone {
    cfg: BackboneConfig,
    embed: Linear,
    mixers: Vec<ResidualBlock>,
}

impl Backbone {
    fn new<R: Rng>(cfg: BackboneConfig, rng: &mut R) -> Self {
        let embed = Linear::new(cfg.in_patch_dim, cfg.feat_channels, rng);
        let mixers = (0..cfg.mixing_blocks)
            .map(|_| ResidualBlock::new(cfg.feat_channels, rng))
            .collect();
        Self { cfg, embed, mixers }
    }

    /// `[B, patches, patch_dim]` -> `[B, C, H, W]`. Every op acts on one
    /// position at a time, so locality holds by construction.
    fn forward(&self, images: &Tensor) -> Result<Tensor> {
        let shape = images.shape();
        let patches = self.cfg.grid_h * self.cfg.grid_w;
        if shape.len() != 3 || shape[1] != patches || shape[2] != self.cfg.in_patch_dim {
            return Err(Error::Dimension(format!(
                "backbone expects [B, {}, {}], got {:?}",
                patches, self.cfg.in_patch_dim, shape
            )));
        }
        let b = shape[0];
        let c = self.cfg.feat_channels;
        let flat = images.reshape(&[b * patches, self.cfg.in_patch_dim])?;
        let mut x = self.embed.forward(&flat)?;
        for m in &self.mixers {
            x = m.forward(&x)?;
        }
        x.reshape(&[b, patches, c])?
            .permute(&[0, 2, 1])?
            .reshape(&[b, c, self.cfg.grid_h, self.cfg.grid_w])
    }
}

/// Reduction head shared by both branches: pool -> linear reduce ->
/// batch norm -> ReLU -> feature, plus a linear classifier over train
/// identities.
struct Head {
    reduce: Linear,
    bn_gamma: Tensor,
    bn_beta: Tensor,
    bn_stats: RunningStats,
    cls: Linear,
    pool: PoolKind,
}

const BN_MOMENTUM: f64 = 0.1;
const BN_EPS: f64 = 1e-5;

impl Head {
    fn new<R: Rng>(in_dim: usize, feat_dim: usize, num_classes: usize, pool: PoolKind, rng: &mut R) -> Self {
        Self {
            reduce: Linear::new(in_dim, feat_dim, rng),
            bn_gamma: Tensor::param(vec![1.0; feat_dim], &[feat_dim]).expect("sized"),
            bn_beta: Tensor::param(vec![0.0; feat_dim], &[feat_dim]).expect("sized"),
            bn_stats: RunningStats::new(feat_dim),
            cls: Linear::new(feat_dim, num_classes, rng),
            pool,
        }
    }

    /// Pools a `[B, C, H, W]` map and produces (feat, logits).
    fn forward(&mut self, map: &Tensor, mode: Mode) -> Result<(Tensor, Tensor)> {
        let pooled = match self.pool {
            PoolKind::Gap => map.mean_axes(&[2, 3])?,
            PoolKind::Gmp => map.max_axes(&[2, 3])?,
        };
        let reduced = self.reduce.forward(&pooled)?;
        let bn_mode = match mode {
            Mode::Train => BnMode::Train,
            Mode::Eval => BnMode::Eval,
        };
        let feat = batch_norm(
            &reduced,
            &self.bn_gamma,
            &self.bn_beta,
            &mut self.bn_stats,
            bn_mode,
            BN_MOMENTUM,
            BN_EPS,
        )?
        .relu();
        let logits = self.cls.forward(&feat)?;
        Ok((feat, logits))
    }
}

/// One forward pass's loss inputs and, in eval mode, the retrieval
/// descriptor.
pub struct ModelOutput {
    pub global_feat: Tensor,
    pub global_logits: Tensor,
    pub drop_feat: Option<Tensor>,
    pub drop_logits: Option<Tensor>,
    /// concat(global_feat, drop_feat); filled in eval mode only.
    pub descriptor: Option<Tensor>,
}

pub struct Model {
    pub cfg: ModelConfig,
    backbone: Backbone,
    global: Head,
    drop: Option<(ResidualBlock, Head)>,
}

impl Model {
    /// Layers draw their parameters in a fixed order (backbone, global head,
    /// dropping branch), so a model built without the dropping branch shares
    /// its remaining parameters bit-for-bit with a full model built from the
    /// same seed.
    pub fn new<R: Rng>(cfg: ModelConfig, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        let c = cfg.backbone.feat_channels;
        let backbone = Backbone::new(cfg.backbone.clone(), rng);
        let global = Head::new(c, cfg.branches.global_reduce_dim, cfg.num_classes, PoolKind::Gap, rng);
        let drop = if cfg.branches.use_drop_branch {
            let bottleneck = ResidualBlock::new(c, rng);
            let head = Head::new(c, cfg.branches.drop_reduce_dim, cfg.num_classes, cfg.branches.drop_pool, rng);
            Some((bottleneck, head))
        } else {
            None
        };
        Ok(Self {
            cfg,
            backbone,
            global,
            drop,
        })
    }

    /// Applies a per-position channel map to a `[B, C, H, W]` tensor.
    fn per_position(t: &Tensor, block: &ResidualBlock) -> Result<Tensor> {
        let s = t.shape().to_vec();
        let (b, c, h, w) = (s[0], s[1], s[2], s[3]);
        let flat = t.permute(&[0, 2, 3, 1])?.reshape(&[b * h * w, c])?;
        block
            .forward(&flat)?
            .reshape(&[b, h, w, c])?
            .permute(&[0, 3, 1, 2])
    }

    /// Full forward pass. The RNG is consumed only by the train-mode mask;
    /// eval mode is deterministic and mask-free.
    pub fn forward<R: Rng>(&mut self, images: &Tensor, mode: Mode, rng: &mut R) -> Result<ModelOutput> {
        let map = self.backbone.forward(images)?;
        let (global_feat, global_logits) = self.global.forward(&map, mode)?;

        let (drop_feat, drop_logits) = match self.drop.as_mut() {
            Some((bottleneck, head)) => {
                let refined = Self::per_position(&map, bottleneck)?;
                let masked = match mode {
                    Mode::Train => {
                        let s = refined.shape().to_vec();
                        match make_mask(s[0], s[1], s[2], s[3], &self.cfg.branches.drop_spec, rng)? {
                            Some(m) => apply_mask(&refined, &m)?,
                            None => refined,
                        }
                    }
                    Mode::Eval => refined,
                };
                let (f, l) = head.forward(&masked, mode)?;
                (Some(f), Some(l))
            }
            None => (None, None),
        };

        let descriptor = match mode {
            Mode::Eval => Some(match &drop_feat {
                Some(df) => Tensor::concat(&global_feat, df, 1)?,
                None => global_feat.clone(),
            }),
            Mode::Train => None,
        };

        Ok(ModelOutput {
            global_feat,
            global_logits,
            drop_feat,
            drop_logits,
            descriptor,
        })
    }

    /// Backbone feature map for diagnostics (eval-time energy export).
    pub fn feature_map(&self, images: &Tensor) -> Result<Tensor> {
        self.backbone.forward(images)
    }

    /// Dropping-branch feature map after the bottleneck, before pooling;
    /// falls back to the backbone map when the branch is disabled.
    pub fn drop_branch_map(&self, images: &Tensor) -> Result<Tensor> {
        let map = self.backbone.forward(images)?;
        match &self.drop {
            Some((bottleneck, _)) => Self::per_position(&map, bottleneck),
            None => Ok(map),
        }
    }

    /// Stable (name, tensor) listing of every learnable parameter.
    pub fn named_params(&self) -> Vec<(String, Tensor)> {
        self.param_refs()
            .into_iter()
            .map(|(n, t)| (n, t.clone()))
            .collect()
    }

    fn param_refs(&self) -> Vec<(String, &Tensor)> {
        let mut out: Vec<(String, &Tensor)> = vec![
            ("backbone.embed.w".into(), &self.backbone.embed.w),
            ("backbone.embed.b".into(), &self.backbone.embed.b),
        ];
        for (i, m) in self.backbone.mixers.iter().enumerate() {
            out.push((format!("backbone.mix{}.w", i), &m.lin.w));
            out.push((format!("backbone.mix{}.b", i), &m.lin.b));
        }
        fn head<'a>(prefix: &str, h: &'a Head, out: &mut Vec<(String, &'a Tensor)>) {
            out.push((format!("{}.reduce.w", prefix), &h.reduce.w));
            out.push((format!("{}.reduce.b", prefix), &h.reduce.b));
            out.push((format!("{}.bn.gamma", prefix), &h.bn_gamma));
            out.push((format!("{}.bn.beta", prefix), &h.bn_beta));
            out.push((format!("{}.cls.w", prefix), &h.cls.w));
            out.push((format!("{}.cls.b", prefix), &h.cls.b));
        }
        head("global", &self.global, &mut out);
        if let Some((bottleneck, h)) = &self.drop {
            out.push(("drop.bottleneck.w".into(), &bottleneck.lin.w));
            out.push(("drop.bottleneck.b".into(), &bottleneck.lin.b));
            head("drop", h, &mut out);
        }
        out
    }

    /// Mutable access for the optimizer, same names and order as
    /// `named_params`.
    pub fn param_refs_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut out: Vec<(String, &mut Tensor)> = vec![
            ("backbone.embed.w".into(), &mut self.backbone.embed.w),
            ("backbone.embed.b".into(), &mut self.backbone.embed.b),
        ];
        for (i, m) in self.backbone.mixers.iter_mut().enumerate() {
            out.push((format!("backbone.mix{}.w", i), &mut m.lin.w));
            out.push((format!("backbone.mix{}.b", i), &mut m.lin.b));
        }
        fn head<'a>(prefix: &str, h: &'a mut Head, out: &mut Vec<(String, &'a mut Tensor)>) {
            out.push((format!("{}.reduce.w", prefix), &mut h.reduce.w));
            out.push((format!("{}.reduce.b", prefix), &mut h.reduce.b));
            out.push((format!("{}.bn.gamma", prefix), &mut h.bn_gamma));
            out.push((format!("{}.bn.beta", prefix), &mut h.bn_beta));
            out.push((format!("{}.cls.w", prefix), &mut h.cls.w));
            out.push((format!("{}.cls.b", prefix), &mut h.cls.b));
        }
        head("global", &mut self.global, &mut out);
        if let Some((bottleneck, h)) = self.drop.as_mut() {
            out.push(("drop.bottleneck.w".into(), &mut bottleneck.lin.w));
            out.push(("drop.bottleneck.b".into(), &mut bottleneck.lin.b));
            head("drop", h, &mut out);
        }
        out
    }

    /// Batch-norm running statistics by head name.
    pub fn bn_states(&self) -> Vec<(String, RunningStats)> {
        let mut out = vec![("global.bn".to_string(), self.global.bn_stats.clone())];
        if let Some((_, h)) = &self.drop {
            out.push(("drop.bn".to_string(), h.bn_stats.clone()));
        }
        out
    }

    pub fn set_bn_state(&mut self, name: &str, stats: RunningStats) -> Result<()> {
        let slot = match name {
            "global.bn" => &mut self.global.bn_stats,
            "drop.bn" => match self.drop.as_mut() {
                Some((_, h)) => &mut h.bn_stats,
                None => {
                    return Err(Error::Config(
                        "checkpoint has dropping-branch stats but the branch is disabled".into(),
                    ))
                }
            },
            other => return Err(Error::Config(format!("unknown batch-norm state {}", other))),
        };
        if slot.features() != stats.features() {
            return Err(Error::Config(format!(
                "batch-norm state {} has {} features, model expects {}",
                name,
                stats.features(),
                slot.features()
            )));
        }
        *slot = stats;
        Ok(())
    }
}

/// Per-location channel energy of a feature map, normalized to a spatial
/// distribution, plus its entropy. An all-zero map is treated as uniform.
#[derive(Clone, Debug, PartialEq)]
pub struct SpatialEnergy {
    pub b: usize,
    pub h: usize,
    pub w: usize,
    /// `[B, H, W]`, each sample summing to 1.
    pub energy: Vec<f64>,
    /// Per-sample entropy, in [0, ln(H*W)].
    pub entropy: Vec<f64>,
}

pub fn spatial_energy_map(t: &Tensor) -> Result<SpatialEnergy> {
    let s = t.shape();
    if s.len() != 4 {
        return Err(Error::Dimension(format!(
            "spatial_energy_map needs [B, C, H, W], got {:?}",
            s
        )));
    }
    let (b, c, h, w) = (s[0], s[1], s[2], s[3]);
    let d = t.data();
    let hw = h * w;
    let mut energy = vec![0.0; b * hw];
    for bi in 0..b {
        for ci in 0..c {
            let base = (bi * c + ci) * hw;
            for p in 0..hw {
                let v = d[base + p];
                energy[bi * hw + p] += v * v;
            }
        }
    }
    let mut entropy = vec![0.0; b];
    for bi in 0..b {
        let row = &mut energy[bi * hw..(bi + 1) * hw];
        for v in row.iter_mut() {
            *v = v.sqrt();
        }
        let total: f64 = row.iter().sum();
        if total == 0.0 {
            row.fill(1.0 / hw as f64);
        } else {
            for v in row.iter_mut() {
                *v /= total;
            }
        }
        entropy[bi] = -row
            .iter()
            .filter(|&&e| e > 0.0)
            .map(|&e| e * e.ln())
            .sum::<f64>();
    }
    Ok(SpatialEnergy {
        b,
        h,
        w,
        energy,
        entropy,
    })
}
