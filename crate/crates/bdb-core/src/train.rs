//! Adam optimizer, warm-up/step-decay learning-rate schedule, and the
//! seeded training loop wiring sampler, model, and losses together.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{augment, epoch_batches, records_to_tensor, AugmentSpec, BatchPlan, DatasetSplit, NormStats, Record};
use crate::error::{Error, Result};
use crate::eval::{extract_embeddings, reid_metrics};
use crate::losses::{batch_hard_soft_margin_triplet, combine, softmax_ce, BatchLabels};
use crate::model::{Mode, Model, ModelConfig};
use crate::tensor::Tensor;

/// Learning-rate plan: linear warm-up to `base_lr`, then step decays. A
/// decay point `(e, lr)` takes effect from epoch `e + 1` ("after epoch e").
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Schedule {
    pub base_lr: f64,
    pub warmup_epochs: usize,
    pub decay_points: Vec<(usize, f64)>,
    pub total_epochs: usize,
}

impl Schedule {
    /// 400-epoch recipe: warm-up 50, 1e-3 -> 1e-4 after 200 -> 1e-5 after 300.
    pub fn paper() -> Self {
        Self {
            base_lr: 1e-3,
            warmup_epochs: 50,
            decay_points: vec![(200, 1e-4), (300, 1e-5)],
            total_epochs: 400,
        }
    }

    /// Scaled-down recipe with the same warm-up and decay ratios for small
    /// synthetic runs: 60 epochs, warm-up 8, decays after 30 and 45.
    pub fn desk() -> Self {
        Self {
            base_lr: 1e-3,
            warmup_epochs: 8,
            decay_points: vec![(30, 1e-4), (45, 1e-5)],
            total_epochs: 60,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.base_lr.is_finite() && self.base_lr > 0.0) {
            return Err(Error::Schedule(format!("base_lr must be positive, got {}", self.base_lr)));
        }
        if self.total_epochs == 0 {
            return Err(Error::Schedule("total_epochs must be at least 1".into()));
        }
        if self.warmup_epochs > self.total_epochs {
            return Err(Error::Schedule(format!(
                "warm-up of {} epochs exceeds total {}",
                self.warmup_epochs, self.total_epochs
            )));
        }
        let mut prev = self.warmup_epochs;
        for &(epoch, lr) in &self.decay_points {
            if epoch <= prev {
                return Err(Error::Schedule(format!(
                    "decay epochs must increase and follow warm-up, got {}",
                    epoch
                )));
            }
            if !(lr.is_finite() && lr > 0.0) {
                return Err(Error::Schedule(format!("decay lr must be positive, got {}", lr)));
            }
            prev = epoch;
        }
        Ok(())
    }

    /// Learning rate for a 1-indexed epoch. Warm-up is epoch-indexed:
    /// epoch 1 gives base_lr / warmup_epochs, epoch == warmup gives base_lr.
    pub fn lr_at(&self, epoch: usize) -> Result<f64> {
        self.validate()?;
        if epoch == 0 || epoch > self.total_epochs {
            return Err(Error::Schedule(format!(
                "epoch {} outside schedule range 1..={}",
                epoch, self.total_epochs
            )));
        }
        if self.warmup_epochs > 0 && epoch <= self.warmup_epochs {
            return Ok(self.base_lr * epoch as f64 / self.warmup_epochs as f64);
        }
        let mut lr = self.base_lr;
        for &(decay_epoch, decayed) in &self.decay_points {
            if epoch > decay_epoch {
                lr = decayed;
            }
        }
        Ok(lr)
    }
}

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// Per-parameter Adam moments. Moment buffers are allocated on the first
/// step and keyed by parameter position, which is fixed in the model.
#[derive(Clone, Debug, Default)]
pub struct AdamState {
    step: usize,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl AdamState {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn step_count(&self) -> usize {
        self.step
    }

    /// One Adam update with bias correction over named leaf parameters.
    /// Parameters without a recorded gradient are treated as zero-gradient.
    /// Each tensor is replaced by a fresh leaf holding the updated values.
    pub fn step(&mut self, params: &mut [(String, &mut Tensor)], lr: f64) -> Result<()> {
        if !(lr.is_finite() && lr > 0.0) {
            return Err(Error::Training(format!("learning rate must be positive, got {}", lr)));
        }
        if self.m.is_empty() {
            self.m = params.iter().map(|(_, t)| vec![0.0; t.numel()]).collect();
            self.v = params.iter().map(|(_, t)| vec![0.0; t.numel()]).collect();
        }
        if self.m.len() != params.len() {
            return Err(Error::Training(format!(
                "optimizer tracks {} parameters, model has {}",
                self.m.len(),
                params.len()
            )));
        }
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - ADAM_BETA1.powi(t);
        let bc2 = 1.0 - ADAM_BETA2.powi(t);
        for (i, (name, tensor)) in params.iter_mut().enumerate() {
            let grad = tensor
                .grad()
                .unwrap_or_else(|| vec![0.0; tensor.numel()]);
            if grad.len() != self.m[i].len() {
                return Err(Error::Training(format!(
                    "parameter {} changed size ({} -> {})",
                    name,
                    self.m[i].len(),
                    grad.len()
                )));
            }
            if grad.iter().any(|g| !g.is_finite()) {
                return Err(Error::Training(format!(
                    "non-finite gradient for parameter {}",
                    name
                )));
            }
            let shape = tensor.shape().to_vec();
            let mut data = tensor.data().to_vec();
            for (j, g) in grad.iter().enumerate() {
                self.m[i][j] = ADAM_BETA1 * self.m[i][j] + (1.0 - ADAM_BETA1) * g;
                self.v[i][j] = ADAM_BETA2 * self.v[i][j] + (1.0 - ADAM_BETA2) * g * g;
                let m_hat = self.m[i][j] / bc1;
                let v_hat = self.v[i][j] / bc2;
                data[j] -= lr * m_hat / (v_hat.sqrt() + ADAM_EPS);
            }
            **tensor = Tensor::param(data, &shape)?;
        }
        Ok(())
    }
}

/// Loss-component switches reproducing the ablation rows: the baseline is
/// softmax only on a single branch, the full setup adds the triplet loss
/// and the second (erasing) branch.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossFlags {
    pub use_triplet: bool,
    pub use_softmax: bool,
}

impl Default for LossFlags {
    fn default() -> Self {
        Self {
            use_triplet: true,
            use_softmax: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainOptions {
    pub model: ModelConfig,
    pub plan: BatchPlan,
    pub schedule: Schedule,
    pub flags: LossFlags,
    pub augment: AugmentSpec,
    /// Run retrieval evaluation every N epochs (0 = never). The final epoch
    /// is always evaluated when N > 0.
    pub eval_every: usize,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub lr: f64,
    pub loss_total: f64,
    pub loss_triplet_g: f64,
    pub loss_softmax_g: f64,
    pub loss_triplet_d: f64,
    pub loss_softmax_d: f64,
    pub rank1: Option<f64>,
    pub map: Option<f64>,
}

/// Maps raw identity labels to contiguous class indices in ascending
/// identity order, the order the classifier head is trained against.
pub fn class_index_map(train: &[Record]) -> BTreeMap<usize, usize> {
    let ids: std::collections::BTreeSet<usize> = train.iter().map(|r| r.identity).collect();
    ids.into_iter().enumerate().map(|(i, id)| (id, i)).collect()
}

fn mean(values: &[f64]) -> f64 {
    if values.is_empty() {
        0.0
    } else {
        values.iter().sum::<f64>() / values.len() as f64
    }
}

struct BatchLossBreakdown {
    total: f64,
    triplet_g: f64,
    softmax_g: f64,
    triplet_d: f64,
    softmax_d: f64,
}

/// Forward + loss for one batch of train records. Returns the scalar total
/// (still attached to the graph) plus the detached component values.
fn batch_loss<R: rand::Rng>(
    model: &mut Model,
    records: &[&Record],
    dims: &crate::data::GridDims,
    classes: &BTreeMap<usize, usize>,
    flags: &LossFlags,
    rng: &mut R,
) -> Result<(Tensor, BatchLossBreakdown)> {
    let x = records_to_tensor(records, dims)?;
    let labels = BatchLabels::new(records.iter().map(|r| r.identity).collect());
    let class_idx: Vec<usize> = records
        .iter()
        .map(|r| {
            classes.get(&r.identity).copied().ok_or_else(|| {
                Error::Label(format!("identity {} missing from the class map", r.identity))
            })
        })
        .collect::<Result<_>>()?;

    let out = model.forward(&x, Mode::Train, rng)?;
    let mut components: Vec<(String, Tensor)> = Vec::new();
    if flags.use_triplet {
        components.push((
            "triplet_g".into(),
            batch_hard_soft_margin_triplet(&out.global_feat, &labels)?,
        ));
    }
    if flags.use_softmax {
        components.push(("softmax_g".into(), softmax_ce(&out.global_logits, &class_idx)?));
    }
    if let (Some(drop_feat), Some(drop_logits)) = (&out.drop_feat, &out.drop_logits) {
        if flags.use_triplet {
            components.push((
                "triplet_d".into(),
                batch_hard_soft_margin_triplet(drop_feat, &labels)?,
            ));
        }
        if flags.use_softmax {
            components.push(("softmax_d".into(), softmax_ce(drop_logits, &class_idx)?));
        }
    }
    if components.is_empty() {
        return Err(Error::Training(
            "no loss components enabled (use_triplet and use_softmax both false)".into(),
        ));
    }
    let lv = combine(components)?;
    let pick = |name: &str| -> Result<f64> {
        lv.components
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t.item())
            .transpose()
            .map(|v| v.unwrap_or(0.0))
    };
    let breakdown = BatchLossBreakdown {
        total: lv.total.item()?,
        triplet_g: pick("triplet_g")?,
        softmax_g: pick("softmax_g")?,
        triplet_d: pick("triplet_d")?,
        softmax_d: pick("softmax_d")?,
    };
    Ok((lv.total, breakdown))
}

pub struct TrainOutcome {
    pub model: Model,
    pub history: Vec<EpochStats>,
    /// RNG state at the end of the run, for checkpointing and resumption.
    pub rng: ChaCha8Rng,
}

/// Seeded training loop. Per epoch: draw identity-balanced batches, forward
/// in train mode (fresh erasing mask per batch), sum the enabled loss
/// components, backprop, and apply one Adam step at the scheduled rate.
/// Everything random flows from one ChaCha stream, so a seed fixes the run
/// bit-for-bit.
pub fn train_loop(opts: &TrainOptions, split: &DatasetSplit) -> Result<TrainOutcome> {
    opts.schedule.validate()?;
    opts.plan.validate()?;
    split.validate()?;
    let classes = class_index_map(&split.train);
    if classes.len() != opts.model.num_classes {
        return Err(Error::Config(format!(
            "model has {} classes but the train split holds {} identities",
            opts.model.num_classes,
            classes.len()
        )));
    }
    let stats = if opts.augment.normalize {
        Some(NormStats::from_train(&split.train, &split.dims)?)
    } else {
        None
    };

    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut model = Model::new(opts.model.clone(), &mut rng)?;
    let mut adam = AdamState::new();
    let mut history = Vec::with_capacity(opts.schedule.total_epochs);

    for epoch in 1..=opts.schedule.total_epochs {
        let lr = opts.schedule.lr_at(epoch)?;
        let batches = epoch_batches(&split.train, &opts.plan, &mut rng)?;
        if batches.is_empty() {
            return Err(Error::Training(format!(
                "plan {}x{} yields zero batches over {} train records",
                opts.plan.p,
                opts.plan.k,
                split.train.len()
            )));
        }
        let mut totals = Vec::with_capacity(batches.len());
        let mut tg = Vec::with_capacity(batches.len());
        let mut sg = Vec::with_capacity(batches.len());
        let mut td = Vec::with_capacity(batches.len());
        let mut sd = Vec::with_capacity(batches.len());
        for (bi, batch) in batches.iter().enumerate() {
            let augmented: Vec<Record> = batch
                .iter()
                .map(|&i| augment(&split.train[i], &opts.augment, stats.as_ref(), &split.dims, &mut rng))
                .collect::<Result<_>>()?;
            let refs: Vec<&Record> = augmented.iter().collect();
            let (total, breakdown) =
                batch_loss(&mut model, &refs, &split.dims, &classes, &opts.flags, &mut rng)?;
            if !breakdown.total.is_finite() {
                return Err(Error::Training(format!(
                    "non-finite loss {} at epoch {}, batch {}",
                    breakdown.total, epoch, bi
                )));
            }
            total.backward()?;
            adam.step(&mut model.param_refs_mut(), lr)?;
            totals.push(breakdown.total);
            tg.push(breakdown.triplet_g);
            sg.push(breakdown.softmax_g);
            td.push(breakdown.triplet_d);
            sd.push(breakdown.softmax_d);
        }

        let evaluate = opts.eval_every > 0
            && (epoch % opts.eval_every == 0 || epoch == opts.schedule.total_epochs);
        let (rank1, map) = if evaluate && !split.query.is_empty() {
            let q = extract_embeddings(&mut model, &split.query, &split.dims, 32)?;
            let g = extract_embeddings(&mut model, &split.gallery, &split.dims, 32)?;
            let rep = reid_metrics(&q, &g, 10.min(g.len()))?;
            (Some(rep.rank1), Some(rep.map))
        } else {
            (None, None)
        };

        history.push(EpochStats {
            epoch,
            lr,
            loss_total: mean(&totals),
            loss_triplet_g: mean(&tg),
            loss_softmax_g: mean(&sg),
            loss_triplet_d: mean(&td),
            loss_softmax_d: mean(&sd),
            rank1,
            map,
        });
    }
    Ok(TrainOutcome { model, history, rng })
}

/// CSV with a fixed header; rank1/map cells are empty on epochs without an
/// evaluation pass.
pub fn history_to_csv(history: &[EpochStats]) -> String {
    let mut out =
        String::from("epoch,lr,loss_total,loss_triplet_g,loss_softmax_g,loss_triplet_d,loss_softmax_d,rank1,map\n");
    for row in history {
        let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{},{}",
            row.epoch,
            row.lr,
            row.loss_total,
            row.loss_triplet_g,
            row.loss_softmax_g,
            row.loss_triplet_d,
            row.loss_softmax_d,
            opt(row.rank1),
            opt(row.map),
        );
    }
    out
}
