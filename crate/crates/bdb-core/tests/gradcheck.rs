//! Central finite-difference checks for every differentiable op and for the
//! full two-branch model. Linear ops must agree to 1e-6, nonlinear ones to
//! 1e-4, each over 20 random seeds.

use bdb_core::data::{gen_synthetic, records_to_tensor, Record, SyntheticConfig};
use bdb_core::fdcheck::{check_gradients, rel_err};
use bdb_core::losses::{
    batch_hard_soft_margin_triplet, lifted_structure_loss, pairwise_euclidean, softmax_ce,
    weighted_margin_loss, BatchLabels, MarginParams,
};
use bdb_core::masks::{apply_mask, make_mask, DropKind, DropSpec};
use bdb_core::model::{BackboneConfig, BranchConfig, Mode, Model, ModelConfig, PoolKind};
use bdb_core::tensor::{batch_norm, BnMode, RunningStats};
use bdb_core::{Result, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const SEEDS: u64 = 20;
const H: f64 = 1e-5;
const LINEAR_TOL: f64 = 1e-6;
const NONLINEAR_TOL: f64 = 1e-4;

fn rand_vec<R: Rng>(rng: &mut R, n: usize, lo: f64, hi: f64) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(lo..hi)).collect()
}

/// Values bounded away from zero, for ops with a kink or singularity there.
fn rand_vec_off_zero<R: Rng>(rng: &mut R, n: usize, margin: f64) -> Vec<f64> {
    (0..n)
        .map(|_| {
            let v: f64 = rng.random_range(margin..1.5);
            if rng.random_bool(0.5) {
                v
            } else {
                -v
            }
        })
        .collect()
}

/// Weights the output elementwise before summing so the check exercises
/// non-uniform upstream gradients.
fn weighted_sum(t: &Tensor, weights: &[f64]) -> Result<Tensor> {
    let w = Tensor::constant(weights.to_vec(), t.shape())?;
    t.mul(&w)?.sum_all()
}

fn assert_grad<F>(name: &str, leaves: &[(Vec<f64>, Vec<usize>)], tol: f64, build: F)
where
    F: Fn(&[Tensor]) -> Result<Tensor>,
{
    let report = check_gradients(leaves, H, build)
        .unwrap_or_else(|e| panic!("{}: builder failed: {:?}", name, e));
    assert!(
        report.max_rel_err < tol,
        "{}: max rel err {} >= {} ({:?})",
        name,
        report.max_rel_err,
        tol,
        report.worst
    );
}

#[test]
fn elementwise_binary_ops() {
    for seed in 0..SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = rand_vec(&mut rng, 6, -2.0, 2.0);
        let b = rand_vec(&mut rng, 6, -2.0, 2.0);
        let w = rand_vec(&mut rng, 6, -1.0, 1.0);
        let leaves = vec![(a, vec![2, 3]), (b, vec![2, 3])];
        let wc = w.clone();
        assert_grad("add", &leaves, LINEAR_TOL, move |p| {
            weighted_sum(&p[0].add(&p[1])?, &wc)
        });
        let wc = w.clone();
        assert_grad("sub", &leaves, LINEAR_TOL, move |p| {
            weighted_sum(&p[0].sub(&p[1])?, &wc)
        });
        let wc = w.clone();
        assert_grad("mul", &leaves, LINEAR_TOL, move |p| {
            weighted_sum(&p[0].mul(&p[1])?, &wc)
        });
    }
}

#[test]
fn scalar_operand_broadcast() {
    for seed in 0..SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = rand_vec(&mut rng, 6, -2.0, 2.0);
        let s = rand_vec(&mut rng, 1, 0.5, 2.0);
        let w = rand_vec(&mut rng, 6, -1.0, 1.0);
        let leaves = vec![(a, vec![2, 3]), (s, vec![1])];
        let wc = w.clone();
        assert_grad("add scalar operand", &leaves, LINEAR_TOL, move |p| {
            weighted_sum(&p[0].add(&p[1])?, &wc)
        });
        let wc = w.clone();
        assert_grad("mul scalar operand", &leaves, LINEAR_TOL, move |p| {
            weighted_sum(&p[0].mul(&p[1])?, &wc)
        });
        let wc = w.clone();
        assert_grad("sub scalar operand", &leaves, LINEAR_TOL, move |p| {
            weighted_sum(&p[1].sub(&p[0])?, &wc)
        });
    }
}

#[test]
fn constant_scalar_ops() {
    for seed in 0..SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = rand_vec(&mut rng, 5, -2.0, 2.0);
        let leaves = vec![(a, vec![5])];
        assert_grad("add_scalar/mul_scalar", &leaves, LINEAR_TOL, |p| {
            p[0].mul_scalar(1.7).add_scalar(0.3).sum_all()
        });
    }
}

#[test]
fn smooth_unary_ops() {
    for seed in 0..SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let w = rand_vec(&mut rng, 6, -1.0, 1.0);

        let sym = rand_vec(&mut rng, 6, -2.0, 2.0);
        let wc = w.clone();
        assert_grad("softplus", &[(sym.clone(), vec![6])], NONLINEAR_TOL, move |p| {
            weighted_sum(&p[0].softplus(), &wc)
        });
        let wc = w.clone();
        assert_grad("exp", &[(sym, vec![6])], NONLINEAR_TOL, move |p| {
            weighted_sum(&p[0].exp(), &wc)
        });

        let pos = rand_vec(&mut rng, 6, 0.1, 3.0);
        let wc = w.clone();
        assert_grad("log", &[(pos.clone(), vec![6])], NONLINEAR_TOL, move |p| {
            weighted_sum(&p[0].log(), &wc)
        });
        let wc = w.clone();
        assert_grad("sqrt_eps", &[(pos, vec![6])], NONLINEAR_TOL, move |p| {
            weighted_sum(&p[0].sqrt_eps(1e-12), &wc)
        });
    }
}

#[test]
fn relu_away_from_kink() {
    for seed in 0..SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = rand_vec_off_zero(&mut rng, 8, 0.05);
        let w = rand_vec(&mut rng, 8, -1.0, 1.0);
        assert_grad("relu", &[(a, vec![8])], NONLINEAR_TOL, move |p| {
            weighted_sum(&p[0].relu(), &w)
        });
    }
}

#[test]
fn matmul_both_operands() {
    for seed in 0..SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = rand_vec(&mut rng, 12, -1.5, 1.5);
        let b = rand_vec(&mut rng, 8, -1.5, 1.5);
        let w = rand_vec(&mut rng, 6, -1.0, 1.0);
        let leaves = vec![(a, vec![3, 4]), (b, vec![4, 2])];
        assert_grad("matmul", &leaves, LINEAR_TOL, move |p| {
            weighted_sum(&p[0].matmul(&p[1])?, &w)
        });
    }
}

#[test]
fn reductions() {
    for seed in 0..SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = rand_vec(&mut rng, 24, -2.0, 2.0);
        let leaves = vec![(a, vec![2, 3, 4])];
        let w2 = rand_vec(&mut rng, 2, -1.0, 1.0);
        let wc = w2.clone();
        assert_grad("sum over axes", &leaves, LINEAR_TOL, move |p| {
            weighted_sum(&p[0].sum_axes(&[1, 2])?, &wc)
        });
        let wc = w2.clone();
        assert_grad("mean over axes", &leaves, LINEAR_TOL, move |p| {
            weighted_sum(&p[0].mean_axes(&[1, 2])?, &wc)
        });
        // Continuous random draws have distinct values, so max has a unique
        // argmax and the kink is never straddled by the FD step.
        let w6 = rand_vec(&mut rng, 6, -1.0, 1.0);
        assert_grad("max over axis", &leaves, NONLINEAR_TOL, move |p| {
            weighted_sum(&p[0].max_axes(&[2])?, &w6)
        });
        assert_grad("mean_all", &leaves, LINEAR_TOL, |p| p[0].mean_all());
    }
}

#[test]
fn shape_ops() {
    for seed in 0..SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = rand_vec(&mut rng, 24, -2.0, 2.0);
        let b = rand_vec(&mut rng, 12, -2.0, 2.0);
        let leaves = vec![(a, vec![2, 3, 4]), (b, vec![2, 3, 2])];

        let w = rand_vec(&mut rng, 36, -1.0, 1.0);
        assert_grad("concat", &leaves, LINEAR_TOL, move |p| {
            weighted_sum(&Tensor::concat(&p[0], &p[1], 2)?, &w)
        });

        let w = rand_vec(&mut rng, 8, -1.0, 1.0);
        assert_grad("narrow", &leaves, LINEAR_TOL, move |p| {
            weighted_sum(&p[0].narrow(1, 1, 1)?, &w)
        });

        let w = rand_vec(&mut rng, 24, -1.0, 1.0);
        assert_grad("reshape", &leaves, LINEAR_TOL, move |p| {
            weighted_sum(&p[0].reshape(&[6, 4])?, &w)
        });

        let w = rand_vec(&mut rng, 24, -1.0, 1.0);
        assert_grad("permute", &leaves, LINEAR_TOL, move |p| {
            weighted_sum(&p[0].permute(&[2, 0, 1])?, &w)
        });

        let w = rand_vec(&mut rng, 24, -1.0, 1.0);
        assert_grad("transpose", &leaves, LINEAR_TOL, move |p| {
            weighted_sum(&p[0].reshape(&[6, 4])?.transpose()?, &w)
        });

        let w = rand_vec(&mut rng, 48, -1.0, 1.0);
        assert_grad("expand_axis", &leaves, LINEAR_TOL, move |p| {
            weighted_sum(&p[0].reshape(&[2, 1, 3, 4])?.expand_axis(1, 2)?, &w)
        });
    }
}

#[test]
fn batch_norm_train_and_eval() {
    for seed in 0..SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = rand_vec(&mut rng, 12, -2.0, 2.0);
        let gamma = rand_vec(&mut rng, 3, 0.5, 1.5);
        let beta = rand_vec(&mut rng, 3, -0.5, 0.5);
        let leaves = vec![(x, vec![4, 3]), (gamma, vec![3]), (beta, vec![3])];

        let w = rand_vec(&mut rng, 12, -1.0, 1.0);
        assert_grad("batch_norm train", &leaves, NONLINEAR_TOL, move |p| {
            let mut stats = RunningStats::new(3);
            weighted_sum(
                &batch_norm(&p[0], &p[1], &p[2], &mut stats, BnMode::Train, 0.1, 1e-5)?,
                &w,
            )
        });

        let frozen_mean = rand_vec(&mut rng, 3, -0.5, 0.5);
        let frozen_var = rand_vec(&mut rng, 3, 0.5, 2.0);
        let w = rand_vec(&mut rng, 12, -1.0, 1.0);
        assert_grad("batch_norm eval", &leaves, LINEAR_TOL, move |p| {
            let mut stats = RunningStats {
                mean: frozen_mean.clone(),
                var: frozen_var.clone(),
            };
            weighted_sum(
                &batch_norm(&p[0], &p[1], &p[2], &mut stats, BnMode::Eval, 0.1, 1e-5)?,
                &w,
            )
        });
    }
}

#[test]
fn mask_application_every_kind() {
    let specs = [
        DropSpec::batch_drop_block(0.5, 0.6),
        DropSpec {
            kind: DropKind::DropBlock,
            r_h: 0.5,
            r_w: 0.6,
            p: 0.0,
        },
        DropSpec {
            kind: DropKind::Dropout,
            r_h: 0.0,
            r_w: 0.0,
            p: 0.4,
        },
        DropSpec {
            kind: DropKind::SpatialDropout,
            r_h: 0.0,
            r_w: 0.0,
            p: 0.4,
        },
        DropSpec {
            kind: DropKind::BatchDropout,
            r_h: 0.0,
            r_w: 0.0,
            p: 0.4,
        },
    ];
    for seed in 0..SEEDS {
        for spec in &specs {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let (b, c, h, w) = (2, 3, 4, 3);
            let mask = make_mask(b, c, h, w, spec, &mut rng).unwrap().unwrap();
            let x = rand_vec(&mut rng, b * c * h * w, -2.0, 2.0);
            let weights = rand_vec(&mut rng, b * c * h * w, -1.0, 1.0);
            let name = format!("apply_mask {:?}", spec.kind);
            assert_grad(&name, &[(x, vec![b, c, h, w])], LINEAR_TOL, move |p| {
                weighted_sum(&apply_mask(&p[0], &mask)?, &weights)
            });
        }
    }
}

#[test]
fn loss_functions() {
    for seed in 0..SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let labels = BatchLabels::new(vec![0, 0, 0, 1, 1, 1, 2, 2, 2]);
        let feats = rand_vec(&mut rng, 9 * 4, -1.0, 1.0);
        let leaves = vec![(feats, vec![9, 4])];

        assert_grad("pairwise_euclidean", &leaves, NONLINEAR_TOL, {
            let w = rand_vec(&mut rng, 81, -1.0, 1.0);
            move |p| weighted_sum(&pairwise_euclidean(&p[0])?, &w)
        });

        let l = labels.clone();
        assert_grad("batch-hard triplet", &leaves, NONLINEAR_TOL, move |p| {
            batch_hard_soft_margin_triplet(&p[0], &l)
        });

        let l = labels.clone();
        assert_grad("lifted structure", &leaves, NONLINEAR_TOL, move |p| {
            lifted_structure_loss(&p[0], &l, 1.0)
        });

        let l = labels.clone();
        let margin_seed = seed.wrapping_mul(31).wrapping_add(7);
        assert_grad("weighted margin", &leaves, NONLINEAR_TOL, move |p| {
            let mut mrng = ChaCha8Rng::seed_from_u64(margin_seed);
            weighted_margin_loss(&p[0], &l, &MarginParams::default(), &mut mrng)
        });

        let logits = rand_vec(&mut rng, 4 * 3, -2.0, 2.0);
        let classes = vec![0, 2, 1, 2];
        assert_grad(
            "softmax cross-entropy",
            &[(logits, vec![4, 3])],
            NONLINEAR_TOL,
            move |p| softmax_ce(&p[0], &classes),
        );
    }
}

fn tiny_model_cfg() -> ModelConfig {
    ModelConfig {
        backbone: BackboneConfig {
            grid_h: 3,
            grid_w: 2,
            in_patch_dim: 2,
            feat_channels: 5,
            mixing_blocks: 1,
        },
        branches: BranchConfig {
            global_reduce_dim: 4,
            drop_reduce_dim: 6,
            drop_spec: DropSpec::batch_drop_block(0.5, 1.0),
            drop_pool: PoolKind::Gmp,
            use_drop_branch: true,
        },
        num_classes: 2,
    }
}

/// Train-mode loss of the full model on a fixed batch with a fixed mask
/// stream: both losses on both branches, all parameters on the tape.
fn model_loss(model: &mut Model, records: &[&Record], mask_seed: u64) -> f64 {
    let dims = bdb_core::data::GridDims {
        grid_h: 3,
        grid_w: 2,
        patch_dim: 2,
    };
    let x = records_to_tensor(records, &dims).unwrap();
    let labels = BatchLabels::new(records.iter().map(|r| r.identity).collect());
    let classes: Vec<usize> = records.iter().map(|r| r.identity).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(mask_seed);
    let out = model.forward(&x, Mode::Train, &mut rng).unwrap();
    let t_g = batch_hard_soft_margin_triplet(&out.global_feat, &labels).unwrap();
    let s_g = softmax_ce(&out.global_logits, &classes).unwrap();
    let t_d = batch_hard_soft_margin_triplet(out.drop_feat.as_ref().unwrap(), &labels).unwrap();
    let s_d = softmax_ce(out.drop_logits.as_ref().unwrap(), &classes).unwrap();
    let total = t_g.add(&s_g).unwrap().add(&t_d).unwrap().add(&s_d).unwrap();
    total.item().unwrap()
}

fn model_loss_tensor(model: &mut Model, records: &[&Record], mask_seed: u64) -> Tensor {
    let dims = bdb_core::data::GridDims {
        grid_h: 3,
        grid_w: 2,
        patch_dim: 2,
    };
    let x = records_to_tensor(records, &dims).unwrap();
    let labels = BatchLabels::new(records.iter().map(|r| r.identity).collect());
    let classes: Vec<usize> = records.iter().map(|r| r.identity).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(mask_seed);
    let out = model.forward(&x, Mode::Train, &mut rng).unwrap();
    let t_g = batch_hard_soft_margin_triplet(&out.global_feat, &labels).unwrap();
    let s_g = softmax_ce(&out.global_logits, &classes).unwrap();
    let t_d = batch_hard_soft_margin_triplet(out.drop_feat.as_ref().unwrap(), &labels).unwrap();
    let s_d = softmax_ce(out.drop_logits.as_ref().unwrap(), &classes).unwrap();
    t_g.add(&s_g).unwrap().add(&t_d).unwrap().add(&s_d).unwrap()
}

#[test]
fn full_two_branch_model() {
    // Every parameter of the model, spot-checked at 4 random elements per
    // tensor against central differences through the whole train-mode graph
    // (erasing mask included), across 20 seeds.
    for seed in 0..SEEDS {
        let cfg = SyntheticConfig {
            num_train_ids: 2,
            num_test_ids: 2,
            images_per_id: 2,
            cameras: 2,
            grid_h: 3,
            grid_w: 2,
            patch_dim: 2,
            upper_rows: 1,
            seed,
            ..SyntheticConfig::default()
        };
        let split = gen_synthetic(&cfg).unwrap();
        let records: Vec<&Record> = split.train.iter().collect();

        let mut init_rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(1000));
        let mut model = Model::new(tiny_model_cfg(), &mut init_rng).unwrap();
        let mask_seed = seed.wrapping_add(77);

        let loss = model_loss_tensor(&mut model, &records, mask_seed);
        loss.backward().unwrap();
        let grads: Vec<(String, Vec<f64>)> = model
            .named_params()
            .iter()
            .map(|(n, t)| (n.clone(), t.grad().unwrap_or_else(|| vec![0.0; t.numel()])))
            .collect();

        let mut pick_rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(5));
        let shapes: Vec<(String, usize)> = model
            .named_params()
            .iter()
            .map(|(n, t)| (n.clone(), t.numel()))
            .collect();
        for (pi, (name, numel)) in shapes.iter().enumerate() {
            for _ in 0..4 {
                let elem = pick_rng.random_range(0..*numel);
                let perturb = |model: &mut Model, delta: f64| {
                    let mut refs = model.param_refs_mut();
                    let (_, slot) = &mut refs[pi];
                    let mut data = slot.data().to_vec();
                    data[elem] += delta;
                    let shape = slot.shape().to_vec();
                    **slot = Tensor::param(data, &shape).unwrap();
                };
                perturb(&mut model, H);
                let plus = model_loss(&mut model, &records, mask_seed);
                perturb(&mut model, -2.0 * H);
                let minus = model_loss(&mut model, &records, mask_seed);
                perturb(&mut model, H);
                let numeric = (plus - minus) / (2.0 * H);
                let analytic = grads[pi].1[elem];
                let err = rel_err(analytic, numeric);
                assert!(
                    err < NONLINEAR_TOL,
                    "seed {} param {} elem {}: analytic {} vs numeric {} (rel err {})",
                    seed,
                    name,
                    elem,
                    analytic,
                    numeric,
                    err
                );
            }
        }
    }
}
