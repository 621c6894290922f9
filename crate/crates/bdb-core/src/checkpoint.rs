//! Self-describing model checkpoints.
//!
//! A checkpoint is one JSON document holding the model config, every named
//! parameter array, the batch-norm running statistics, and optionally the
//! training RNG state. JSON floats use the shortest round-tripping form, so
//! save -> load -> save is byte-identical and two identical models produce
//! identical files.

use std::io::{Read, Write};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig};
use crate::tensor::{RunningStats, Tensor};

pub const FORMAT: &str = "bdb-checkpoint v1";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NamedArray {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NamedStats {
    pub name: String,
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub config: ModelConfig,
    pub params: Vec<NamedArray>,
    pub bn: Vec<NamedStats>,
    /// Training RNG state, captured so a run can resume mid-stream.
    pub rng: Option<ChaCha8Rng>,
}

impl Checkpoint {
    pub fn capture(model: &Model, rng: Option<&ChaCha8Rng>) -> Self {
        let params = model
            .named_params()
            .into_iter()
            .map(|(name, t)| NamedArray {
                name,
                shape: t.shape().to_vec(),
                data: t.data().to_vec(),
            })
            .collect();
        let bn = model
            .bn_states()
            .into_iter()
            .map(|(name, s)| NamedStats {
                name,
                mean: s.mean,
                var: s.var,
            })
            .collect();
        Self {
            format: FORMAT.into(),
            config: model.cfg.clone(),
            params,
            bn,
            rng: rng.cloned(),
        }
    }

    /// Rebuilds the model and hands back the stored RNG state. Every
    /// parameter and batch-norm entry of the freshly built model must be
    /// covered by name with matching shape.
    pub fn restore(&self) -> Result<(Model, Option<ChaCha8Rng>)> {
        if self.format != FORMAT {
            return Err(Error::Parse {
                line: 1,
                msg: format!("unknown checkpoint format '{}'", self.format),
            });
        }
        // Init values are immediately overwritten; the seed is irrelevant.
        let mut init_rng = ChaCha8Rng::seed_from_u64(0);
        let mut model = Model::new(self.config.clone(), &mut init_rng)?;
        let mut refs = model.param_refs_mut();
        if refs.len() != self.params.len() {
            return Err(Error::Config(format!(
                "checkpoint holds {} parameters, model defines {}",
                self.params.len(),
                refs.len()
            )));
        }
        for (name, slot) in refs.iter_mut() {
            let stored = self
                .params
                .iter()
                .find(|p| &p.name == name)
                .ok_or_else(|| Error::Config(format!("checkpoint misses parameter {}", name)))?;
            if stored.shape != slot.shape() {
                return Err(Error::Config(format!(
                    "parameter {} has shape {:?} in checkpoint, model expects {:?}",
                    name,
                    stored.shape,
                    slot.shape()
                )));
            }
            **slot = Tensor::param(stored.data.clone(), &stored.shape)?;
        }
        for s in &self.bn {
            model.set_bn_state(
                &s.name,
                RunningStats {
                    mean: s.mean.clone(),
                    var: s.var.clone(),
                },
            )?;
        }
        Ok((model, self.rng.clone()))
    }

    pub fn save<W: Write>(&self, mut writer: W) -> Result<()> {
        let text = serde_json::to_string(self)
            .map_err(|e| Error::Io(std::io::Error::new(std::io::ErrorKind::InvalidData, e)))?;
        writer.write_all(text.as_bytes())?;
        writer.write_all(b"\n")?;
        Ok(())
    }

    pub fn load<R: Read>(mut reader: R) -> Result<Self> {
        let mut text = String::new();
        reader.read_to_string(&mut text)?;
        serde_json::from_str(&text).map_err(|e| Error::Parse {
            line: e.line(),
            msg: e.to_string(),
        })
    }

    pub fn save_file<P: AsRef<Path>>(&self, path: P) -> Result<()> {
        self.save(std::fs::File::create(path)?)
    }

    pub fn load_file<P: AsRef<Path>>(path: P) -> Result<Self> {
        Self::load(std::fs::File::open(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::masks::DropSpec;
    use crate::model::{BackboneConfig, BranchConfig, Mode, PoolKind};
    use rand::RngCore;

    fn small_cfg() -> ModelConfig {
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
                drop_spec: DropSpec::batch_drop_block(0.4, 1.0),
                drop_pool: PoolKind::Gmp,
                use_drop_branch: true,
            },
            num_classes: 3,
        }
    }

    #[test]
    fn round_trip_restores_params_bn_and_rng() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let model = Model::new(small_cfg(), &mut rng).unwrap();
        let ckpt = Checkpoint::capture(&model, Some(&rng));

        let mut buf = Vec::new();
        ckpt.save(&mut buf).unwrap();
        let loaded = Checkpoint::load(&buf[..]).unwrap();
        assert_eq!(loaded, ckpt);

        let (restored, restored_rng) = loaded.restore().unwrap();
        for ((n1, p1), (n2, p2)) in model.named_params().iter().zip(restored.named_params().iter()) {
            assert_eq!(n1, n2);
            assert_eq!(p1.data(), p2.data());
        }
        assert_eq!(model.bn_states(), restored.bn_states());
        let mut original_rng = rng;
        let mut back = restored_rng.unwrap();
        for _ in 0..8 {
            assert_eq!(original_rng.next_u64(), back.next_u64());
        }
    }

    #[test]
    fn save_is_byte_deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let model = Model::new(small_cfg(), &mut rng).unwrap();
        let ckpt = Checkpoint::capture(&model, None);
        let mut a = Vec::new();
        let mut b = Vec::new();
        ckpt.save(&mut a).unwrap();
        ckpt.save(&mut b).unwrap();
        assert_eq!(a, b);

        // save -> load -> save is also byte-identical.
        let mut c = Vec::new();
        Checkpoint::load(&a[..]).unwrap().save(&mut c).unwrap();
        assert_eq!(a, c);
    }

    #[test]
    fn restored_model_computes_identical_outputs() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut model = Model::new(small_cfg(), &mut rng).unwrap();
        let ckpt = Checkpoint::capture(&model, None);
        let (mut restored, _) = ckpt.restore().unwrap();

        let x = Tensor::constant(
            (0..2 * 6 * 2).map(|i| (i as f64) * 0.1 - 0.5).collect(),
            &[2, 6, 2],
        )
        .unwrap();
        let mut r1 = ChaCha8Rng::seed_from_u64(0);
        let mut r2 = ChaCha8Rng::seed_from_u64(0);
        let o1 = model.forward(&x, Mode::Eval, &mut r1).unwrap();
        let o2 = restored.forward(&x, Mode::Eval, &mut r2).unwrap();
        assert_eq!(
            o1.descriptor.unwrap().data(),
            o2.descriptor.unwrap().data()
        );
    }

    #[test]
    fn wrong_format_string_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let model = Model::new(small_cfg(), &mut rng).unwrap();
        let mut ckpt = Checkpoint::capture(&model, None);
        ckpt.format = "bdb-checkpoint v0".into();
        assert!(matches!(ckpt.restore(), Err(Error::Parse { .. })));
    }

    #[test]
    fn shape_tamper_rejected_by_name() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let model = Model::new(small_cfg(), &mut rng).unwrap();
        let mut ckpt = Checkpoint::capture(&model, None);
        ckpt.params[0].shape = vec![1, 1];
        match ckpt.restore() {
            Err(Error::Config(msg)) => assert!(msg.contains(&ckpt.params[0].name), "{}", msg),
            Err(other) => panic!("expected config error, got {:?}", other),
            Ok(_) => panic!("tampered checkpoint restored successfully"),
        }
    }

    #[test]
    fn malformed_json_reports_parse_error() {
        let text = b"{\"format\": \"bdb-checkpoint v1\", nope";
        assert!(matches!(
            Checkpoint::load(&text[..]),
            Err(Error::Parse { .. })
        ));
    }
}
