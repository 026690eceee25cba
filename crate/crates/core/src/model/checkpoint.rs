use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{GridTst, ModelConfig};
use crate::attention::Direction;
use crate::data::{ScalerStats, SplitSpec};
use crate::error::{Error, Result};
use crate::tensor::{BnState, Tensor};

pub const CHECKPOINT_MAGIC: &str = "GRIDTST-CKPT";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Dataset-side context needed to reuse a checkpoint on raw data.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RunInfo {
    pub dataset: String,
    pub split: Option<SplitSpec>,
    /// Standardization fitted on the training split.
    pub scaler: Option<ScalerStats>,
    /// Rows borrowed from the preceding split as lookback context.
    #[serde(default)]
    pub context: usize,
    /// Variate sampling ratio used in training.
    #[serde(default)]
    pub variate_ratio: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct TensorRecord {
    shape: Vec<usize>,
    data: Vec<f64>,
}

/// JSON container: magic, version, model config, named tensors, BatchNorm
/// running statistics and optional run info. Floats round-trip exactly.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    magic: String,
    version: u32,
    pub config: ModelConfig,
    directions: Vec<Direction>,
    tensors: BTreeMap<String, TensorRecord>,
    batch_norm: Vec<[BnState; 2]>,
    pub run: RunInfo,
}

impl Checkpoint {
    pub fn from_model(model: &GridTst, run: RunInfo) -> Self {
        Self {
            magic: CHECKPOINT_MAGIC.into(),
            version: CHECKPOINT_VERSION,
            config: model.config().clone(),
            directions: model.directions(),
            tensors: model
                .tensors()
                .into_iter()
                .map(|(name, t)| {
                    (
                        name,
                        TensorRecord {
                            shape: t.shape().to_vec(),
                            data: t.data().to_vec(),
                        },
                    )
                })
                .collect(),
            batch_norm: model
                .blocks
                .iter()
                .map(|b| [b.params.bn1.clone(), b.params.bn2.clone()])
                .collect(),
            run,
        }
    }

    pub fn to_model(&self) -> Result<GridTst> {
        let mut model = GridTst::new(self.config.clone())?;
        if model.directions() != self.directions {
            return Err(Error::Checkpoint(format!(
                "layer directions {:?} do not match mode {}",
                self.directions, self.config.mode
            )));
        }
        if self.batch_norm.len() != model.blocks.len() {
            return Err(Error::Checkpoint(format!(
                "{} BatchNorm records for {} layers",
                self.batch_norm.len(),
                model.blocks.len()
            )));
        }
        let expected = model.tensors().len();
        if self.tensors.len() != expected {
            return Err(Error::Checkpoint(format!("{} tensors, expected {expected}", self.tensors.len())));
        }
        for (name, slot) in model.tensors_mut() {
            let rec = self
                .tensors
                .get(&name)
                .ok_or_else(|| Error::Checkpoint(format!("missing tensor `{name}`")))?;
            if rec.shape != slot.shape() {
                return Err(Error::Checkpoint(format!(
                    "tensor `{name}` has shape {:?}, expected {:?}",
                    rec.shape,
                    slot.shape()
                )));
            }
            *slot = Tensor::new(rec.shape.clone(), rec.data.clone()).map_err(|e| Error::Checkpoint(format!("`{name}`: {e}")))?;
        }
        for (b, [s1, s2]) in model.blocks.iter_mut().zip(&self.batch_norm) {
            b.params.bn1 = s1.clone();
            b.params.bn2 = s2.clone();
        }
        Ok(model)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string(self).map_err(|e| Error::Checkpoint(e.to_string()))?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let ckpt: Checkpoint =
            serde_json::from_str(&text).map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))?;
        if ckpt.magic != CHECKPOINT_MAGIC {
            return Err(Error::Checkpoint(format!("{}: not a checkpoint file", path.display())));
        }
        if ckpt.version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!(
                "{}: unsupported version {} (expected {CHECKPOINT_VERSION})",
                path.display(),
                ckpt.version
            )));
        }
        Ok(ckpt)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attention::NormKind;
    use crate::model::SequencingMode;

    fn model() -> GridTst {
        GridTst::new(ModelConfig {
            lookback: 24,
            horizon: 3,
            variates: 2,
            patch_len: 8,
            stride: 4,
            d_model: 4,
            heads: 2,
            layers: 3,
            d_ff: 8,
            dropout: 0.1,
            mode: SequencingMode::ChannelFirst,
            norm: NormKind::Batch,
            seed: 3,
        })
        .unwrap()
    }

    #[test]
    fn roundtrip_is_bit_exact() {
        let mut m = model();
        m.blocks[1].params.bn2.running_mean = vec![0.1, 1.0 / 3.0, -2.5e-7, 7.0];
        m.head_w.data_mut()[0] = std::f64::consts::PI;
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.json");
        let run = RunInfo {
            dataset: "toy".into(),
            split: Some(SplitSpec::new(6, 2, 2)),
            scaler: Some(ScalerStats {
                mean: vec![0.1, 0.2],
                std: vec![1.5, 0.3],
            }),
            context: 24,
            variate_ratio: Some(0.5),
        };
        Checkpoint::from_model(&m, run.clone()).save(&path).unwrap();
        let back = Checkpoint::load(&path).unwrap();
        assert_eq!(back.run, run);
        assert_eq!(back.to_model().unwrap(), m);
    }

    #[test]
    fn rejects_foreign_files() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.json");
        let mut c = Checkpoint::from_model(&model(), RunInfo::default());
        c.magic = "NOPE".into();
        c.save(&path).unwrap();
        assert!(matches!(Checkpoint::load(&path), Err(Error::Checkpoint(_))));
        std::fs::write(&path, "not json").unwrap();
        assert!(Checkpoint::load(&path).is_err());
    }

    #[test]
    fn rejects_shape_tampering() {
        let mut c = Checkpoint::from_model(&model(), RunInfo::default());
        c.tensors.get_mut("head.b").unwrap().shape = vec![4];
        assert!(c.to_model().is_err());
    }
}
