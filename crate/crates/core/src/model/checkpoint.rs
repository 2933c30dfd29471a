//! Self-contained JSON snapshots of a model and the run state around it.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Group, Lpt, ModelConfig};
use crate::data::{Normalizer, Vocabulary};
use crate::error::{Error, Result};
use crate::numerics::{RngStreams, Tensor};
use crate::train::TrainerState;

pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NamedTensor {
    pub name: String,
    pub group: Group,
    pub tensor: Tensor,
}

/// Progress counters carried across resumptions.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Counters {
    pub epoch: u64,
    pub step: u64,
    pub iteration: u64,
    pub queries: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Checkpoint {
    pub format_version: u32,
    /// Which stage wrote this file: `pretrain`, `finetune` or `sgds`.
    pub phase: String,
    pub config: ModelConfig,
    pub params: Vec<NamedTensor>,
    /// Non-reserved tokens; ids follow from their sorted order.
    pub vocab: Option<Vec<String>>,
    pub normalizer: Option<Normalizer>,
    pub rng: RngStreams,
    pub counters: Counters,
    /// Optimizer moments, so training can resume where it stopped.
    pub trainer: Option<TrainerState>,
    /// Stage-specific state such as the current design population.
    #[serde(default)]
    pub extra: Option<serde_json::Value>,
}

impl Checkpoint {
    pub fn new(phase: &str, model: &Lpt, rng: RngStreams) -> Self {
        Checkpoint {
            format_version: FORMAT_VERSION,
            phase: phase.to_string(),
            config: model.config().clone(),
            params: model
                .params()
                .iter()
                .map(|(name, group, t)| NamedTensor {
                    name: name.to_string(),
                    group,
                    tensor: t.clone(),
                })
                .collect(),
            vocab: None,
            normalizer: None,
            rng,
            counters: Counters::default(),
            trainer: None,
            extra: None,
        }
    }

    pub fn with_vocab(mut self, vocab: &Vocabulary) -> Self {
        self.vocab = Some(vocab.tokens().map(str::to_string).collect());
        self
    }

    pub fn vocabulary(&self) -> Result<Option<Vocabulary>> {
        self.vocab.as_ref().map(Vocabulary::from_tokens).transpose()
    }

    /// Rebuilds the model, checking every tensor against the layout implied by the config.
    pub fn model(&self) -> Result<Lpt> {
        let mut model = Lpt::zeroed(self.config.clone()).map_err(|e| Error::Checkpoint(e.to_string()))?;
        let params = model.params_mut();
        if params.len() != self.params.len() {
            return Err(Error::Checkpoint(format!(
                "expected {} tensors, found {}",
                params.len(),
                self.params.len()
            )));
        }
        for (i, nt) in self.params.iter().enumerate() {
            if params.name(i) != nt.name || params.group(i) != nt.group {
                return Err(Error::Checkpoint(format!(
                    "tensor {i}: expected {}, found {}",
                    params.name(i),
                    nt.name
                )));
            }
            if params.tensor(i).shape() != nt.tensor.shape() || nt.tensor.data().len() != nt.tensor.numel() {
                return Err(Error::Checkpoint(format!(
                    "tensor {}: expected shape {:?}, found {:?}",
                    nt.name,
                    params.tensor(i).shape(),
                    nt.tensor.shape()
                )));
            }
            *params.tensor_mut(i) = nt.tensor.clone();
        }
        if !params.is_finite() {
            return Err(Error::Checkpoint("non-finite parameter values".into()));
        }
        Ok(model)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = serde_json::to_vec(self).map_err(|e| Error::Checkpoint(e.to_string()))?;
        crate::io::write_atomic(path, &bytes)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read(path).map_err(|e| Error::io(path, e))?;
        let ck: Checkpoint =
            serde_json::from_slice(&text).map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))?;
        if ck.format_version != FORMAT_VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported format_version {} (expected {FORMAT_VERSION})",
                ck.format_version
            )));
        }
        ck.config.validate().map_err(|e| Error::Checkpoint(e.to_string()))?;
        Ok(ck)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::TransportMode;

    fn small() -> ModelConfig {
        ModelConfig {
            latent_tokens: 2,
            latent_channels: 4,
            n_layers: 1,
            embed_dim: 8,
            n_heads: 2,
            ffn_dim: 8,
            max_len: 5,
            vocab_size: 5,
            unet_width: 2,
            regressor_hidden: 4,
            transport: TransportMode::Unet,
            ..ModelConfig::default()
        }
    }

    #[test]
    fn reload_is_bitwise() {
        let m = Lpt::new(small(), &RngStreams::new(9)).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ck.json");
        let mut ck = Checkpoint::new("pretrain", &m, RngStreams::new(9));
        ck = ck.with_vocab(&Vocabulary::from_tokens(["B", "A"]).unwrap());
        assert_eq!(ck.vocab, Some(vec!["A".to_string(), "B".to_string()]));
        ck.save(&path).unwrap();
        let back = Checkpoint::load(&path).unwrap();
        assert_eq!(back, ck);
        let m2 = back.model().unwrap();
        for i in 0..m.params().len() {
            let a = m.params().tensor(i).data().iter().map(|v| v.to_bits());
            let b = m2.params().tensor(i).data().iter().map(|v| v.to_bits());
            assert!(a.eq(b));
        }
        assert_eq!(back.vocabulary().unwrap().unwrap().len(), 5);
    }

    #[test]
    fn layout_mismatch_is_rejected() {
        let m = Lpt::new(small(), &RngStreams::new(1)).unwrap();
        let mut ck = Checkpoint::new("pretrain", &m, RngStreams::new(1));
        ck.config.embed_dim = 4;
        assert!(matches!(ck.model(), Err(Error::Checkpoint(_))));
        let mut ck = Checkpoint::new("pretrain", &m, RngStreams::new(1));
        ck.params.pop();
        assert!(matches!(ck.model(), Err(Error::Checkpoint(_))));
    }

    #[test]
    fn wrong_version_is_rejected() {
        let m = Lpt::new(small(), &RngStreams::new(1)).unwrap();
        let mut ck = Checkpoint::new("pretrain", &m, RngStreams::new(1));
        ck.format_version = 99;
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ck.json");
        ck.save(&path).unwrap();
        assert!(matches!(Checkpoint::load(&path), Err(Error::Checkpoint(_))));
    }
}
