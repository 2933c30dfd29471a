use serde::{Deserialize, Serialize};

use crate::data::N_RESERVED;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TransportMode {
    #[default]
    Unet,
    Identity,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CrossAttention {
    /// Every decoder block attends to the latent tokens.
    #[default]
    EveryBlock,
    /// Only the first decoder block does.
    FirstBlock,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RegressorKind {
    /// Three layers with GELU activations.
    #[default]
    Mlp,
    /// One affine map; makes the property model linear-Gaussian in the latent.
    Linear,
}

/// Architecture hyperparameters. The parameter layout is a pure function of this.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    /// Number of latent tokens `k`.
    pub latent_tokens: usize,
    /// Channels per latent token `c`; latent dimensionality is `k * c`.
    pub latent_channels: usize,
    pub n_layers: usize,
    pub embed_dim: usize,
    pub n_heads: usize,
    pub ffn_dim: usize,
    /// Longest sequence in ids, EOS included.
    pub max_len: usize,
    /// Vocabulary size including the three reserved ids.
    pub vocab_size: usize,
    /// Base channel width of the transport Unet.
    pub unet_width: usize,
    pub regressor: RegressorKind,
    pub regressor_hidden: usize,
    pub n_objectives: usize,
    /// Regression noise variance per objective, in standardized units.
    pub sigma2: Vec<f64>,
    pub transport: TransportMode,
    pub cross_attention: CrossAttention,
    pub init_std: f64,
    pub ln_eps: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            latent_tokens: 4,
            latent_channels: 256,
            n_layers: 3,
            embed_dim: 256,
            n_heads: 4,
            ffn_dim: 1024,
            max_len: 73,
            vocab_size: 112,
            unet_width: 70,
            regressor: RegressorKind::Mlp,
            regressor_hidden: 256,
            n_objectives: 1,
            sigma2: vec![0.25],
            transport: TransportMode::Unet,
            cross_attention: CrossAttention::EveryBlock,
            init_std: 0.02,
            ln_eps: 1e-5,
        }
    }
}

impl ModelConfig {
    pub fn latent_dim(&self) -> usize {
        self.latent_tokens * self.latent_channels
    }

    /// Output classes of the generator: EOS plus every non-reserved token.
    pub fn n_classes(&self) -> usize {
        self.vocab_size - (N_RESERVED as usize - 1)
    }

    pub fn head_dim(&self) -> usize {
        self.embed_dim / self.n_heads
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.latent_tokens == 0 || self.latent_channels == 0 {
            return bad("latent_tokens and latent_channels must be positive".into());
        }
        if self.max_len == 0 {
            return bad("max_len must be at least 1".into());
        }
        if self.vocab_size < N_RESERVED as usize {
            return bad(format!("vocab_size must be at least {N_RESERVED}"));
        }
        if self.embed_dim == 0 || self.n_heads == 0 || !self.embed_dim.is_multiple_of(self.n_heads) {
            return bad(format!(
                "embed_dim {} must be a positive multiple of n_heads {}",
                self.embed_dim, self.n_heads
            ));
        }
        if self.n_layers == 0 || self.ffn_dim == 0 || self.regressor_hidden == 0 {
            return bad("n_layers, ffn_dim and regressor_hidden must be positive".into());
        }
        if self.transport == TransportMode::Unet && self.unet_width == 0 {
            return bad("unet_width must be positive".into());
        }
        if self.n_objectives == 0 {
            return bad("n_objectives must be at least 1".into());
        }
        if self.sigma2.len() != self.n_objectives {
            return bad(format!(
                "sigma2 has {} entries for {} objectives",
                self.sigma2.len(),
                self.n_objectives
            ));
        }
        if self.sigma2.iter().any(|s| !(s.is_finite() && *s > 0.0)) {
            return bad("sigma2 entries must be finite and positive".into());
        }
        if !(self.init_std.is_finite() && self.init_std >= 0.0) || self.ln_eps.is_nan() || self.ln_eps <= 0.0 {
            return bad("init_std must be non-negative and ln_eps positive".into());
        }
        Ok(())
    }
}
