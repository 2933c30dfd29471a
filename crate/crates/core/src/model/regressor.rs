use super::config::{ModelConfig, RegressorKind};
use super::layers::Linear;
use super::params::{Bound, Group, ParamBuilder};
use crate::numerics::Var;

const G: Group = Group::Gamma;

/// Map from the flattened latent to one mean per objective: a three-layer GELU
/// MLP, or a single affine layer. The output layer starts at zero.
#[derive(Clone, Debug)]
pub(crate) struct Regressor {
    layers: Vec<Linear>,
}

impl Regressor {
    pub fn new(pb: &mut ParamBuilder, cfg: &ModelConfig) -> Self {
        let (d, h, m) = (cfg.latent_dim(), cfg.regressor_hidden, cfg.n_objectives);
        let layers = match cfg.regressor {
            RegressorKind::Mlp => vec![
                Linear::new(pb, "reg.l1", d, h, G, false),
                Linear::new(pb, "reg.l2", h, h, G, false),
                Linear::new(pb, "reg.l3", h, m, G, true),
            ],
            RegressorKind::Linear => vec![Linear::new(pb, "reg.linear", d, m, G, true)],
        };
        Regressor { layers }
    }

    /// `latent` is `[k, c]`; returns `[1, n_objectives]`.
    pub fn forward<'g>(&self, p: &Bound<'g, '_>, latent: Var<'g>) -> Var<'g> {
        let d = latent.shape().iter().product();
        let mut h = latent.reshape(&[1, d]);
        for (i, l) in self.layers.iter().enumerate() {
            if i > 0 {
                h = h.gelu();
            }
            h = l.forward(p, h);
        }
        h
    }
}
