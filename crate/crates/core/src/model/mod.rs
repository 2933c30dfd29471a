//! The latent prompt Transformer: prior transport `z = U(z0)`, latent-prompted
//! causal generator `p(x | z)`, and Gaussian property regressor `p(y | z)`.
//!
//! Property values seen by this module are in standardized units; conversion
//! from raw oracle units happens in [`crate::train`] and [`crate::sgds`].

pub mod checkpoint;
pub mod config;
mod generator;
mod layers;
pub mod params;
mod regressor;
mod unet;

use rand::Rng;
use serde::{Deserialize, Serialize};

pub use checkpoint::Checkpoint;
pub use config::{CrossAttention, ModelConfig, RegressorKind, TransportMode};
pub use params::{Bound, Group, GroupMask, ParamSet};

use self::generator::{class_to_id, Generator};
use self::params::ParamBuilder;
use self::regressor::Regressor;
use self::unet::Unet;
use crate::data::{TokenSequence, EOS};
use crate::error::{Error, Result};
use crate::numerics::{Graph, RngStreams, Stream, StreamRng, Tensor, Var};

#[derive(Clone, Debug)]
struct Layout {
    unet: Option<Unet>,
    generator: Generator,
    regressor: Regressor,
}

impl Layout {
    fn build(cfg: &ModelConfig, pb: &mut ParamBuilder) -> Self {
        let unet = (cfg.transport == TransportMode::Unet).then(|| Unet::new(pb, cfg));
        let generator = Generator::new(pb, cfg);
        let regressor = Regressor::new(pb, cfg);
        Layout {
            unet,
            generator,
            regressor,
        }
    }
}

/// Log-density pieces of one posterior evaluation.
pub struct PosteriorTerms<'g> {
    pub total: Var<'g>,
    pub prior: Var<'g>,
    pub seq: Option<Var<'g>>,
    pub property: Option<Var<'g>>,
}

/// Scalar values of the learning objective at one `(x, y, z0)`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LikelihoodTerms {
    pub seq_log_prob: f64,
    pub property_log_density: f64,
    pub tokens: usize,
}

#[derive(Clone, Debug)]
pub struct Lpt {
    config: ModelConfig,
    layout: Layout,
    params: ParamSet,
}

impl Lpt {
    /// Fresh model with weights drawn from the init stream.
    pub fn new(config: ModelConfig, streams: &RngStreams) -> Result<Self> {
        config.validate()?;
        let mut rng = streams.rng(Stream::Init, &[0x5041_5241_4d53]);
        let mut pb = ParamBuilder::new(Some(&mut rng), config.init_std);
        let layout = Layout::build(&config, &mut pb);
        Ok(Lpt {
            config,
            layout,
            params: pb.finish(),
        })
    }

    /// All-zero parameters with the layout implied by `config`.
    pub fn zeroed(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut pb = ParamBuilder::new(None, 0.0);
        let layout = Layout::build(&config, &mut pb);
        Ok(Lpt {
            config,
            layout,
            params: pb.finish(),
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    pub fn param_count(&self) -> usize {
        self.params.count()
    }

    pub fn latent_dim(&self) -> usize {
        self.config.latent_dim()
    }

    pub fn bind<'g, 'p>(&'p self, graph: &'g Graph, mask: GroupMask) -> Bound<'g, 'p> {
        Bound::new(graph, &self.params, mask)
    }

    fn check_z(&self, z: &[f64], what: &'static str) -> Result<()> {
        if z.len() != self.latent_dim() {
            return Err(Error::ShapeMismatch {
                op: what,
                expected: vec![self.latent_dim()],
                got: vec![z.len()],
            });
        }
        if z.iter().any(|v| !v.is_finite()) {
            return Err(Error::NumericFailure(format!("{what}: non-finite latent")));
        }
        Ok(())
    }

    fn check_x(&self, x: &TokenSequence) -> Result<()> {
        if x.len() > self.config.max_len {
            return Err(Error::SequenceTooLong {
                len: x.len(),
                max_len: self.config.max_len,
            });
        }
        if let Some(&bad) = x.ids().iter().find(|&&i| i as usize >= self.config.vocab_size) {
            return Err(Error::UnknownId(bad));
        }
        Ok(())
    }

    fn check_y(&self, y: &[f64]) -> Result<()> {
        if y.len() != self.config.n_objectives {
            return Err(Error::ObjectiveMismatch {
                expected: self.config.n_objectives,
                got: y.len(),
            });
        }
        if y.iter().any(|v| !v.is_finite()) {
            return Err(Error::NumericFailure("non-finite property value".into()));
        }
        Ok(())
    }

    fn latent_shape(&self) -> [usize; 2] {
        [self.config.latent_tokens, self.config.latent_channels]
    }

    /// `U(z0)` as `[k, c]`; `z0` may be flat or already `[k, c]`.
    pub fn transport_var<'g>(&self, p: &Bound<'g, '_>, z0: Var<'g>) -> Var<'g> {
        let x = z0.reshape(&self.latent_shape());
        match &self.layout.unet {
            Some(u) => u.forward(p, x),
            None => x,
        }
    }

    pub fn seq_log_prob_var<'g>(&self, p: &Bound<'g, '_>, x: &TokenSequence, z: Var<'g>) -> Var<'g> {
        let latent = z.reshape(&self.latent_shape());
        self.layout.generator.log_prob(p, x.ids(), latent)
    }

    /// Predicted means `[1, M]`.
    pub fn predict_var<'g>(&self, p: &Bound<'g, '_>, z: Var<'g>) -> Var<'g> {
        self.layout.regressor.forward(p, z.reshape(&self.latent_shape()))
    }

    pub fn property_log_density_var<'g>(&self, p: &Bound<'g, '_>, y: &[f64], z: Var<'g>) -> Var<'g> {
        let mean = self.predict_var(p, z);
        let target = p.graph().constant(Tensor::new(vec![1, y.len()], y.to_vec()).unwrap());
        target.gaussian_log_density(Some(mean), &self.config.sigma2)
    }

    /// `log N(z0; 0, I) + [x] log p(x | U(z0)) + [y] log p(y | U(z0))`.
    pub fn posterior_var<'g>(
        &self,
        p: &Bound<'g, '_>,
        z0: Var<'g>,
        x: Option<&TokenSequence>,
        y: Option<&[f64]>,
    ) -> PosteriorTerms<'g> {
        let d = self.latent_dim();
        let prior = z0.reshape(&[d]).gaussian_log_density(None, &vec![1.0; d]);
        let mut total = prior;
        let (mut seq, mut property) = (None, None);
        if x.is_some() || y.is_some() {
            let z = self.transport_var(p, z0);
            if let Some(x) = x {
                let s = self.seq_log_prob_var(p, x, z);
                total = total.add(s);
                seq = Some(s);
            }
            if let Some(y) = y {
                let l = self.property_log_density_var(p, y, z);
                total = total.add(l);
                property = Some(l);
            }
        }
        PosteriorTerms {
            total,
            prior,
            seq,
            property,
        }
    }

    pub fn prior_transform(&self, z0: &[f64]) -> Result<Vec<f64>> {
        self.check_z(z0, "prior_transform")?;
        let g = Graph::new();
        let p = self.bind(&g, GroupMask::NONE);
        let z = self.transport_var(&p, g.constant(Tensor::vector(z0.to_vec())));
        g.check_finite()?;
        Ok(z.value().data().to_vec())
    }

    /// `log p(x | z)` for an already-transported latent `z`.
    pub fn seq_log_prob(&self, x: &TokenSequence, z: &[f64]) -> Result<f64> {
        self.check_z(z, "seq_log_prob")?;
        self.check_x(x)?;
        let g = Graph::new();
        let p = self.bind(&g, GroupMask::NONE);
        let v = self.seq_log_prob_var(&p, x, g.constant(Tensor::vector(z.to_vec())));
        g.check_finite()?;
        Ok(v.item())
    }

    /// Next-token law over output classes (class 0 is EOS, class `c` is id `c + 2`).
    pub fn next_token_probs(&self, prefix: &[u32], z: &[f64]) -> Result<Vec<f64>> {
        self.check_z(z, "next_token_probs")?;
        if prefix.len() >= self.config.max_len {
            return Err(Error::SequenceTooLong {
                len: prefix.len() + 1,
                max_len: self.config.max_len,
            });
        }
        self.check_x(&TokenSequence::new(prefix.to_vec())?)?;
        if prefix.contains(&EOS) {
            return Err(Error::InvalidSequence("prefix already terminated".into()));
        }
        let g = Graph::new();
        let p = self.bind(&g, GroupMask::NONE);
        let latent = g.constant(Tensor::new(self.latent_shape().to_vec(), z.to_vec()).unwrap());
        let logits = self.layout.generator.logits(&p, prefix, latent);
        let t = logits.value();
        let last = t.row(t.rows() - 1);
        let max = last.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = last.iter().map(|v| (v - max).exp()).collect();
        let s: f64 = e.iter().sum();
        let probs: Vec<f64> = e.iter().map(|v| v / s).collect();
        if probs.iter().any(|v| !v.is_finite()) {
            return Err(Error::NumericFailure("next-token distribution".into()));
        }
        Ok(probs)
    }

    /// Ancestral sampling until EOS or `max_len` ids.
    pub fn sample_sequence(&self, z: &[f64], rng: &mut StreamRng, temperature: f64) -> Result<TokenSequence> {
        if !(temperature > 0.0 && temperature.is_finite()) {
            return Err(Error::OutOfRange(format!("temperature {temperature}")));
        }
        let mut ids = Vec::new();
        while ids.len() < self.config.max_len {
            let mut probs = self.next_token_probs(&ids, z)?;
            if temperature != 1.0 {
                probs.iter_mut().for_each(|p| *p = p.powf(1.0 / temperature));
                let s: f64 = probs.iter().sum();
                probs.iter_mut().for_each(|p| *p /= s);
            }
            let class = draw_categorical(&probs, rng.random::<f64>());
            let id = class_to_id(class);
            ids.push(id);
            if id == EOS {
                break;
            }
        }
        TokenSequence::new(ids)
    }

    pub fn predict_property(&self, z: &[f64]) -> Result<Vec<f64>> {
        self.check_z(z, "predict_property")?;
        let g = Graph::new();
        let p = self.bind(&g, GroupMask::NONE);
        let v = self.predict_var(&p, g.constant(Tensor::vector(z.to_vec())));
        g.check_finite()?;
        Ok(v.value().data().to_vec())
    }

    pub fn property_log_density(&self, y: &[f64], z: &[f64]) -> Result<f64> {
        self.check_z(z, "property_log_density")?;
        self.check_y(y)?;
        let g = Graph::new();
        let p = self.bind(&g, GroupMask::NONE);
        let v = self.property_log_density_var(&p, y, g.constant(Tensor::vector(z.to_vec())));
        g.check_finite()?;
        Ok(v.item())
    }

    fn check_targets(&self, z0: &[f64], x: Option<&TokenSequence>, y: Option<&[f64]>) -> Result<()> {
        self.check_z(z0, "posterior")?;
        if let Some(x) = x {
            self.check_x(x)?;
        }
        if let Some(y) = y {
            self.check_y(y)?;
        }
        Ok(())
    }

    pub fn posterior_log_density_unnorm(
        &self,
        z0: &[f64],
        x: Option<&TokenSequence>,
        y: Option<&[f64]>,
    ) -> Result<f64> {
        self.check_targets(z0, x, y)?;
        let g = Graph::new();
        let p = self.bind(&g, GroupMask::NONE);
        let t = self.posterior_var(&p, g.constant(Tensor::vector(z0.to_vec())), x, y);
        g.check_finite()?;
        Ok(t.total.item())
    }

    /// Unnormalized posterior log-density and its gradient with respect to `z0`.
    pub fn posterior_grad(&self, z0: &[f64], x: Option<&TokenSequence>, y: Option<&[f64]>) -> Result<(f64, Vec<f64>)> {
        self.check_targets(z0, x, y)?;
        let g = Graph::new();
        let p = self.bind(&g, GroupMask::NONE);
        let z0v = g.leaf(Tensor::vector(z0.to_vec()));
        let t = self.posterior_var(&p, z0v, x, y);
        let mut grads = g.backward(t.total)?;
        Ok((t.total.item(), grads.take(z0v).into_data()))
    }

    /// Gradients of `log p(x | U(z0)) + log p(y | U(z0))` with respect to the
    /// parameter groups in `mask`, at fixed `z0`. Masked-out groups get zeros.
    pub fn likelihood_grads(
        &self,
        z0: &[f64],
        x: Option<&TokenSequence>,
        y: Option<&[f64]>,
        mask: GroupMask,
    ) -> Result<(LikelihoodTerms, Vec<Tensor>)> {
        self.check_targets(z0, x, y)?;
        let g = Graph::new();
        let p = self.bind(&g, mask);
        let z = self.transport_var(&p, g.constant(Tensor::vector(z0.to_vec())));
        let mut terms = LikelihoodTerms::default();
        let mut total: Option<Var> = None;
        if let Some(x) = x {
            let s = self.seq_log_prob_var(&p, x, z);
            terms.seq_log_prob = s.item();
            terms.tokens = x.len();
            total = Some(s);
        }
        if let Some(y) = y {
            let l = self.property_log_density_var(&p, y, z);
            terms.property_log_density = l.item();
            total = Some(match total {
                Some(t) => t.add(l),
                None => l,
            });
        }
        let Some(total) = total else {
            g.check_finite()?;
            return Ok((
                terms,
                self.params.tensors.iter().map(|t| Tensor::zeros(t.shape())).collect(),
            ));
        };
        let mut grads = g.backward(total)?;
        Ok((terms, p.param_grads(&mut grads)))
    }
}

/// Index of the first class whose cumulative probability exceeds `u`.
fn draw_categorical(probs: &[f64], u: f64) -> usize {
    let mut acc = 0.0;
    for (i, p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    // Rounding left `u` above the final cumulative sum: take the last class with mass.
    probs.iter().rposition(|&p| p > 0.0).unwrap_or(0)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny(transport: TransportMode) -> ModelConfig {
        ModelConfig {
            latent_tokens: 2,
            latent_channels: 4,
            n_layers: 1,
            embed_dim: 8,
            n_heads: 2,
            ffn_dim: 16,
            max_len: 4,
            vocab_size: 6,
            unet_width: 4,
            regressor_hidden: 8,
            transport,
            ..ModelConfig::default()
        }
    }

    #[test]
    fn identity_transport_is_exact() {
        let m = Lpt::new(tiny(TransportMode::Identity), &RngStreams::new(1)).unwrap();
        let z0: Vec<f64> = (0..8).map(|i| i as f64 * 0.3 - 1.0).collect();
        assert_eq!(m.prior_transform(&z0).unwrap(), z0);
    }

    #[test]
    fn transport_is_deterministic() {
        let m = Lpt::new(tiny(TransportMode::Unet), &RngStreams::new(1)).unwrap();
        let z0: Vec<f64> = (0..8).map(|i| (i as f64).sin()).collect();
        let a = m.prior_transform(&z0).unwrap();
        let b = m.prior_transform(&z0).unwrap();
        assert_eq!(
            a.iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
            b.iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        );
        assert!(m.prior_transform(&z0[..7]).is_err());
    }

    #[test]
    fn zero_head_gives_uniform_law() {
        let m = Lpt::new(tiny(TransportMode::Unet), &RngStreams::new(2)).unwrap();
        let z = vec![0.5; 8];
        let x = TokenSequence::new(vec![3, 5, EOS]).unwrap();
        let v = m.config().n_classes() as f64;
        assert!((m.seq_log_prob(&x, &z).unwrap() + 3.0 * v.ln()).abs() < 1e-12);
        assert_eq!(m.predict_property(&z).unwrap(), vec![0.0]);
    }

    #[test]
    fn property_density_closed_forms() {
        let mut cfg = tiny(TransportMode::Identity);
        cfg.sigma2 = vec![1.0];
        let m = Lpt::new(cfg, &RngStreams::new(3)).unwrap();
        let z = vec![0.1; 8];
        assert!((m.property_log_density(&[0.0], &z).unwrap() + 0.918_938_533_204_672_7).abs() < 1e-12);
        assert!((m.property_log_density(&[1.0], &z).unwrap() + 1.418_938_533_204_672_7).abs() < 1e-12);
        assert!(matches!(
            m.property_log_density(&[1.0, 2.0], &z),
            Err(Error::ObjectiveMismatch { .. })
        ));
    }

    #[test]
    fn prior_only_posterior_at_origin() {
        let m = Lpt::new(tiny(TransportMode::Unet), &RngStreams::new(4)).unwrap();
        let v = m.posterior_log_density_unnorm(&[0.0; 8], None, None).unwrap();
        assert!((v + 4.0 * (2.0 * std::f64::consts::PI).ln()).abs() < 1e-12);
    }

    #[test]
    fn over_long_sequence_rejected() {
        let m = Lpt::new(tiny(TransportMode::Identity), &RngStreams::new(5)).unwrap();
        let x = TokenSequence::new(vec![3, 3, 3, 3, EOS]).unwrap();
        assert!(matches!(
            m.seq_log_prob(&x, &[0.0; 8]),
            Err(Error::SequenceTooLong { len: 5, max_len: 4 })
        ));
    }

    #[test]
    fn categorical_draw_edges() {
        assert_eq!(draw_categorical(&[0.2, 0.8], 0.0), 0);
        assert_eq!(draw_categorical(&[0.2, 0.8], 0.2), 1);
        assert_eq!(draw_categorical(&[0.5, 0.5, 0.0], 0.999_999_999_999_999_9), 1);
    }
}
