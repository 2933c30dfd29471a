//! Unadjusted Langevin dynamics over the noise coordinates `z0`:
//! `z ← z + s·∇log π(z) + √(2s)·ε`.

use serde::{Deserialize, Serialize};

use crate::data::TokenSequence;
use crate::error::{Error, Result};
use crate::model::Lpt;
use crate::numerics::rng::standard_normals;
use crate::numerics::{RngStreams, Stream, StreamRng};

/// Key prefix separating chain initializations from other init-stream draws.
const INIT_TAG: u64 = 0x7a30_696e_6974;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitMode {
    /// Start from a fresh `N(0, I)` draw.
    #[default]
    FreshNoise,
    /// Start from a stored `z0`.
    WarmStart,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LangevinConfig {
    pub steps: usize,
    pub step_size: f64,
    pub init_mode: InitMode,
}

impl Default for LangevinConfig {
    fn default() -> Self {
        LangevinConfig {
            steps: 15,
            step_size: 0.1,
            init_mode: InitMode::FreshNoise,
        }
    }
}

impl LangevinConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.step_size.is_finite() && self.step_size >= 0.0) {
            return Err(Error::Config(format!(
                "step_size must be finite and non-negative, got {}",
                self.step_size
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChainState {
    pub z0: Vec<f64>,
    /// Target log-density at the most recent gradient evaluation; `None` before the first.
    pub log_density: Option<f64>,
    pub step: u64,
}

impl ChainState {
    pub fn new(z0: Vec<f64>) -> Self {
        ChainState {
            z0,
            log_density: None,
            step: 0,
        }
    }
}

/// A differentiable unnormalized log-density over `z0`.
pub trait Target {
    fn dim(&self) -> usize;
    fn log_density_grad(&self, z0: &[f64]) -> Result<(f64, Vec<f64>)>;
}

/// `p(z0 | x, y)` with either observation optional; with neither it is the prior.
#[derive(Clone, Copy)]
pub struct Posterior<'a> {
    pub model: &'a Lpt,
    pub x: Option<&'a TokenSequence>,
    pub y: Option<&'a [f64]>,
}

impl<'a> Posterior<'a> {
    pub fn new(model: &'a Lpt, x: Option<&'a TokenSequence>, y: Option<&'a [f64]>) -> Self {
        Posterior { model, x, y }
    }
}

impl Target for Posterior<'_> {
    fn dim(&self) -> usize {
        self.model.latent_dim()
    }

    fn log_density_grad(&self, z0: &[f64]) -> Result<(f64, Vec<f64>)> {
        self.model.posterior_grad(z0, self.x, self.y)
    }
}

/// One update with caller-supplied noise. Evaluates the gradient exactly once.
pub fn langevin_step<T: Target + ?Sized>(
    state: &ChainState,
    target: &T,
    step_size: f64,
    noise: &[f64],
) -> Result<ChainState> {
    let d = state.z0.len();
    if noise.len() != d || target.dim() != d {
        return Err(Error::ShapeMismatch {
            op: "langevin_step",
            expected: vec![target.dim()],
            got: vec![d, noise.len()],
        });
    }
    let (value, grad) = target
        .log_density_grad(&state.z0)
        .map_err(|e| e.context(format_args!("langevin step {}", state.step)))?;
    if !value.is_finite() || grad.iter().any(|g| !g.is_finite()) {
        return Err(Error::NumericFailure(format!(
            "non-finite target gradient at langevin step {}",
            state.step
        )));
    }
    let z0 = if step_size == 0.0 {
        state.z0.clone()
    } else {
        let amp = (2.0 * step_size).sqrt();
        state
            .z0
            .iter()
            .zip(&grad)
            .zip(noise)
            .map(|((z, g), e)| z + step_size * g + amp * e)
            .collect()
    };
    if z0.iter().any(|v: &f64| !v.is_finite()) {
        return Err(Error::NumericFailure(format!(
            "non-finite latent after langevin step {}",
            state.step
        )));
    }
    Ok(ChainState {
        z0,
        log_density: Some(value),
        step: state.step + 1,
    })
}

/// `steps` updates with noise from `rng`.
pub fn run_chain<T: Target + ?Sized>(
    target: &T,
    init: ChainState,
    steps: usize,
    step_size: f64,
    rng: &mut StreamRng,
) -> Result<ChainState> {
    let mut state = init;
    for _ in 0..steps {
        let noise = standard_normals(rng, state.z0.len());
        state = langevin_step(&state, target, step_size, &noise)?;
    }
    Ok(state)
}

/// Fresh `N(0, I)` starting point for the chain identified by `key`.
pub fn fresh_init(streams: &RngStreams, key: &[u64], d: usize) -> Vec<f64> {
    let k: Vec<u64> = std::iter::once(INIT_TAG).chain(key.iter().copied()).collect();
    standard_normals(&mut streams.rng(Stream::Init, &k), d)
}

/// Runs one chain per `cfg`. Initialization comes from the init stream or from
/// `warm`, and the noise from the Langevin stream, both keyed by `key`.
pub fn sample_posterior<T: Target + ?Sized>(
    target: &T,
    cfg: &LangevinConfig,
    streams: &RngStreams,
    key: &[u64],
    warm: Option<&[f64]>,
) -> Result<ChainState> {
    cfg.validate()?;
    let z0 = match (cfg.init_mode, warm) {
        (InitMode::FreshNoise, _) => fresh_init(streams, key, target.dim()),
        (InitMode::WarmStart, Some(z)) => z.to_vec(),
        (InitMode::WarmStart, None) => return Err(Error::Config("warm-start chain without a stored z0".into())),
    };
    let mut rng = streams.rng(Stream::Langevin, key);
    run_chain(target, ChainState::new(z0), cfg.steps, cfg.step_size, &mut rng)
}
