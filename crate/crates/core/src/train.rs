//! Approximate maximum-likelihood learning. Each record gets one fresh
//! posterior sample `z0`, and the parameters ascend the log-likelihood of the
//! data at that sample.
//!
//! Pretraining sees sequences only and moves the transport and the generator.
//! Fine-tuning sees sequences with standardized properties and moves all three
//! parameter groups.

use std::time::Instant;

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::TokenSequence;
use crate::error::{Error, Result};
use crate::langevin::{sample_posterior, InitMode, LangevinConfig, Posterior};
use crate::model::{Group, GroupMask, LikelihoodTerms, Lpt};
use crate::numerics::{
    adamw_step, clip_global_norm, cosine_lr, AdamWConfig, LrSchedule, OptimState, RngStreams, Stream, Tensor,
};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Pretrain,
    Finetune,
}

impl Phase {
    fn mask(self) -> GroupMask {
        match self {
            Phase::Pretrain => GroupMask::of(&[Group::Alpha, Group::Beta]),
            Phase::Finetune => GroupMask::ALL,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    /// Peak learning rate of the prior transport.
    pub lr_prior: f64,
    /// Peak learning rate of the sequence generator.
    pub lr_generator: f64,
    /// Peak learning rate of the property regressor.
    pub lr_regressor: f64,
    /// Cosine schedule end point as a fraction of each peak rate.
    pub lr_final_ratio: f64,
    pub weight_decay: f64,
    /// Global gradient-norm cap.
    pub clip_norm: f64,
    pub langevin: LangevinConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self::pretrain()
    }
}

impl TrainConfig {
    /// 30 epochs, 7.5e-4 annealed to 7.5e-5.
    pub fn pretrain() -> Self {
        TrainConfig {
            epochs: 30,
            batch_size: 256,
            lr_prior: 7.5e-4,
            lr_generator: 7.5e-4,
            lr_regressor: 7.5e-4,
            lr_final_ratio: 0.1,
            weight_decay: 0.1,
            clip_norm: 1.0,
            langevin: LangevinConfig::default(),
        }
    }

    /// 10 epochs, 3e-4 annealed to 7.5e-5.
    pub fn finetune() -> Self {
        TrainConfig {
            epochs: 10,
            lr_prior: 3e-4,
            lr_generator: 3e-4,
            lr_regressor: 3e-4,
            lr_final_ratio: 0.25,
            ..Self::pretrain()
        }
    }

    pub fn lr(&self, group: Group) -> f64 {
        match group {
            Group::Alpha => self.lr_prior,
            Group::Beta => self.lr_generator,
            Group::Gamma => self.lr_regressor,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1".into());
        }
        for g in Group::ALL {
            let lr = self.lr(g);
            if !(lr.is_finite() && lr >= 0.0) {
                return bad(format!("learning rate {lr} for {g:?} must be finite and non-negative"));
            }
        }
        if !(self.lr_final_ratio.is_finite() && (0.0..=1.0).contains(&self.lr_final_ratio)) {
            return bad("lr_final_ratio must lie in [0, 1]".into());
        }
        if !(self.weight_decay.is_finite() && self.weight_decay >= 0.0) {
            return bad("weight_decay must be finite and non-negative".into());
        }
        if self.clip_norm.is_nan() || self.clip_norm <= 0.0 {
            return bad("clip_norm must be positive".into());
        }
        if self.langevin.init_mode != InitMode::FreshNoise {
            return bad("training chains start from fresh noise".into());
        }
        self.langevin.validate()
    }
}

/// Optimizer moments (one set per parameter group) and progress counters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainerState {
    pub optim: Vec<OptimState>,
    /// Optimizer steps taken so far, across every call.
    pub step: u64,
    /// Completed epochs, across every call.
    pub epoch: u64,
}

impl TrainerState {
    /// Decoupled weight decay applies to matrices and higher-rank tensors only.
    pub fn new(model: &Lpt, weight_decay: f64) -> Self {
        let p = model.params();
        let optim = Group::ALL
            .iter()
            .map(|&g| {
                let idx = p.indices_of(g);
                let cfg = AdamWConfig {
                    weight_decay,
                    ..AdamWConfig::default()
                };
                let decay = idx.iter().map(|&i| p.tensor(i).shape().len() >= 2).collect();
                OptimState::new(cfg, idx.iter().map(|&i| p.tensor(i))).with_decay_mask(decay)
            })
            .collect();
        TrainerState {
            optim,
            step: 0,
            epoch: 0,
        }
    }

    fn check(&self, model: &Lpt) -> Result<()> {
        let p = model.params();
        let ok = self.optim.len() == 3
            && Group::ALL.iter().all(|&g| {
                let idx = p.indices_of(g);
                let st = &self.optim[g.index()];
                st.first.len() == idx.len()
                    && idx
                        .iter()
                        .zip(&st.first)
                        .all(|(&i, m)| m.shape() == p.tensor(i).shape())
            });
        if ok {
            Ok(())
        } else {
            Err(Error::Checkpoint(
                "optimizer state does not match the model layout".into(),
            ))
        }
    }
}

/// Per-epoch summary. Everything here is a deterministic function of the seed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub phase: Phase,
    pub epoch: u64,
    pub step: u64,
    /// Mean `-log p(x | z)` per id, EOS included, at the sampled posteriors.
    pub seq_nll_per_token: f64,
    /// Mean `-log p(y | z)` per record in standardized units; zero in pretraining.
    pub property_nll: f64,
    /// Mean pre-clipping global gradient norm over the epoch's batches.
    pub grad_norm: f64,
    /// Same, split by prior, generator and regressor.
    pub grad_norm_groups: [f64; 3],
    /// Learning rates used by the last batch, per group.
    pub lr: [f64; 3],
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EpochTiming {
    pub epoch: u64,
    pub wall_time_s: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub epochs: Vec<EpochMetrics>,
    pub timings: Vec<EpochTiming>,
}

/// One training example; `y` is in standardized units.
#[derive(Clone, Copy, Debug)]
pub struct Example<'a> {
    pub x: &'a TokenSequence,
    pub y: Option<&'a [f64]>,
}

/// Called after every epoch, e.g. to write a checkpoint.
pub type EpochHook<'h> = dyn FnMut(&EpochMetrics, &Lpt, &TrainerState) -> Result<()> + 'h;

/// Algorithm 1: sequences only. `key` separates the random streams of distinct runs.
pub fn pretrain(
    model: &mut Lpt,
    data: &[TokenSequence],
    cfg: &TrainConfig,
    streams: &RngStreams,
    key: &[u64],
    state: &mut TrainerState,
    hook: Option<&mut EpochHook>,
) -> Result<TrainReport> {
    let examples: Vec<Example> = data.iter().map(|x| Example { x, y: None }).collect();
    run(model, &examples, Phase::Pretrain, cfg, streams, key, state, hook)
}

/// Algorithm 2: sequences with standardized properties.
pub fn finetune(
    model: &mut Lpt,
    data: &[(TokenSequence, Vec<f64>)],
    cfg: &TrainConfig,
    streams: &RngStreams,
    key: &[u64],
    state: &mut TrainerState,
    hook: Option<&mut EpochHook>,
) -> Result<TrainReport> {
    let examples: Vec<Example> = data.iter().map(|(x, y)| Example { x, y: Some(y) }).collect();
    run(model, &examples, Phase::Finetune, cfg, streams, key, state, hook)
}

struct BatchSums {
    terms: LikelihoodTerms,
    grads: Vec<Tensor>,
}

#[allow(clippy::too_many_arguments)]
fn run(
    model: &mut Lpt,
    data: &[Example],
    phase: Phase,
    cfg: &TrainConfig,
    streams: &RngStreams,
    key: &[u64],
    state: &mut TrainerState,
    mut hook: Option<&mut EpochHook>,
) -> Result<TrainReport> {
    cfg.validate()?;
    state.check(model)?;
    if data.is_empty() {
        return Err(Error::EmptyCorpus("no training records".into()));
    }
    if phase == Phase::Finetune {
        if let Some(i) = data.iter().position(|e| e.y.is_none()) {
            return Err(Error::MissingProperty { index: i });
        }
    }
    let mask = phase.mask();
    let n_batches = data.len().div_ceil(cfg.batch_size);
    let schedule = LrSchedule {
        lr_max: 1.0,
        lr_min: cfg.lr_final_ratio,
        total_steps: (cfg.epochs * n_batches).saturating_sub(1) as u64,
    };
    let groups: Vec<Vec<usize>> = Group::ALL.iter().map(|&g| model.params().indices_of(g)).collect();
    let mut report = TrainReport::default();
    let mut local_step = 0u64;

    for _ in 0..cfg.epochs {
        let started = Instant::now();
        let epoch = state.epoch;
        let mut order: Vec<usize> = (0..data.len()).collect();
        let shuffle_key: Vec<u64> = key.iter().copied().chain([epoch]).collect();
        order.shuffle(&mut streams.rng(Stream::Shuffle, &shuffle_key));

        let (mut nll, mut tokens, mut prop, mut norm_sum) = (0.0, 0usize, 0.0, 0.0);
        let mut group_norm_sum = [0.0; 3];
        let mut last_lr = [0.0; 3];
        for (b, batch) in order.chunks(cfg.batch_size).enumerate() {
            let ctx = |e: Error| e.context(format_args!("{phase:?} epoch {epoch} batch {b}"));
            let sums = batch_gradients(model, data, batch, mask, cfg, streams, key, state.step).map_err(ctx)?;
            nll -= sums.terms.seq_log_prob;
            tokens += sums.terms.tokens;
            prop -= sums.terms.property_log_density;

            // Ascent on the mean log-likelihood is descent on its negation.
            let scale = -1.0 / batch.len() as f64;
            let mut grads = sums.grads;
            grads.iter_mut().for_each(|g| g.scale_inplace(scale));
            for (gi, idx) in groups.iter().enumerate() {
                group_norm_sum[gi] += idx.iter().map(|&i| grads[i].sq_norm()).sum::<f64>().sqrt();
            }
            norm_sum += clip_global_norm(grads.iter_mut(), cfg.clip_norm);
            if grads.iter().any(|g| !g.is_finite()) {
                return Err(ctx(Error::NumericFailure("non-finite gradient".into())));
            }

            let factor = cosine_lr(local_step, &schedule)?;
            for g in Group::ALL {
                let lr = cfg.lr(g) * factor;
                last_lr[g.index()] = if mask.contains(g) { lr } else { 0.0 };
                if !mask.contains(g) || lr == 0.0 {
                    continue;
                }
                let idx = &groups[g.index()];
                let g_grads: Vec<Tensor> = idx
                    .iter()
                    .map(|&i| std::mem::replace(&mut grads[i], Tensor::scalar(0.0)))
                    .collect();
                let params = model.params_mut();
                let mut tensors: Vec<Tensor> = idx
                    .iter()
                    .map(|&i| std::mem::replace(params.tensor_mut(i), Tensor::scalar(0.0)))
                    .collect();
                let mut refs: Vec<&mut Tensor> = tensors.iter_mut().collect();
                adamw_step(&mut refs, &g_grads, &mut state.optim[g.index()], lr)?;
                for (&i, t) in idx.iter().zip(tensors) {
                    *params.tensor_mut(i) = t;
                }
            }
            if !model.params().is_finite() {
                return Err(ctx(Error::NumericFailure("non-finite parameters after update".into())));
            }
            state.step += 1;
            local_step += 1;
        }
        state.epoch += 1;
        let nb = n_batches as f64;
        let metrics = EpochMetrics {
            phase,
            epoch: state.epoch,
            step: state.step,
            seq_nll_per_token: nll / tokens.max(1) as f64,
            property_nll: prop / data.len() as f64,
            grad_norm: norm_sum / nb,
            grad_norm_groups: group_norm_sum.map(|v| v / nb),
            lr: last_lr,
        };
        if let Some(h) = hook.as_deref_mut() {
            h(&metrics, model, state)?;
        }
        report.epochs.push(metrics);
        report.timings.push(EpochTiming {
            epoch: state.epoch,
            wall_time_s: started.elapsed().as_secs_f64(),
        });
    }
    Ok(report)
}

/// Summed log-likelihood gradients over `batch`. Chains run in parallel; the
/// sum is taken in batch order so the result does not depend on scheduling.
#[allow(clippy::too_many_arguments)]
fn batch_gradients(
    model: &Lpt,
    data: &[Example],
    batch: &[usize],
    mask: GroupMask,
    cfg: &TrainConfig,
    streams: &RngStreams,
    key: &[u64],
    step: u64,
) -> Result<BatchSums> {
    let mut sums = BatchSums {
        terms: LikelihoodTerms::default(),
        grads: model
            .params()
            .iter()
            .map(|(_, _, t)| Tensor::zeros(t.shape()))
            .collect(),
    };
    let width = rayon::current_num_threads().max(1) * 2;
    for chunk in batch.chunks(width) {
        let parts: Vec<Result<(LikelihoodTerms, Vec<Tensor>)>> = chunk
            .par_iter()
            .map(|&i| {
                let e = data[i];
                let chain_key: Vec<u64> = key.iter().copied().chain([step, i as u64]).collect();
                let target = Posterior::new(model, Some(e.x), e.y);
                let chain = sample_posterior(&target, &cfg.langevin, streams, &chain_key, None)?;
                model.likelihood_grads(&chain.z0, Some(e.x), e.y, mask)
            })
            .collect();
        for part in parts {
            let (terms, grads) = part?;
            sums.terms.seq_log_prob += terms.seq_log_prob;
            sums.terms.property_log_density += terms.property_log_density;
            sums.terms.tokens += terms.tokens;
            for (acc, g) in sums.grads.iter_mut().zip(&grads) {
                acc.add_assign(g);
            }
        }
    }
    Ok(sums)
}
