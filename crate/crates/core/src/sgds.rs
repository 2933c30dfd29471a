//! Sampling with gradual distribution shifting.
//!
//! Each iteration conditions the model on property targets slightly beyond
//! those of the current top-`n` set, samples `m` sequences, scores them with
//! the oracle, keeps the top `n` of old and new together, and re-fits the
//! model to the kept set.
//!
//! Property values here are raw oracle units. The model sees them standardized
//! with the normalizer fixed at fine-tuning time.

use std::time::Instant;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{Normalizer, RankSpec, Rankable, TokenSequence, Vocabulary};
use crate::error::{Error, Result};
use crate::langevin::{run_chain, sample_posterior, ChainState, InitMode, LangevinConfig, Posterior};
use crate::model::Lpt;
use crate::numerics::{RngStreams, Stream};
use crate::oracle::OracleHub;
use crate::train::{finetune, TrainConfig, TrainerState};

const DONOR_TAG: u64 = 0x0064_6f6e_6f72;
const CHAIN_TAG: u64 = 0x7761_726d;
const DECODE_TAG: u64 = 0x6465_636f_6465;
const SEED_TAG: u64 = 0x7365_6564;
const REFIT_TAG: u64 = 0x0072_6566_6974;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ShiftConfig {
    pub iterations: usize,
    /// Candidates generated per iteration.
    pub proposals: usize,
    /// Size of the kept set.
    pub retained: usize,
    /// Increment per objective in raw units. When absent, `delta_fraction`
    /// times the seed standard deviation of each objective.
    pub delta: Option<Vec<f64>>,
    pub delta_fraction: f64,
    pub warm_steps: usize,
    pub step_size: f64,
    /// Chain length used to infer `z0` for the seed records.
    pub seed_steps: usize,
    pub temperature: f64,
    pub refit: TrainConfig,
}

impl Default for ShiftConfig {
    fn default() -> Self {
        ShiftConfig {
            iterations: 25,
            proposals: 2500,
            retained: 2500,
            delta: None,
            delta_fraction: 0.05,
            warm_steps: 2,
            step_size: 0.1,
            seed_steps: 15,
            temperature: 1.0,
            refit: TrainConfig {
                epochs: 10,
                ..TrainConfig::finetune()
            },
        }
    }
}

impl ShiftConfig {
    pub fn validate(&self, n_objectives: usize) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.proposals == 0 || self.retained == 0 {
            return bad("proposals and retained must be at least 1".into());
        }
        if let Some(d) = &self.delta {
            if d.len() != n_objectives {
                return bad(format!("delta has {} entries for {n_objectives} objectives", d.len()));
            }
            if d.iter().any(|v| !v.is_finite()) {
                return bad("delta must be finite".into());
            }
        }
        if !self.delta_fraction.is_finite() {
            return bad("delta_fraction must be finite".into());
        }
        if !(self.step_size.is_finite() && self.step_size >= 0.0) {
            return bad("step_size must be finite and non-negative".into());
        }
        if !(self.temperature.is_finite() && self.temperature > 0.0) {
            return bad("temperature must be positive".into());
        }
        self.refit.validate()
    }

    /// Raw-unit increments: explicit, or scaled seed standard deviations.
    pub fn resolve_delta(&self, seed_std: &[f64]) -> Vec<f64> {
        match &self.delta {
            Some(d) => d.clone(),
            None => seed_std.iter().map(|s| self.delta_fraction * s).collect(),
        }
    }
}

/// One scored sequence with the noise coordinates it came from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ShiftRecord {
    pub x: TokenSequence,
    /// Oracle values, raw units.
    pub y: Vec<f64>,
    pub z0: Vec<f64>,
    /// Insertion order; earlier records win ties.
    pub serial: u64,
    /// `(iteration, candidate)` that produced it; `None` for seed records.
    pub origin: Option<(u64, u64)>,
}

impl Rankable for ShiftRecord {
    fn y(&self) -> &[f64] {
        &self.y
    }
    fn serial(&self) -> u64 {
        self.serial
    }
    fn ids(&self) -> &[u32] {
        self.x.ids()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ShiftState {
    pub t: u64,
    /// Current top-`n`, best first.
    pub records: Vec<ShiftRecord>,
    /// Oracle submissions so far, seed annotations included.
    pub queries: u64,
    pub next_serial: u64,
    pub trainer: TrainerState,
}

/// A generated sequence awaiting annotation.
#[derive(Clone, Debug, PartialEq)]
pub struct Candidate {
    pub x: TokenSequence,
    pub z0: Vec<f64>,
    pub target: Vec<f64>,
    pub index: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IterationMetrics {
    pub t: u64,
    /// Best three values of the primary objective in rank order.
    pub top_y: Vec<f64>,
    /// Mean primary objective over the kept set.
    pub mean_top_n: f64,
    pub queries_total: u64,
    /// Fraction of the kept set meeting every constraint.
    pub constraint_satisfaction_rate: f64,
    /// Candidates lost to numeric or oracle failures.
    pub failed: u64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct IterationTiming {
    pub t: u64,
    pub wall_time_s: f64,
}

/// Everything one iteration produced.
#[derive(Clone, Debug, PartialEq)]
pub struct IterationOutcome {
    pub metrics: IterationMetrics,
    pub timing: IterationTiming,
    /// Oracle values of every annotated candidate.
    pub annotated: Vec<Vec<f64>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportEntry {
    pub rank: usize,
    pub seq: String,
    pub y: Vec<f64>,
    pub feasible: bool,
}

/// Immutable context of a run.
pub struct Sgds<'a> {
    pub cfg: ShiftConfig,
    pub spec: RankSpec,
    pub oracle: &'a OracleHub,
    pub vocab: &'a Vocabulary,
    pub normalizer: Normalizer,
    pub streams: RngStreams,
    /// Raw-unit increment per objective.
    pub delta: Vec<f64>,
}

impl<'a> Sgds<'a> {
    pub fn new(
        cfg: ShiftConfig,
        spec: RankSpec,
        oracle: &'a OracleHub,
        vocab: &'a Vocabulary,
        normalizer: Normalizer,
        streams: RngStreams,
        seed_std: &[f64],
    ) -> Result<Self> {
        spec.validate()?;
        cfg.validate(spec.len())?;
        if oracle.objectives().len() != spec.len() || normalizer.len() != spec.len() {
            return Err(Error::ObjectiveMismatch {
                expected: spec.len(),
                got: oracle.objectives().len().min(normalizer.len()),
            });
        }
        for (o, name) in spec.objectives.iter().zip(oracle.objectives()) {
            if &o.name != name {
                return Err(Error::Config(format!(
                    "objective {:?} scored by oracle {name:?}",
                    o.name
                )));
            }
        }
        let delta = cfg.resolve_delta(seed_std);
        Ok(Sgds {
            cfg,
            spec,
            oracle,
            vocab,
            normalizer,
            streams,
            delta,
        })
    }

    /// Target for one donor: free objectives move by `Δ` in their improving direction.
    pub fn shifted_target(&self, y: &[f64]) -> Vec<f64> {
        y.iter()
            .zip(&self.spec.objectives)
            .zip(&self.delta)
            .map(|((v, o), d)| if o.is_free() { v + o.direction.sign() * d } else { *v })
            .collect()
    }

    /// Builds `D⁰` from the top `n` of already-scored seed records, inferring each
    /// kept record's `z0` from `p(z0 | x, y)` with a fresh chain. `seed_queries` is
    /// the number of oracle calls that produced the seed scores.
    pub fn init_state(&self, model: &Lpt, seed: &[(TokenSequence, Vec<f64>)], seed_queries: u64) -> Result<ShiftState> {
        let ranked: Vec<ShiftRecord> = seed
            .iter()
            .enumerate()
            .map(|(i, (x, y))| ShiftRecord {
                x: x.clone(),
                y: y.clone(),
                z0: Vec::new(),
                serial: i as u64,
                origin: None,
            })
            .collect();
        let mut records = self.spec.top_n(&ranked, self.cfg.retained)?;
        let chain = LangevinConfig {
            steps: self.cfg.seed_steps,
            step_size: self.cfg.step_size,
            init_mode: InitMode::FreshNoise,
        };
        records.par_iter_mut().try_for_each(|r| -> Result<()> {
            let yn = self.normalizer.normalize(&r.y)?;
            let post = Posterior::new(model, Some(&r.x), Some(&yn));
            r.z0 = sample_posterior(&post, &chain, &self.streams, &[SEED_TAG, r.serial], None)?.z0;
            Ok(())
        })?;
        Ok(ShiftState {
            t: 0,
            records,
            queries: seed_queries,
            next_serial: seed.len() as u64,
            trainer: TrainerState::new(model, self.cfg.refit.weight_decay),
        })
    }

    /// `m` candidates conditioned on shifted donor targets. Candidates whose
    /// chain fails numerically are dropped and logged.
    pub fn propose(&self, state: &ShiftState, model: &Lpt) -> Vec<Result<Candidate>> {
        let t = state.t;
        (0..self.cfg.proposals as u64)
            .into_par_iter()
            .map(|c| {
                let mut pick = self.streams.rng(Stream::Sampling, &[DONOR_TAG, t, c]);
                let donor = &state.records[pick.random_range(0..state.records.len())];
                let target = self.shifted_target(&donor.y);
                let yn = self.normalizer.normalize(&target)?;
                let post = Posterior::new(model, None, Some(&yn));
                let mut noise = self.streams.rng(Stream::Langevin, &[CHAIN_TAG, t, c]);
                let st = run_chain(
                    &post,
                    ChainState::new(donor.z0.clone()),
                    self.cfg.warm_steps,
                    self.cfg.step_size,
                    &mut noise,
                )?;
                let x = self.decode(model, &st.z0, t, c)?;
                Ok(Candidate {
                    x,
                    z0: st.z0,
                    target,
                    index: c,
                })
            })
            .collect()
    }

    /// Samples the sequence for candidate `c` of iteration `t` from `z0`. Deterministic
    /// in its arguments, so a record's `x` can be regenerated from its origin.
    pub fn decode(&self, model: &Lpt, z0: &[f64], t: u64, c: u64) -> Result<TokenSequence> {
        let z = model.prior_transform(z0)?;
        let mut rng = self.streams.rng(Stream::Sampling, &[DECODE_TAG, t, c]);
        model.sample_sequence(&z, &mut rng, self.cfg.temperature)
    }

    /// Scores candidates. Returns kept records and the number of failures.
    pub fn annotate(&self, state: &mut ShiftState, candidates: &[Candidate]) -> Result<(Vec<ShiftRecord>, u64)> {
        let seqs = candidates
            .iter()
            .map(|c| self.vocab.decode(&c.x))
            .collect::<Result<Vec<String>>>()?;
        let scores = self.oracle.score_batch(&seqs);
        let mut out = Vec::new();
        let mut failed = 0;
        for (c, s) in candidates.iter().zip(scores) {
            match s {
                Ok(y) => {
                    out.push(ShiftRecord {
                        x: c.x.clone(),
                        y,
                        z0: c.z0.clone(),
                        serial: state.next_serial + c.index,
                        origin: Some((state.t, c.index)),
                    });
                }
                Err(e) => {
                    log::warn!("iteration {} candidate {}: {e}", state.t, c.index);
                    failed += 1;
                }
            }
        }
        Ok((out, failed))
    }

    /// Top `n` of the union under the ranking order.
    pub fn select_top_n(&self, current: &[ShiftRecord], new: Vec<ShiftRecord>) -> Result<Vec<ShiftRecord>> {
        let mut all = current.to_vec();
        all.extend(new);
        self.spec.top_n(&all, self.cfg.retained)
    }

    pub fn shift_iteration(&self, state: &mut ShiftState, model: &mut Lpt) -> Result<IterationOutcome> {
        let started = Instant::now();
        let t = state.t;
        let ctx = |e: Error| e.context(format_args!("shift iteration {t}"));
        let mut candidates = Vec::new();
        let mut failed = 0u64;
        for (c, r) in self.propose(state, model).into_iter().enumerate() {
            match r {
                Ok(cand) => candidates.push(cand),
                Err(e @ Error::NumericFailure(_)) => {
                    log::warn!("iteration {t} candidate {c} dropped: {e}");
                    failed += 1;
                }
                Err(e) => return Err(ctx(e)),
            }
        }
        let (new, oracle_failed) = self.annotate(state, &candidates).map_err(ctx)?;
        failed += oracle_failed;
        // Every proposal slot counts as a query, whether or not it was scored.
        state.queries += self.cfg.proposals as u64;
        state.next_serial += self.cfg.proposals as u64;
        let annotated: Vec<Vec<f64>> = new.iter().map(|r| r.y.clone()).collect();
        state.records = self.select_top_n(&state.records, new)?;

        let data = state
            .records
            .iter()
            .map(|r| Ok((r.x.clone(), self.normalizer.normalize(&r.y)?)))
            .collect::<Result<Vec<_>>>()?;
        finetune(
            model,
            &data,
            &self.cfg.refit,
            &self.streams,
            &[REFIT_TAG, t],
            &mut state.trainer,
            None,
        )
        .map_err(ctx)?;
        state.t += 1;
        Ok(IterationOutcome {
            metrics: self.metrics(state, failed),
            timing: IterationTiming {
                t: state.t,
                wall_time_s: started.elapsed().as_secs_f64(),
            },
            annotated,
        })
    }

    fn primary(&self) -> usize {
        self.spec.objectives.iter().position(|o| o.is_free()).unwrap_or(0)
    }

    pub fn metrics(&self, state: &ShiftState, failed: u64) -> IterationMetrics {
        let p = self.primary();
        let n = state.records.len().max(1) as f64;
        IterationMetrics {
            t: state.t,
            top_y: state.records.iter().take(3).map(|r| r.y[p]).collect(),
            mean_top_n: state.records.iter().map(|r| r.y[p]).sum::<f64>() / n,
            queries_total: state.queries,
            constraint_satisfaction_rate: state.records.iter().filter(|r| self.spec.satisfies(&r.y)).count() as f64 / n,
            failed,
        }
    }

    /// Runs the remaining iterations, calling `on_iteration` after each.
    pub fn run(
        &self,
        state: &mut ShiftState,
        model: &mut Lpt,
        mut on_iteration: impl FnMut(&IterationOutcome, &ShiftState, &Lpt) -> Result<()>,
    ) -> Result<Vec<IterationOutcome>> {
        let mut out = Vec::new();
        while (state.t as usize) < self.cfg.iterations {
            let o = self.shift_iteration(state, model)?;
            on_iteration(&o, state, model)?;
            out.push(o);
        }
        Ok(out)
    }

    pub fn report(&self, state: &ShiftState) -> Result<Vec<ReportEntry>> {
        state
            .records
            .iter()
            .enumerate()
            .map(|(i, r)| {
                Ok(ReportEntry {
                    rank: i + 1,
                    seq: self.vocab.decode(&r.x)?,
                    y: r.y.clone(),
                    feasible: self.spec.satisfies(&r.y),
                })
            })
            .collect()
    }
}

/// A sequence with its raw oracle values.
pub type Scored = (TokenSequence, Vec<f64>);

/// Annotates seed sequences with the oracle, dropping failures. Returns the
/// scored records and the number of queries spent.
pub fn annotate_seed(oracle: &OracleHub, vocab: &Vocabulary, seqs: &[TokenSequence]) -> Result<(Vec<Scored>, u64)> {
    let text = seqs.iter().map(|x| vocab.decode(x)).collect::<Result<Vec<_>>>()?;
    let scores = oracle.score_batch(&text);
    let mut out = Vec::new();
    for (x, s) in seqs.iter().zip(scores) {
        match s {
            Ok(y) => out.push((x.clone(), y)),
            Err(e) => log::warn!(
                "seed sequence {:?} not scored: {e}",
                vocab.decode(x).unwrap_or_default()
            ),
        }
    }
    Ok((out, seqs.len() as u64))
}
