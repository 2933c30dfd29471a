use std::fs;
use std::path::{Path, PathBuf};

use lpt_core::data::{Corpus, Normalizer, TokenSequence, Vocabulary};
use lpt_core::io::{write_atomic, write_jsonl};
use lpt_core::langevin::{fresh_init, sample_posterior, Posterior};
use lpt_core::model::{Checkpoint, Lpt};
use lpt_core::numerics::{RngStreams, Stream};
use lpt_core::sgds::{annotate_seed, IterationMetrics, IterationTiming, Sgds, ShiftState};
use lpt_core::train::{finetune, pretrain, EpochMetrics, EpochTiming, TrainerState};
use lpt_core::{Error, Result};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::config::Loaded;

const PRETRAIN_KEY: u64 = 1;
const FINETUNE_KEY: u64 = 2;
const SAMPLE_KEY: u64 = 3;
const EVAL_KEY: u64 = 4;

/// Fixed output layout under the configured output directory.
pub struct RunDir {
    root: PathBuf,
}

impl RunDir {
    fn create(root: &Path) -> Result<Self> {
        for sub in ["checkpoints", "metrics", "reports"] {
            let d = root.join(sub);
            fs::create_dir_all(&d).map_err(|e| Error::Config(format!("{}: {e}", d.display())))?;
        }
        Ok(RunDir {
            root: root.to_path_buf(),
        })
    }

    fn checkpoint(&self, name: &str) -> PathBuf {
        self.root.join("checkpoints").join(format!("{name}.json"))
    }

    fn metrics(&self, name: &str) -> PathBuf {
        self.root.join("metrics").join(format!("{name}.jsonl"))
    }

    fn report(&self, name: &str) -> PathBuf {
        self.root.join("reports").join(name)
    }

    fn echo_config(&self, cfg: &Loaded, command: &str) -> Result<()> {
        write_atomic(
            &self.root.join(format!("{command}.config.toml")),
            cfg.to_toml().as_bytes(),
        )
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut bytes = serde_json::to_vec_pretty(value).expect("report serializes");
    bytes.push(b'\n');
    write_atomic(path, &bytes)
}

/// Previously written metric lines, kept when a run resumes.
fn earlier_lines(path: &Path, keep: usize) -> Vec<serde_json::Value> {
    fs::read_to_string(path)
        .unwrap_or_default()
        .lines()
        .filter_map(|l| serde_json::from_str(l).ok())
        .take(keep)
        .collect()
}

fn corpus_path(cfg: &Loaded) -> Result<&Path> {
    cfg.cfg
        .data
        .corpus
        .as_deref()
        .ok_or_else(|| Error::Config("data.corpus is required for this command".into()))
}

fn vocabulary(cfg: &Loaded, ck: Option<&Checkpoint>) -> Result<Vocabulary> {
    if let Some(v) = ck.map(Checkpoint::vocabulary).transpose()?.flatten() {
        return Ok(v);
    }
    match &cfg.cfg.data.vocab {
        Some(p) => Vocabulary::load(p),
        None => Vocabulary::build(corpus_path(cfg)?),
    }
}

fn load_checkpoint(path: Option<&Path>) -> Result<Checkpoint> {
    let path = path.ok_or_else(|| Error::Config("--checkpoint is required for this command".into()))?;
    Checkpoint::load(path).map_err(|e| match e {
        Error::Io { path, source } => Error::Checkpoint(format!("{}: {source}", path.display())),
        e => e,
    })
}

/// Rebuilds the model and, if the config file set a model section, checks it agrees.
fn checkpoint_model(cfg: &mut Loaded, ck: &Checkpoint, vocab: &Vocabulary) -> Result<Lpt> {
    if cfg.has_section("model") {
        cfg.resolve_model(vocab.len())?;
        if cfg.cfg.model != ck.config {
            return Err(Error::Checkpoint(
                "checkpoint model configuration differs from the [model] section".into(),
            ));
        }
    }
    cfg.cfg.model = ck.config.clone();
    if vocab.len() != ck.config.vocab_size {
        return Err(Error::Checkpoint(format!(
            "checkpoint expects {} token ids, vocabulary has {}",
            ck.config.vocab_size,
            vocab.len()
        )));
    }
    ck.model()
}

fn streams(cfg: &Loaded) -> RngStreams {
    RngStreams::new(cfg.cfg.seed)
}

fn dry_run(cfg: &Loaded) -> Result<()> {
    print!("{}", cfg.to_toml());
    Ok(())
}

pub fn cmd_pretrain(mut cfg: Loaded, checkpoint: Option<&Path>, dry: bool) -> Result<()> {
    let resume = checkpoint.map(|p| load_checkpoint(Some(p))).transpose()?;
    let vocab = vocabulary(&cfg, resume.as_ref())?;
    let mut model = match &resume {
        Some(ck) => checkpoint_model(&mut cfg, ck, &vocab)?,
        None => {
            cfg.resolve_model(vocab.len())?;
            Lpt::zeroed(cfg.cfg.model.clone())?
        }
    };
    let corpus = Corpus::load(corpus_path(&cfg)?, &vocab, cfg.cfg.model.max_len)?;
    if dry {
        return dry_run(&cfg);
    }
    let streams = streams(&cfg);
    let mut state = match &resume {
        Some(ck) => ck
            .trainer
            .clone()
            .ok_or_else(|| Error::Checkpoint("checkpoint has no optimizer state to resume".into()))?,
        None => {
            model = Lpt::new(cfg.cfg.model.clone(), &streams)?;
            TrainerState::new(&model, cfg.cfg.training.pretrain.weight_decay)
        }
    };
    let dir = RunDir::create(&cfg.cfg.output_dir)?;
    dir.echo_config(&cfg, "pretrain")?;
    let data = corpus.sequences();
    log::info!(
        "pretraining {} parameters on {} sequences for {} epochs",
        model.param_count(),
        data.len(),
        cfg.cfg.training.pretrain.epochs
    );
    let (rows, timings) = train_phase(
        &cfg,
        &dir,
        "pretrain",
        &vocab,
        None,
        &mut model,
        &mut state,
        |m, s, hook| {
            pretrain(
                m,
                &data,
                &cfg.cfg.training.pretrain,
                &streams,
                &[PRETRAIN_KEY],
                s,
                Some(hook),
            )
        },
    )?;
    write_json(
        &dir.report("pretrain.json"),
        &json!({
            "params": model.param_count(),
            "sequences": data.len(),
            "epochs": rows.len(),
            "final": rows.last(),
            "wall_time_s": timings.iter().map(|t| t.wall_time_s).sum::<f64>(),
        }),
    )
}

/// Runs one training phase, checkpointing and rewriting metrics after every epoch.
#[allow(clippy::too_many_arguments)]
fn train_phase(
    cfg: &Loaded,
    dir: &RunDir,
    phase: &str,
    vocab: &Vocabulary,
    normalizer: Option<&Normalizer>,
    model: &mut Lpt,
    state: &mut TrainerState,
    run: impl FnOnce(&mut Lpt, &mut TrainerState, &mut lpt_core::train::EpochHook) -> Result<lpt_core::train::TrainReport>,
) -> Result<(Vec<EpochMetrics>, Vec<EpochTiming>)> {
    let metrics_path = dir.metrics(phase);
    let timings_path = dir.metrics(&format!("{phase}_timings"));
    let done = state.epoch as usize;
    let mut rows: Vec<serde_json::Value> = earlier_lines(&metrics_path, done);
    let mut new_rows = Vec::new();
    let mut timing_rows = earlier_lines(&timings_path, done);
    let mut timings = Vec::new();
    let mut last = std::time::Instant::now();
    let mut hook = |m: &EpochMetrics, model: &Lpt, st: &TrainerState| -> Result<()> {
        log::info!(
            "{phase} epoch {}: nll/token {:.4}, property nll {:.4}, grad norm {:.3}",
            m.epoch,
            m.seq_nll_per_token,
            m.property_nll,
            m.grad_norm
        );
        let t = EpochTiming {
            epoch: m.epoch,
            wall_time_s: last.elapsed().as_secs_f64(),
        };
        last = std::time::Instant::now();
        rows.push(serde_json::to_value(m).expect("metrics serialize"));
        timing_rows.push(serde_json::to_value(&t).expect("timing serializes"));
        new_rows.push(m.clone());
        timings.push(t);
        write_jsonl(&metrics_path, &rows)?;
        write_jsonl(&timings_path, &timing_rows)?;
        let mut ck = Checkpoint::new(phase, model, streams(cfg)).with_vocab(vocab);
        ck.normalizer = normalizer.cloned();
        ck.trainer = Some(st.clone());
        ck.counters.epoch = st.epoch;
        ck.counters.step = st.step;
        ck.save(&dir.checkpoint(phase))
    };
    run(model, state, &mut hook)?;
    Ok((new_rows, timings))
}

pub fn cmd_finetune(mut cfg: Loaded, checkpoint: Option<&Path>, dry: bool) -> Result<()> {
    let ck = load_checkpoint(checkpoint)?;
    let vocab = vocabulary(&cfg, Some(&ck))?;
    let mut model = checkpoint_model(&mut cfg, &ck, &vocab)?;
    let props = cfg
        .cfg
        .data
        .properties
        .clone()
        .ok_or_else(|| Error::Config("data.properties is required for finetune".into()))?;
    let mut corpus = Corpus::load(corpus_path(&cfg)?, &vocab, model.config().max_len)?;
    corpus.attach_properties(&props, model.config().n_objectives)?;
    let mut rows = Vec::with_capacity(corpus.len());
    for (i, r) in corpus.records.iter().enumerate() {
        let y = r.y.clone().ok_or(Error::MissingProperty { index: i })?;
        rows.push((r.x.clone(), y));
    }
    let normalizer = match &ck.normalizer {
        Some(n) => n.clone(),
        None => Normalizer::fit(&corpus)?,
    };
    if normalizer.len() != model.config().n_objectives {
        return Err(Error::Checkpoint(
            "normalizer width differs from the model's objectives".into(),
        ));
    }
    if dry {
        return dry_run(&cfg);
    }
    let data: Vec<(TokenSequence, Vec<f64>)> = rows
        .into_iter()
        .map(|(x, y)| Ok((x, normalizer.normalize(&y)?)))
        .collect::<Result<_>>()?;
    let mut state = match (&ck.trainer, ck.phase.as_str()) {
        (Some(t), "finetune") => t.clone(),
        _ => TrainerState::new(&model, cfg.cfg.training.finetune.weight_decay),
    };
    let dir = RunDir::create(&cfg.cfg.output_dir)?;
    dir.echo_config(&cfg, "finetune")?;
    let streams = streams(&cfg);
    let (rows, _) = train_phase(
        &cfg,
        &dir,
        "finetune",
        &vocab,
        Some(&normalizer),
        &mut model,
        &mut state,
        |m, s, hook| {
            finetune(
                m,
                &data,
                &cfg.cfg.training.finetune,
                &streams,
                &[FINETUNE_KEY],
                s,
                Some(hook),
            )
        },
    )?;
    write_json(
        &dir.report("finetune.json"),
        &json!({
            "records": data.len(),
            "epochs": rows.len(),
            "final": rows.last(),
            "normalizer": normalizer,
        }),
    )
}

/// Loop state carried in an sgds checkpoint.
#[derive(Serialize, Deserialize)]
struct ShiftResume {
    state: ShiftState,
    delta: Vec<f64>,
}

#[derive(Serialize)]
struct Histogram<'a> {
    t: u64,
    objectives: &'a [String],
    values: &'a [Vec<f64>],
}

pub fn cmd_sgds(mut cfg: Loaded, checkpoint: Option<&Path>, dry: bool) -> Result<()> {
    let ck = load_checkpoint(checkpoint)?;
    let vocab = vocabulary(&cfg, Some(&ck))?;
    let mut model = checkpoint_model(&mut cfg, &ck, &vocab)?;
    let spec = cfg.rank_spec()?;
    if spec.len() != model.config().n_objectives {
        return Err(Error::Config(format!(
            "{} objectives configured, checkpoint model predicts {}",
            spec.len(),
            model.config().n_objectives
        )));
    }
    let normalizer = ck
        .normalizer
        .clone()
        .ok_or_else(|| Error::Checkpoint("checkpoint has no property normalizer; run finetune first".into()))?;
    let resume: Option<ShiftResume> = match (&ck.extra, ck.phase.as_str()) {
        (Some(v), "sgds") => Some(serde_json::from_value(v.clone()).map_err(|e| Error::Checkpoint(e.to_string()))?),
        _ => None,
    };
    let seed_seqs = match &resume {
        Some(_) => Vec::new(),
        None => {
            let corpus = Corpus::load(corpus_path(&cfg)?, &vocab, model.config().max_len)?;
            let mut s = corpus.sequences();
            if let Some(k) = cfg.cfg.data.seed_limit {
                s.truncate(k);
            }
            s
        }
    };
    if dry {
        return dry_run(&cfg);
    }
    let hub = cfg.oracle_hub()?;
    let names = hub.objectives().to_vec();
    let dir = RunDir::create(&cfg.cfg.output_dir)?;
    let streams = streams(&cfg);

    let (shift_cfg, mut state) = match resume {
        Some(r) => {
            let mut sc = cfg.cfg.shift.clone();
            sc.delta = Some(r.delta);
            (sc, Some(r.state))
        }
        None => (cfg.cfg.shift.clone(), None),
    };
    let (seed_std, seed_scored) = if state.is_none() {
        let (scored, q) = annotate_seed(&hub, &vocab, &seed_seqs)?;
        if scored.is_empty() {
            return Err(Error::Oracle("no seed sequence could be scored".into()));
        }
        let n = scored.len() as f64;
        let std = (0..names.len())
            .map(|j| {
                let m = scored.iter().map(|r| r.1[j]).sum::<f64>() / n;
                (scored.iter().map(|r| (r.1[j] - m).powi(2)).sum::<f64>() / n).sqrt()
            })
            .collect();
        let values: Vec<Vec<f64>> = scored.iter().map(|r| r.1.clone()).collect();
        write_json(
            &dir.report("histograms/iteration_000.json"),
            &Histogram {
                t: 0,
                objectives: &names,
                values: &values,
            },
        )?;
        (std, Some((scored, q)))
    } else {
        (vec![1.0; names.len()], None)
    };
    let sg = Sgds::new(shift_cfg, spec, &hub, &vocab, normalizer.clone(), streams, &seed_std)?;
    let mut resolved = cfg.clone();
    resolved.cfg.shift.delta = Some(sg.delta.clone());
    dir.echo_config(&resolved, "sgds")?;
    if let Some((scored, q)) = seed_scored {
        state = Some(sg.init_state(&model, &scored, q)?);
    }
    let mut state = state.expect("state initialized");
    log::info!(
        "shifting from t = {} for {} iterations, {} proposals, {} retained, delta {:?}",
        state.t,
        sg.cfg.iterations,
        sg.cfg.proposals,
        sg.cfg.retained,
        sg.delta
    );

    let metrics_path = dir.metrics("sgds");
    let timings_path = dir.metrics("sgds_timings");
    let mut rows = earlier_lines(&metrics_path, state.t as usize);
    let mut timing_rows = earlier_lines(&timings_path, state.t as usize);
    let save = |st: &ShiftState, model: &Lpt| -> Result<()> {
        let mut ck = Checkpoint::new("sgds", model, streams).with_vocab(&vocab);
        ck.normalizer = Some(normalizer.clone());
        ck.trainer = Some(st.trainer.clone());
        ck.counters.iteration = st.t;
        ck.counters.queries = st.queries;
        ck.extra = Some(
            serde_json::to_value(ShiftResume {
                state: st.clone(),
                delta: sg.delta.clone(),
            })
            .expect("state serializes"),
        );
        ck.save(&dir.checkpoint("sgds"))
    };
    sg.run(&mut state, &mut model, |o, st, model| {
        let m: &IterationMetrics = &o.metrics;
        log::info!(
            "iteration {}: top {:?}, mean top-n {:.4}, queries {}, feasible {:.3}, failed {}",
            m.t,
            m.top_y,
            m.mean_top_n,
            m.queries_total,
            m.constraint_satisfaction_rate,
            m.failed
        );
        rows.push(serde_json::to_value(m).expect("metrics serialize"));
        let t: &IterationTiming = &o.timing;
        timing_rows.push(serde_json::to_value(t).expect("timing serializes"));
        write_jsonl(&metrics_path, &rows)?;
        write_jsonl(&timings_path, &timing_rows)?;
        write_json(
            &dir.report(&format!("histograms/iteration_{:03}.json", m.t)),
            &Histogram {
                t: m.t,
                objectives: &names,
                values: &o.annotated,
            },
        )?;
        save(st, model)
    })?;
    save(&state, &model)?;
    write_json(
        &dir.report("sgds_final.json"),
        &json!({
            "objectives": names,
            "iterations": state.t,
            "queries_total": state.queries,
            "records": sg.report(&state)?,
        }),
    )
}

#[derive(Serialize)]
struct SampleRow {
    index: u64,
    seq: String,
    predicted_y: Vec<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    oracle_y: Option<Vec<f64>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    oracle_error: Option<String>,
}

pub fn cmd_sample(
    mut cfg: Loaded,
    checkpoint: Option<&Path>,
    target: Option<Vec<f64>>,
    count: usize,
    temperature: f64,
    dry: bool,
) -> Result<()> {
    let ck = load_checkpoint(checkpoint)?;
    let vocab = ck
        .vocabulary()?
        .ok_or_else(|| Error::Checkpoint("checkpoint carries no vocabulary".into()))?;
    let model = checkpoint_model(&mut cfg, &ck, &vocab)?;
    if !(temperature.is_finite() && temperature > 0.0) {
        return Err(Error::Config("--temperature must be positive".into()));
    }
    let target = match target {
        Some(y) => {
            let norm = ck
                .normalizer
                .as_ref()
                .ok_or_else(|| Error::Checkpoint("conditioning on y needs a fine-tuned checkpoint".into()))?;
            Some(norm.normalize(&y)?)
        }
        None => None,
    };
    if dry {
        return dry_run(&cfg);
    }
    let hub = cfg.optional_oracle_hub()?;
    let streams = streams(&cfg);
    let lcfg = cfg.cfg.langevin;
    let mut rows: Vec<SampleRow> = (0..count as u64)
        .into_par_iter()
        .map(|i| {
            let z0 = match &target {
                Some(y) => {
                    sample_posterior(
                        &Posterior::new(&model, None, Some(y)),
                        &lcfg,
                        &streams,
                        &[SAMPLE_KEY, i],
                        None,
                    )?
                    .z0
                }
                None => fresh_init(&streams, &[SAMPLE_KEY, i], model.latent_dim()),
            };
            let z = model.prior_transform(&z0)?;
            let mut rng = streams.rng(Stream::Sampling, &[SAMPLE_KEY, i]);
            let x = model.sample_sequence(&z, &mut rng, temperature)?;
            let yhat = model.predict_property(&z)?;
            let predicted_y = match &ck.normalizer {
                Some(n) => n.denormalize(&yhat)?,
                None => yhat,
            };
            Ok(SampleRow {
                index: i,
                seq: vocab.decode(&x)?,
                predicted_y,
                oracle_y: None,
                oracle_error: None,
            })
        })
        .collect::<Result<_>>()?;
    if let Some(hub) = &hub {
        let seqs: Vec<String> = rows.iter().map(|r| r.seq.clone()).collect();
        for (r, s) in rows.iter_mut().zip(hub.score_batch(&seqs)) {
            match s {
                Ok(y) => r.oracle_y = Some(y),
                Err(e) => r.oracle_error = Some(e.to_string()),
            }
        }
    }
    let dir = RunDir::create(&cfg.cfg.output_dir)?;
    dir.echo_config(&cfg, "sample")?;
    write_jsonl(&dir.report("samples.jsonl"), &rows)?;
    print!("{}", lpt_core::io::to_jsonl(&rows));
    Ok(())
}

pub fn cmd_eval(mut cfg: Loaded, checkpoint: Option<&Path>, dry: bool) -> Result<()> {
    let ck = load_checkpoint(checkpoint)?;
    let vocab = vocabulary(&cfg, Some(&ck))?;
    let model = checkpoint_model(&mut cfg, &ck, &vocab)?;
    let mut corpus = Corpus::load(corpus_path(&cfg)?, &vocab, model.config().max_len)?;
    if let Some(p) = &cfg.cfg.data.properties {
        corpus.attach_properties(p, model.config().n_objectives)?;
    }
    if dry {
        return dry_run(&cfg);
    }
    let streams = streams(&cfg);
    let lcfg = cfg.cfg.langevin;
    // Per record: (−log p(x | z), tokens, predicted y in raw units).
    let per: Vec<(f64, usize, Vec<f64>)> = corpus
        .records
        .par_iter()
        .enumerate()
        .map(|(i, r)| {
            let post = Posterior::new(&model, Some(&r.x), None);
            let z0 = sample_posterior(&post, &lcfg, &streams, &[EVAL_KEY, i as u64], None)?.z0;
            let z = model.prior_transform(&z0)?;
            let nll = -model.seq_log_prob(&r.x, &z)?;
            let yhat = model.predict_property(&z)?;
            let yhat = match &ck.normalizer {
                Some(n) => n.denormalize(&yhat)?,
                None => yhat,
            };
            Ok((nll, r.x.len(), yhat))
        })
        .collect::<Result<_>>()?;
    let tokens: usize = per.iter().map(|p| p.1).sum();
    let nll = per.iter().map(|p| p.0).sum::<f64>() / tokens.max(1) as f64;
    let mut properties = Vec::new();
    for j in 0..model.config().n_objectives {
        let pairs: Vec<(f64, f64)> = corpus
            .records
            .iter()
            .zip(&per)
            .filter_map(|(r, p)| r.y.as_ref().map(|y| (p.2[j], y[j])))
            .collect();
        if pairs.len() < 2 {
            continue;
        }
        let n = pairs.len() as f64;
        let rmse = (pairs.iter().map(|(a, b)| (a - b).powi(2)).sum::<f64>() / n).sqrt();
        let (ma, mb) = (
            pairs.iter().map(|p| p.0).sum::<f64>() / n,
            pairs.iter().map(|p| p.1).sum::<f64>() / n,
        );
        let cov: f64 = pairs.iter().map(|(a, b)| (a - ma) * (b - mb)).sum();
        let va: f64 = pairs.iter().map(|(a, _)| (a - ma).powi(2)).sum();
        let vb: f64 = pairs.iter().map(|(_, b)| (b - mb).powi(2)).sum();
        let pearson = if va > 0.0 && vb > 0.0 {
            cov / (va * vb).sqrt()
        } else {
            f64::NAN
        };
        properties.push(json!({
            "objective": j,
            "records": pairs.len(),
            "rmse": rmse,
            "pearson": if pearson.is_finite() { json!(pearson) } else { json!(null) },
        }));
    }
    let report = json!({
        "records": corpus.len(),
        "tokens": tokens,
        "seq_nll_per_token": nll,
        "properties": properties,
    });
    let dir = RunDir::create(&cfg.cfg.output_dir)?;
    dir.echo_config(&cfg, "eval")?;
    write_json(&dir.report("eval.json"), &report)?;
    println!("{}", serde_json::to_string_pretty(&report).expect("report serializes"));
    Ok(())
}
