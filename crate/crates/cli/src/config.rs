//! Run configuration: one TOML file, every field defaulted, unknown keys rejected.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use lpt_core::data::{ObjectiveSpec, RankSpec};
use lpt_core::langevin::LangevinConfig;
use lpt_core::model::ModelConfig;
use lpt_core::oracle::{OracleHub, OracleSource};
use lpt_core::sgds::ShiftConfig;
use lpt_core::train::TrainConfig;
use lpt_core::{Error, Result};
use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub output_dir: PathBuf,
    pub model: ModelConfig,
    pub training: TrainingSection,
    /// Chains used by `sample` and `eval`.
    pub langevin: LangevinConfig,
    pub shift: ShiftConfig,
    pub oracle: OracleSection,
    pub data: DataSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            output_dir: PathBuf::from("runs/default"),
            model: ModelConfig::default(),
            training: TrainingSection::default(),
            langevin: LangevinConfig::default(),
            shift: ShiftConfig::default(),
            oracle: OracleSection::default(),
            data: DataSection::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainingSection {
    pub pretrain: TrainConfig,
    pub finetune: TrainConfig,
}

impl Default for TrainingSection {
    fn default() -> Self {
        TrainingSection {
            pretrain: TrainConfig::pretrain(),
            finetune: TrainConfig::finetune(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OracleSection {
    /// Objectives in property-vector order, with ranking direction, weight and constraint.
    pub objectives: Vec<ObjectiveSpec>,
    /// Scorer per objective name.
    pub sources: BTreeMap<String, OracleSource>,
}

impl Default for OracleSection {
    fn default() -> Self {
        OracleSection {
            objectives: vec![ObjectiveSpec::maximize("y")],
            sources: BTreeMap::new(),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataSection {
    /// One whitespace-tokenized sequence per line.
    pub corpus: Option<PathBuf>,
    /// `{"seq_index": i, "y": [...]}` per line, indexing non-blank corpus lines.
    pub properties: Option<PathBuf>,
    /// Saved vocabulary; built from the corpus when absent.
    pub vocab: Option<PathBuf>,
    /// Use only the first this-many corpus records as the shifting seed.
    pub seed_limit: Option<usize>,
}

/// A parsed config plus the keys the file actually set, so derived fields can
/// tell "left at default" from "set explicitly".
#[derive(Clone, Debug)]
pub struct Loaded {
    pub cfg: RunConfig,
    raw: toml::Table,
}

impl Loaded {
    pub fn defaults() -> Self {
        Loaded {
            cfg: RunConfig::default(),
            raw: toml::Table::new(),
        }
    }

    pub fn parse(text: &str, origin: &Path) -> Result<Self> {
        let err = |e: toml::de::Error| Error::Config(format!("{}: {e}", origin.display()));
        let raw: toml::Table = toml::from_str(text).map_err(err)?;
        let cfg: RunConfig = toml::from_str(text).map_err(err)?;
        Ok(Loaded { cfg, raw })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Self::parse(&text, path)
    }

    pub fn has(&self, section: &str, key: &str) -> bool {
        self.raw
            .get(section)
            .and_then(|s| s.as_table())
            .is_some_and(|t| t.contains_key(key))
    }

    pub fn has_section(&self, section: &str) -> bool {
        self.raw.contains_key(section)
    }

    /// Fills `vocab_size`, `n_objectives` and `sigma2` from the data unless set,
    /// and rejects explicit values that disagree.
    pub fn resolve_model(&mut self, vocab_size: usize) -> Result<()> {
        let n = self.cfg.oracle.objectives.len();
        let (has_vocab, has_n, has_sigma) = (
            self.raw_model_has("vocab_size"),
            self.raw_model_has("n_objectives"),
            self.raw_model_has("sigma2"),
        );
        let model = &mut self.cfg.model;
        if has_vocab {
            if model.vocab_size != vocab_size {
                return Err(Error::Config(format!(
                    "model.vocab_size is {} but the vocabulary has {vocab_size} ids",
                    model.vocab_size
                )));
            }
        } else {
            model.vocab_size = vocab_size;
        }
        if has_n {
            if model.n_objectives != n {
                return Err(Error::Config(format!(
                    "model.n_objectives is {} but {n} objectives are configured",
                    model.n_objectives
                )));
            }
        } else {
            model.n_objectives = n;
        }
        if !has_sigma && model.sigma2.len() != n {
            let v = model.sigma2.first().copied().unwrap_or(0.25);
            model.sigma2 = vec![v; n];
        }
        model.validate()
    }

    fn raw_model_has(&self, key: &str) -> bool {
        self.has("model", key)
    }

    pub fn validate(&self) -> Result<()> {
        let c = &self.cfg;
        c.training.pretrain.validate()?;
        c.training.finetune.validate()?;
        c.langevin.validate()?;
        self.rank_spec()?;
        c.shift.validate(c.oracle.objectives.len())?;
        for (name, src) in &c.oracle.sources {
            if !c.oracle.objectives.iter().any(|o| &o.name == name) {
                return Err(Error::Config(format!("oracle source {name:?} matches no objective")));
            }
            if let OracleSource::Synthetic(s) = src {
                s.validate()?;
            }
        }
        Ok(())
    }

    pub fn rank_spec(&self) -> Result<RankSpec> {
        RankSpec::new(self.cfg.oracle.objectives.clone())
    }

    pub fn objective_names(&self) -> Vec<String> {
        self.cfg.oracle.objectives.iter().map(|o| o.name.clone()).collect()
    }

    /// Hub over every objective; errors if any objective lacks a source.
    pub fn oracle_hub(&self) -> Result<OracleHub> {
        OracleHub::new(&self.objective_names(), &self.cfg.oracle.sources)
    }

    /// Hub when every objective has a source, otherwise `None`.
    pub fn optional_oracle_hub(&self) -> Result<Option<OracleHub>> {
        let names = self.objective_names();
        if names.iter().all(|n| self.cfg.oracle.sources.contains_key(n)) && !self.cfg.oracle.sources.is_empty() {
            Ok(Some(OracleHub::new(&names, &self.cfg.oracle.sources)?))
        } else {
            Ok(None)
        }
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(&self.cfg).expect("config serializes to TOML")
    }
}
