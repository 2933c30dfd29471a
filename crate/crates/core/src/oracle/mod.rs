//! Black-box scoring: one value per objective for each decoded sequence.

pub mod external;
pub mod synthetic;

use std::collections::BTreeMap;
use std::sync::atomic::{AtomicU64, Ordering};
use std::time::Duration;

use serde::{Deserialize, Deserializer, Serialize};

pub use external::{Endpoint, ExternalClient};
pub use synthetic::Synthetic;

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExternalSpec {
    kind: ExternalTag,
    pub endpoint: Endpoint,
    /// Score id sent to the server; the objective name when absent.
    #[serde(default)]
    pub score: Option<String>,
    #[serde(default = "default_timeout")]
    pub timeout_s: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
enum ExternalTag {
    External,
}

fn default_timeout() -> f64 {
    external::DEFAULT_TIMEOUT_S
}

impl ExternalSpec {
    pub fn new(endpoint: Endpoint, score: Option<String>, timeout_s: f64) -> Self {
        ExternalSpec {
            kind: ExternalTag::External,
            endpoint,
            score,
            timeout_s,
        }
    }
}

/// How one objective is scored. Selected by the `kind` field.
#[derive(Clone, Debug, PartialEq, Serialize)]
#[serde(untagged)]
pub enum OracleSource {
    External(ExternalSpec),
    Synthetic(Synthetic),
}

impl<'de> Deserialize<'de> for OracleSource {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        use serde::de::Error as _;
        let v = serde_json::Value::deserialize(d)?;
        let external = v.get("kind").and_then(|k| k.as_str()) == Some("external");
        if external {
            serde_json::from_value(v)
                .map(OracleSource::External)
                .map_err(D::Error::custom)
        } else {
            serde_json::from_value(v)
                .map(OracleSource::Synthetic)
                .map_err(D::Error::custom)
        }
    }
}

enum Backend {
    Synthetic {
        slot: usize,
        oracle: Synthetic,
    },
    External {
        client: ExternalClient,
        slots: Vec<usize>,
        scores: Vec<String>,
    },
}

/// Scores sequences on every objective and counts calls.
pub struct OracleHub {
    names: Vec<String>,
    backends: Vec<Backend>,
    queries: AtomicU64,
}

impl std::fmt::Debug for OracleHub {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("OracleHub")
            .field("objectives", &self.names)
            .field("queries", &self.queries())
            .finish()
    }
}

impl OracleHub {
    /// One source per objective name, in objective order. External objectives
    /// sharing an endpoint share one connection and one request per sequence.
    pub fn new(objectives: &[String], sources: &BTreeMap<String, OracleSource>) -> Result<Self> {
        let mut backends = Vec::new();
        let mut externals: Vec<(Endpoint, f64, Vec<usize>, Vec<String>)> = Vec::new();
        for (slot, name) in objectives.iter().enumerate() {
            let src = sources
                .get(name)
                .ok_or_else(|| Error::Config(format!("no oracle configured for objective {name:?}")))?;
            match src {
                OracleSource::Synthetic(o) => {
                    o.validate()?;
                    backends.push(Backend::Synthetic {
                        slot,
                        oracle: o.clone(),
                    });
                }
                OracleSource::External(e) => {
                    if !(e.timeout_s.is_finite() && e.timeout_s > 0.0) {
                        return Err(Error::Config(format!("oracle {name:?}: timeout_s must be positive")));
                    }
                    let score = e.score.clone().unwrap_or_else(|| name.clone());
                    match externals.iter_mut().find(|x| x.0 == e.endpoint && x.1 == e.timeout_s) {
                        Some(x) => {
                            x.2.push(slot);
                            x.3.push(score);
                        }
                        None => externals.push((e.endpoint.clone(), e.timeout_s, vec![slot], vec![score])),
                    }
                }
            }
        }
        for (endpoint, timeout, slots, scores) in externals {
            let client = ExternalClient::connect(endpoint, Duration::from_secs_f64(timeout))?;
            backends.push(Backend::External { client, slots, scores });
        }
        Ok(OracleHub {
            names: objectives.to_vec(),
            backends,
            queries: AtomicU64::new(0),
        })
    }

    /// Hub over in-process oracles only.
    pub fn synthetic(objectives: Vec<(String, Synthetic)>) -> Result<Self> {
        let names: Vec<String> = objectives.iter().map(|(n, _)| n.clone()).collect();
        let sources = objectives
            .into_iter()
            .map(|(n, o)| (n, OracleSource::Synthetic(o)))
            .collect();
        Self::new(&names, &sources)
    }

    pub fn objectives(&self) -> &[String] {
        &self.names
    }

    /// Total sequences submitted so far, failures included.
    pub fn queries(&self) -> u64 {
        self.queries.load(Ordering::SeqCst)
    }

    pub fn score(&self, seq: &str) -> Result<Vec<f64>> {
        self.score_batch(&[seq.to_string()]).pop().expect("one result")
    }

    /// One result per sequence, in input order. A sequence fails when any of its
    /// objectives fails.
    pub fn score_batch(&self, seqs: &[String]) -> Vec<Result<Vec<f64>>> {
        self.queries.fetch_add(seqs.len() as u64, Ordering::SeqCst);
        let m = self.names.len();
        let mut out: Vec<Result<Vec<f64>>> = seqs.iter().map(|_| Ok(vec![f64::NAN; m])).collect();
        for b in &self.backends {
            match b {
                Backend::Synthetic { slot, oracle } => {
                    for (r, s) in out.iter_mut().zip(seqs) {
                        if let Ok(y) = r {
                            y[*slot] = oracle.score(s);
                        }
                    }
                }
                Backend::External { client, slots, scores } => {
                    let results = client.score_batch(seqs, scores);
                    for (r, res) in out.iter_mut().zip(results) {
                        match (r.as_mut(), res) {
                            (Ok(y), Ok(vals)) => {
                                for (&slot, v) in slots.iter().zip(vals) {
                                    y[slot] = v;
                                }
                            }
                            (Ok(_), Err(e)) => *r = Err(e),
                            (Err(_), _) => {}
                        }
                    }
                }
            }
        }
        out
    }
}
