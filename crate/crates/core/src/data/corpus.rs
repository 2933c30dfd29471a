use std::collections::HashSet;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::rank::{RankSpec, Rankable};
use super::vocab::{TokenSequence, Vocabulary};
use crate::error::{Error, Result};

/// One sequence with an optional property vector.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PropertyRecord {
    pub x: TokenSequence,
    pub y: Option<Vec<f64>>,
}

/// Sequences read from a corpus file. Blank lines are skipped; record `i` is the
/// `i`-th non-blank line, which is what `seq_index` in property files refers to.
#[derive(Clone, Debug, PartialEq)]
pub struct Corpus {
    pub records: Vec<PropertyRecord>,
    pub path: PathBuf,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct PropertyLine {
    seq_index: usize,
    y: Vec<f64>,
}

impl Corpus {
    pub fn from_records(records: Vec<PropertyRecord>) -> Self {
        Corpus {
            records,
            path: PathBuf::new(),
        }
    }

    pub fn load(path: &Path, vocab: &Vocabulary, max_len: usize) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut records = Vec::new();
        for (lineno, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let x = vocab.encode(line, max_len).map_err(|e| Error::Parse {
                path: path.to_path_buf(),
                line: lineno + 1,
                msg: e.to_string(),
            })?;
            records.push(PropertyRecord { x, y: None });
        }
        if records.is_empty() {
            return Err(Error::EmptyCorpus(path.display().to_string()));
        }
        Ok(Corpus {
            records,
            path: path.to_path_buf(),
        })
    }

    /// Reads `{"seq_index": int, "y": [floats]}` lines; each `y` must have
    /// `n_objectives` finite entries.
    pub fn attach_properties(&mut self, path: &Path, n_objectives: usize) -> Result<()> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let perr = |line: usize, msg: String| Error::Parse {
            path: path.to_path_buf(),
            line,
            msg,
        };
        let mut seen = HashSet::new();
        for (lineno, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let p: PropertyLine = serde_json::from_str(line).map_err(|e| perr(lineno + 1, e.to_string()))?;
            if p.seq_index >= self.records.len() {
                return Err(perr(lineno + 1, format!("seq_index {} out of range", p.seq_index)));
            }
            if p.y.len() != n_objectives {
                return Err(perr(
                    lineno + 1,
                    format!("expected {n_objectives} property values, got {}", p.y.len()),
                ));
            }
            if p.y.iter().any(|v| !v.is_finite()) {
                return Err(perr(lineno + 1, "non-finite property value".into()));
            }
            if !seen.insert(p.seq_index) {
                return Err(perr(lineno + 1, format!("duplicate seq_index {}", p.seq_index)));
            }
            self.records[p.seq_index].y = Some(p.y);
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn annotated(&self) -> usize {
        self.records.iter().filter(|r| r.y.is_some()).count()
    }

    pub fn sequences(&self) -> Vec<TokenSequence> {
        self.records.iter().map(|r| r.x.clone()).collect()
    }

    /// Per-objective mean and standard deviation over annotated records.
    pub fn property_stats(&self) -> Option<(Vec<f64>, Vec<f64>)> {
        let ys: Vec<&Vec<f64>> = self.records.iter().filter_map(|r| r.y.as_ref()).collect();
        let m = ys.first()?.len();
        let n = ys.len() as f64;
        let mean: Vec<f64> = (0..m).map(|j| ys.iter().map(|y| y[j]).sum::<f64>() / n).collect();
        let std = (0..m)
            .map(|j| (ys.iter().map(|y| (y[j] - mean[j]).powi(2)).sum::<f64>() / n).sqrt())
            .collect();
        Some((mean, std))
    }
}

struct Indexed<'a> {
    y: &'a [f64],
    pos: u64,
    x: &'a TokenSequence,
}

impl Clone for Indexed<'_> {
    fn clone(&self) -> Self {
        Indexed {
            y: self.y,
            pos: self.pos,
            x: self.x,
        }
    }
}

impl Rankable for Indexed<'_> {
    fn y(&self) -> &[f64] {
        self.y
    }
    fn serial(&self) -> u64 {
        self.pos
    }
    fn ids(&self) -> &[u32] {
        self.x.ids()
    }
}

/// Best `n` annotated records under `spec`, best first; ties go to the earlier line.
pub fn top_n_seed(corpus: &Corpus, n: usize, spec: &RankSpec) -> Result<Vec<(TokenSequence, Vec<f64>)>> {
    let items: Vec<Indexed> = corpus
        .records
        .iter()
        .enumerate()
        .filter_map(|(i, r)| {
            r.y.as_deref().map(|y| Indexed {
                y,
                pos: i as u64,
                x: &r.x,
            })
        })
        .collect();
    if let Some(bad) = items.iter().find(|it| it.y.len() != spec.len()) {
        return Err(Error::ObjectiveMismatch {
            expected: spec.len(),
            got: bad.y.len(),
        });
    }
    Ok(spec
        .top_n(&items, n)?
        .into_iter()
        .map(|it| (it.x.clone(), it.y.to_vec()))
        .collect())
}
