//! Pure score functions over decoded, space-separated token strings. Each has a
//! closed-form optimum over sequences of at most `L` content tokens.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Synthetic {
    /// Occurrences of `token`. Maximum `L`, at `token` repeated `L` times.
    TokenCount { token: String },
    /// `Σ_t w(token_t)`, unlisted tokens weighing `default_weight`.
    /// Maximum `L · max(w_max, 0)`: fill with the heaviest token, or stop early
    /// when every weight is negative.
    WeightedComposition {
        weights: BTreeMap<String, f64>,
        #[serde(default)]
        default_weight: f64,
    },
    /// Length of the longest run of one repeated token (of `token` only, when
    /// given). Meant to be minimized; minimum 0 at the empty sequence, or at any
    /// sequence avoiding `token`.
    LongestRun {
        #[serde(default)]
        token: Option<String>,
    },
    /// Fraction of positions holding a token from `tokens`, in `[0, 1]`; 0 for
    /// the empty sequence. Maximum 1.
    PatternFraction { tokens: BTreeSet<String> },
}

impl Synthetic {
    pub fn validate(&self) -> Result<()> {
        match self {
            Synthetic::WeightedComposition {
                weights,
                default_weight,
            } => {
                if !default_weight.is_finite() || weights.values().any(|w| !w.is_finite()) {
                    return Err(Error::Config("weighted_composition weights must be finite".into()));
                }
            }
            Synthetic::PatternFraction { tokens } if tokens.is_empty() => {
                return Err(Error::Config("pattern_fraction needs at least one token".into()));
            }
            _ => {}
        }
        Ok(())
    }

    pub fn score(&self, seq: &str) -> f64 {
        let toks = seq.split_whitespace();
        match self {
            Synthetic::TokenCount { token } => toks.filter(|t| t == token).count() as f64,
            Synthetic::WeightedComposition {
                weights,
                default_weight,
            } => toks.map(|t| weights.get(t).copied().unwrap_or(*default_weight)).sum(),
            Synthetic::LongestRun { token } => {
                let (mut best, mut run, mut prev) = (0usize, 0usize, None);
                for t in toks {
                    run = if prev == Some(t) { run + 1 } else { 1 };
                    prev = Some(t);
                    if token.as_deref().is_none_or(|x| x == t) {
                        best = best.max(run);
                    }
                }
                best as f64
            }
            Synthetic::PatternFraction { tokens } => {
                let (mut hit, mut n) = (0usize, 0usize);
                for t in toks {
                    n += 1;
                    hit += tokens.contains(t) as usize;
                }
                if n == 0 {
                    0.0
                } else {
                    hit as f64 / n as f64
                }
            }
        }
    }

    /// Best achievable value with at most `max_tokens` content tokens, in the
    /// direction this oracle is meant to be optimized.
    pub fn optimum(&self, max_tokens: usize) -> f64 {
        match self {
            Synthetic::TokenCount { .. } => max_tokens as f64,
            Synthetic::WeightedComposition {
                weights,
                default_weight,
            } => {
                let best = weights.values().copied().fold(*default_weight, f64::max);
                max_tokens as f64 * best.max(0.0)
            }
            Synthetic::LongestRun { .. } => 0.0,
            Synthetic::PatternFraction { .. } => {
                if max_tokens == 0 {
                    0.0
                } else {
                    1.0
                }
            }
        }
    }
}
