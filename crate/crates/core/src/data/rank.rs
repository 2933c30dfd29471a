//! Constraint-aware total ranking shared by seed selection and the shifting loop.
//!
//! Order: records satisfying every constraint first, then higher weighted score,
//! then earlier insertion, then lexicographically smaller token ids.

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    #[default]
    Maximize,
    Minimize,
}

impl Direction {
    pub fn sign(self) -> f64 {
        match self {
            Direction::Maximize => 1.0,
            Direction::Minimize => -1.0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Comparison {
    Gt,
    Ge,
    Lt,
    Le,
}

/// Acceptance threshold on one raw objective value.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Constraint {
    pub cmp: Comparison,
    pub threshold: f64,
}

impl Constraint {
    pub fn holds(&self, v: f64) -> bool {
        match self.cmp {
            Comparison::Gt => v > self.threshold,
            Comparison::Ge => v >= self.threshold,
            Comparison::Lt => v < self.threshold,
            Comparison::Le => v <= self.threshold,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ObjectiveSpec {
    pub name: String,
    #[serde(default)]
    pub direction: Direction,
    /// Weight in the ranking score. Defaults to 1 for free objectives and 0 for
    /// constrained ones, which then act only through the feasibility indicator.
    #[serde(default)]
    pub weight: Option<f64>,
    #[serde(default)]
    pub constraint: Option<Constraint>,
}

impl ObjectiveSpec {
    pub fn maximize(name: &str) -> Self {
        ObjectiveSpec {
            name: name.into(),
            direction: Direction::Maximize,
            weight: None,
            constraint: None,
        }
    }

    pub fn minimize(name: &str) -> Self {
        ObjectiveSpec {
            direction: Direction::Minimize,
            ..Self::maximize(name)
        }
    }

    pub fn constrained(mut self, cmp: Comparison, threshold: f64) -> Self {
        self.constraint = Some(Constraint { cmp, threshold });
        self
    }

    pub fn effective_weight(&self) -> f64 {
        self.weight.unwrap_or(if self.constraint.is_some() { 0.0 } else { 1.0 })
    }

    /// Free objectives are shifted by the increment; constrained ones are not.
    pub fn is_free(&self) -> bool {
        self.constraint.is_none()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct RankSpec {
    pub objectives: Vec<ObjectiveSpec>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RankKey {
    pub feasible: bool,
    pub score: f64,
}

impl RankKey {
    /// `Less` when `self` ranks ahead of `other`.
    pub fn rank_cmp(&self, other: &RankKey) -> Ordering {
        other
            .feasible
            .cmp(&self.feasible)
            .then_with(|| other.score.total_cmp(&self.score))
    }
}

/// Anything that can be placed in the total ranking order.
pub trait Rankable {
    fn y(&self) -> &[f64];
    fn serial(&self) -> u64;
    fn ids(&self) -> &[u32];
}

impl RankSpec {
    pub fn new(objectives: Vec<ObjectiveSpec>) -> Result<Self> {
        let spec = RankSpec { objectives };
        spec.validate()?;
        Ok(spec)
    }

    pub fn single(name: &str, direction: Direction) -> Self {
        RankSpec {
            objectives: vec![ObjectiveSpec {
                direction,
                ..ObjectiveSpec::maximize(name)
            }],
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.objectives.is_empty() {
            return Err(Error::Config("at least one objective is required".into()));
        }
        for o in &self.objectives {
            if let Some(w) = o.weight {
                if !w.is_finite() {
                    return Err(Error::Config(format!("objective {} weight not finite", o.name)));
                }
            }
            if let Some(c) = o.constraint {
                if !c.threshold.is_finite() {
                    return Err(Error::Config(format!("objective {} threshold not finite", o.name)));
                }
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.objectives.len()
    }

    pub fn is_empty(&self) -> bool {
        self.objectives.is_empty()
    }

    pub fn satisfies(&self, y: &[f64]) -> bool {
        self.objectives
            .iter()
            .zip(y)
            .all(|(o, &v)| o.constraint.is_none_or(|c| c.holds(v)))
    }

    /// Weighted score in maximization convention.
    pub fn score(&self, y: &[f64]) -> f64 {
        self.objectives
            .iter()
            .zip(y)
            .map(|(o, &v)| o.effective_weight() * o.direction.sign() * v)
            .sum()
    }

    pub fn key(&self, y: &[f64]) -> RankKey {
        RankKey {
            feasible: self.satisfies(y),
            score: self.score(y),
        }
    }

    pub fn compare<T: Rankable>(&self, a: &T, b: &T) -> Ordering {
        self.key(a.y())
            .rank_cmp(&self.key(b.y()))
            .then_with(|| a.serial().cmp(&b.serial()))
            .then_with(|| a.ids().cmp(b.ids()))
    }

    /// The first `n` items under the total order, best first.
    pub fn top_n<T: Rankable + Clone>(&self, items: &[T], n: usize) -> Result<Vec<T>> {
        if items.len() < n {
            return Err(Error::NotEnoughRecords {
                needed: n,
                available: items.len(),
            });
        }
        let mut order: Vec<&T> = items.iter().collect();
        order.sort_by(|a, b| self.compare(*a, *b));
        Ok(order.into_iter().take(n).cloned().collect())
    }
}
