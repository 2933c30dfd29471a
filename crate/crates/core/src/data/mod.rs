//! Vocabulary, token sequences, corpus files, and ranking.

pub mod corpus;
pub mod normalize;
pub mod rank;
pub mod vocab;

pub use corpus::{top_n_seed, Corpus, PropertyRecord};
pub use normalize::Normalizer;
pub use rank::{Comparison, Constraint, Direction, ObjectiveSpec, RankKey, RankSpec, Rankable};
pub use vocab::{TokenSequence, Vocabulary, BOS, EOS, N_RESERVED, PAD};
