//! Latent prompt Transformer: a latent-variable sequence model with a property
//! regression head, trained by Langevin-based approximate maximum likelihood and
//! driven toward high-scoring regions of sequence space by gradual distribution
//! shifting against black-box oracles.

pub mod data;
pub mod error;
pub mod io;
pub mod langevin;
pub mod model;
pub mod numerics;
pub mod oracle;
pub mod sgds;
pub mod train;

pub use error::{Error, Result};
