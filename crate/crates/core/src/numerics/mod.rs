//! Dense tensors, reverse-mode differentiation, AdamW, cosine schedule, and seeded streams.

pub mod autodiff;
pub mod optim;
pub mod rng;
pub mod tensor;

pub use autodiff::{grad, Grads, Graph, Var};
pub use optim::{adamw_step, clip_global_norm, cosine_lr, AdamWConfig, LrSchedule, OptimState};
pub use rng::{RngStreams, Stream, StreamRng};
pub use tensor::Tensor;
