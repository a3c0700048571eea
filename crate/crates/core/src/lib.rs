//! Cold-start item embedding warm-up for CTR models with a supervised
//! diffusion process between ID embeddings and item side information.
//!
//! Layout:
//! - [`numcore`]: tensors, reverse-mode gradients, Adam.
//! - [`data`]: MovieLens-1M ingestion, synthetic data, cold/warm splits.
//! - [`backbones`]: DeepFM, Wide&Deep and DCN scorers.
//! - [`diffusion`]: schedule, forward/reverse process, denoiser, training loss.
//! - [`warmup`]: pretrain, diffusion training, write-back and staged evaluation.
//! - [`eval`]: AUC, RelaImpr, log-loss.

pub mod backbones;
pub mod checkpoint;
pub mod data;
pub mod diffusion;
pub mod error;
pub mod eval;
pub mod numcore;
pub mod warmup;

pub use error::{CsdmError, Result};
