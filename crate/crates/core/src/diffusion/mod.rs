//! Supervised diffusion between item ID embeddings and side information.
//!
//! The forward chain drifts a projected ID embedding `z0` towards the side
//! information state `h`:
//!
//! ```text
//! z_t = sqrt(a_t) z0 + sqrt(c_t) h + sqrt(1 - a_t) eps
//! ```
//!
//! with `a_t` decreasing and `c_t` increasing to 1. Generation starts near
//! `h` and walks a strided sub-sequence of steps back to a predicted `z0`,
//! which an output head maps into the backbone's embedding space.

mod denoiser;
mod encoders;
pub mod process;
mod schedule;
mod stack;

pub use denoiser::{time_encoding, time_encoding_batch, Denoiser, TIME_DIMS};
pub use encoders::SideEncoder;
pub use process::{
    denoised_from_noise, diffusion_loss, forward_sample, forward_with_noise, posterior_coeffs,
    posterior_sample, predict_z0, reverse_step, sample_chain, subsequence, Denoise, ZeroDenoiser,
};
pub use schedule::{build_schedule, Schedule, DEFAULT_BETA, DEFAULT_STEPS};
pub use stack::{gate_weight, CsdmStack, DiffusionConfig, StepLosses, CHECKPOINT_KIND};
