//! Tuning-free diffusion inversion and attention-controlled editing for face
//! re-aging, with desk-scale verification denoisers.
//!
//! - [`schedule`]: noise schedules, DDIM sampling/inversion steps, guidance.
//! - [`denoise`]: the denoiser contract, Gaussian-mixture oracle, toy attention net.
//! - [`angular`]: trajectory inversion and angularly damped dual-branch editing.
//! - [`aac`]: regime-scheduled, KL-gated attention control.
//! - [`prompt`]: attribute-aware prompt templates and the attribute extractor client.
//! - [`eval`]: identity similarity, FNMR@FMR, MAE.
//! - [`cli`]: run configuration, persistence and the command implementations.

pub mod error;
pub mod latent;
pub mod schedule;
pub mod denoise;
pub mod angular;
pub mod aac;
pub mod prompt;
pub mod eval;
pub mod cli;
pub mod verify;

pub use error::{Error, Result};
pub use latent::Latent;
