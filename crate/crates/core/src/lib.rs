//! Lipschitz-stable recurrent video super-resolution.
//!
//! The crate is organized around the stages of the pipeline:
//!
//! - [`diffops`]: differentiable operators (convolution, pixel shuffle,
//!   losses) with a dynamic reverse-mode tape;
//! - [`lipschitz`]: spectral-norm estimation of convolution operators,
//!   stable-rank normalization and network-level Lipschitz certification;
//! - [`models`]: the recurrent super-resolution architectures (contractive
//!   middle recurrence, sliding-window baselines, an unconstrained
//!   fully-recurrent baseline) plus checkpointing;
//! - [`videodata`]: blur/decimation degradation, color handling, clip
//!   sampling and a seeded synthetic quasi-static sequence generator;
//! - [`training`]: truncated-BPTT trainer with Adam and staged learning
//!   rates, applying spectral constraints after each step;
//! - [`evalsuite`]: PSNR/SSIM on the luma channel, windowed aggregates,
//!   divergence detection on long rollouts, temporal profiles and the
//!   adversarial spatio-temporal receptive-field probe.

pub mod diffops;
pub mod elem;
pub mod error;
pub mod evalsuite;
pub mod lipschitz;
pub mod models;
pub mod training;
pub mod videodata;

pub use elem::Elem;
pub use error::{Error, Result};
