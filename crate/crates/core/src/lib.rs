//! Treatment-conditioned diffusion forecasting of longitudinal DaTscan slices.
//!
//! The crate is organized as a pipeline:
//!
//! * [`dataset`] — core record types (slices, dose series, ROI weight masks)
//!   plus validation, normalization, and train/val/test splitting.
//! * [`preprocess`] — soft background suppression, adaptive ROI extraction,
//!   cohort-level ROI agreement, and multi-level weight masks.
//! * [`ledd`] — the contrastive Transformer autoencoder that embeds monthly
//!   LEDD medication series into conditioning vectors.
//! * [`diffusion`] — the v-parameterized forward process, the noise schedule,
//!   and the deterministic sampler.
//! * [`unet`] — the conditional 2-D U-Net denoiser.
//! * [`train`] — the diffusion training loop (augmentation, LR schedule, EMA,
//!   checkpointing, resume).
//! * [`eval`] — ROI-weighted SSIM/MAE/MSE metrics, the no-progression
//!   baseline, and per-slice report tables.
//! * [`phantom`] — synthetic cohort generation with a known progression law,
//!   used for end-to-end validation.
//! * [`nn`] — a small tape-based reverse-mode autodiff engine over `ndarray`
//!   that everything above is built on.

pub mod dataset;
pub mod diffusion;
pub mod error;
pub mod eval;
pub mod io;
pub mod ledd;
pub mod nn;
pub mod phantom;
pub mod preprocess;
pub mod train;
pub mod unet;
pub mod util;

pub use error::{DatError, Result};
