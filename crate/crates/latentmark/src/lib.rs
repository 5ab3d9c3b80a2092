//! Blind image watermarking in the latent space of a differentiable feature
//! extractor.
//!
//! The toolkit embeds either a presence mark (zero-bit) or a k-bit message
//! (multi-bit) by running gradient descent on the pixels of an image so that
//! its feature vector lands in a secret region of a whitened feature space:
//!
//! * **zero-bit** — the region is a dual hypercone around a secret unit
//!   carrier; detection has a closed-form false positive rate driven by the
//!   regularized incomplete Beta function ([`stats`]).
//! * **multi-bit** — message bits are modulated into the signs of the
//!   projections onto an orthonormal carrier family; decoding reads the signs
//!   back.
//!
//! Robustness comes from sampling a random differentiable transformation
//! (rotation, crop, resize, blur, flip) at every optimization step and
//! back-propagating through it ([`augment`]), while imperceptibility is
//! enforced by an SSIM-heatmap attenuation followed by a PSNR clamp
//! ([`perceptual`]).
//!
//! Start with [`watermark::Pipeline`], which bundles a feature extractor and
//! a whitening transform and exposes `embed` / `detect` / `decode`. The
//! `examples/` directory contains one runnable program per capability; a thin
//! `latentmark` binary wraps the same operations for batch use.

pub mod augment;
pub mod error;
pub mod eval;
pub mod features;
pub mod imageio;
pub mod keys;
pub mod perceptual;
pub mod stats;
pub mod tensorfile;
pub mod watermark;

pub mod cli;

pub use error::{Error, Result};
