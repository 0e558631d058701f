//! Enhancement of low-quality device-recorded speech.
//!
//! The library covers the whole pipeline:
//!
//! * [`audio`] — mono WAV I/O, polyphase resampling, peak normalization.
//! * [`dataset`] — delay estimation and alignment of clean/degraded pairs,
//!   silence trimming, windowing into fixed-size chunks, chunk caches.
//! * [`dsp`] — STFT/ISTFT and the classical pre-enhancement chain
//!   (decision-directed Wiener filter, harmonic-regeneration noise reduction)
//!   used both standalone and as the directed reference during early training.
//! * [`nn`] — a small reverse-mode autodiff engine with exactly the ops the
//!   model needs (strided/transposed 1-D convolution, PReLU/LeakyReLU,
//!   virtual batch normalization, dense), an RMSprop optimizer, a
//!   finite-difference gradient checker, and the checkpoint container.
//! * [`model`] — the convolutional encoder-decoder generator (skip
//!   connections, latent concatenation, optional outer residual skip) and the
//!   conditioned discriminator.
//! * [`train`] — least-squares adversarial training with an L1 term and a
//!   scheduled reference selector, plus chunked inference (`enhance`).
//! * [`metrics`] — segmental SNR, short-time objective intelligibility and
//!   log-spectral distance, with corpus-level evaluation reports.

pub mod audio;
pub mod dataset;
pub mod dsp;
pub mod error;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod train;

pub use error::{Error, Result};
