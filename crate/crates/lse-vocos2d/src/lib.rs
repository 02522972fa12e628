//! Two-stage singing-voice synthesis back end.
//!
//! Stage one turns an 80-band mel spectrogram into a 592-band full-bandwidth
//! linear spectrogram with a diffusion transformer (`lse`).  Stage two turns
//! that linear spectrogram into a 44.1 kHz waveform with a 2-D convolutional
//! GAN vocoder that synthesizes complex STFT coefficients and inverts them
//! with a differentiable iSTFT (`vocoder`).  The remaining modules provide the
//! shared signal processing, data handling, training loops, and an evaluation
//! harness that scores spectrogram realism with a small ConvNeXt classifier.

pub mod config;
pub mod data;
pub mod diffusion;
pub mod error;
pub mod evalkit;
pub mod lse;
pub mod nn;
pub mod pipeline;
pub mod spectral;
pub mod toygen;
pub mod training;
pub mod vocoder;

pub use error::{Error, Result};
