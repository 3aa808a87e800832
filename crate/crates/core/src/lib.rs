//! Discrete Gaussian Fourier analysis on `Z^n` and the reduction from
//! finite-state turnstile streaming algorithms to linear sketches.
//!
//! The crate is organized bottom-up:
//! [`dgauss`] (lattice Gaussians), [`measure`] (finitely supported measures and
//! their transforms), [`spectrum`] (large-spectrum structure), [`translation`]
//! (total-variation translation invariance), [`streaming`] (stream models and
//! posterior laws), [`transfer`] (sketch extraction and decoding) and
//! [`experiment`] (config-driven runs and reports used by the command line tool).

pub mod dgauss;
pub mod error;
pub mod experiment;
pub mod fft;
pub mod measure;
pub mod numeric;
pub mod spectrum;
pub mod streaming;
pub mod transfer;
pub mod translation;

pub use error::{Error, Result};
