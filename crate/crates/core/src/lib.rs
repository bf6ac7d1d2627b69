//! Functional-connectivity-guided decoding of multi-channel EEG epochs.
//!
//! The pipeline runs band extraction ([`dsp`]), phase-locking-value channel
//! weighting ([`connectivity`]), a temporal convolution block followed by a
//! bicubic-resized three-plane feature map and a small distillation-token
//! transformer ([`model`], built on the autodiff engine in [`nn`]), and the
//! evaluation protocols in [`eval`].

pub mod connectivity;
pub mod data;
pub mod dsp;
pub mod error;
pub mod eval;
pub mod model;
pub mod nn;
pub mod rng;

pub use data::{BandSpec, EpochSet, Montage};
pub use error::{Error, Result};
