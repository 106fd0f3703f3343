//! Label-noise distillation for automatic modulation classification.
//!
//! The crate is organized along the pipeline:
//!
//! * [`sigsynth`] synthesizes labeled IQ records and reads/writes datasets.
//! * [`noiselab`] corrupts labels through a transition matrix.
//! * [`gradnet`] is a small reverse-mode autodiff core with the conv embedding.
//! * [`protomind`] is the prototype teacher: episodes, prototypes, soft labels, confidence.
//! * [`distiller`] partitions the untrusted pool and trains with divide-and-conquer losses.
//! * [`mvs`] is the segment-permute-splice augmentation.
//! * [`evalbench`] holds the baselines, evaluation and sweep reports.

pub mod config;
pub mod distiller;
pub mod error;
pub mod evalbench;
pub mod gradnet;
pub mod mvs;
pub mod noiselab;
pub mod protomind;
pub mod rng;
pub mod sigsynth;

pub use error::{Error, Result};
