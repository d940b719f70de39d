//! Top-down excitation backprop over small convolutional networks, with the
//! map statistics and unit-ranking analyses built on it.
//!
//! The crate is organised bottom-up:
//!
//! * [`tensor`] – dense NCHW tensors and forward kernels
//! * [`model`] – layer graphs, `EBN1` weight files, forward pass, prediction
//! * [`excitation`] – marginal winning probabilities at a target layer
//! * [`metrics`] – strength, extent and per-unit maxima of excitation maps
//! * [`discriminability`] – symmetric-KL unit ranking and specialist counts
//! * [`ingest`] – manifests, annotations, images, synthetic datasets
//! * [`analysis`] – brand summaries, correlation with logo-visibility labels
//! * [`report`] – batch commands, CSV/JSON outputs and heatmaps
//!
//! Batch work fans out over images with rayon when the `parallel` feature is
//! enabled (the default); results are always collected in manifest order.

pub mod analysis;
pub mod discriminability;
pub mod error;
pub mod excitation;
pub mod ingest;
pub mod metrics;
pub mod model;
pub mod parallel;
pub mod report;
pub mod tensor;

pub use error::{Error, ErrorClass, Result};
