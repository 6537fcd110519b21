//! Triadic Motif Field (TMF) encoding of time series and an
//! interpretable anomaly-detection pipeline built on it.
//!
//! A recording is normalized and cut into frames; each frame becomes a
//! `τ_max × (N−2) × 3` TMF image, a convolutional extractor maps the image
//! to a feature map, global average pooling turns it into a feature vector
//! and a small head predicts AF vs non-AF. Symmetrized Grad-CAM maps
//! explain individual predictions.

mod binio;
pub mod classify;
pub mod dataset;
pub mod error;
pub mod eval;
pub mod extractor;
pub mod gradcam;
pub mod model;
pub mod signal;
pub mod synth;
pub mod tmf;

pub use error::{Result, TmfError};
pub use model::{Preprocess, TmfModel};
pub use signal::{ClassLabel, TimeSeries};
pub use tmf::{encode_tmf, Masker, TmfImage};
