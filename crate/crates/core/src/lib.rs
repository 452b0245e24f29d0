//! Numerics for unified multi-dataset facial landmark detection.
//!
//! - [`protocol`]: the unified landmark set and per-dataset correspondences.
//! - [`capacity`]: effective sample capacity and inverse-capacity weights.
//! - [`loss`]: adaptive wing loss and the capacity-balanced batch loss.
//! - [`frequency`]: FFT high-frequency extraction.
//! - [`heatmap`]: Gaussian heatmap targets and argmax decoding.
//! - [`metrics`]: NME and failure rate.
//! - [`data`]: annotation parsers, augmentation, mixed-batch sampling, synthetic data.
//! - [`nn`]: a small hierarchical transformer with frequency-guided structure prompts.
//! - [`train`]: the training loop, optimizer and configuration.

pub mod capacity;
pub mod data;
pub mod frequency;
pub mod heatmap;
pub mod loss;
pub mod metrics;
pub mod nn;
pub mod protocol;
pub mod train;

pub use capacity::{effective_capacity, Beta, WeightTable};
pub use frequency::{extract_hf, FrequencyMask, Image, ImagePlane};
pub use heatmap::{HeatmapStack, LandmarkSet};
pub use loss::{AWingParams, LossBreakdown};
pub use protocol::{DatasetId, ProtocolTable, UnifiedLandmarkId};
