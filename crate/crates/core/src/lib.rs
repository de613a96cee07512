//! Semantic visual projector.
//!
//! Turns a grid of patch embeddings plus a set of candidate segmentation
//! masks into a short sequence of region-level visual tokens. Regions
//! ("semantic superpixels") are chosen from nested whole/part/sub-part
//! candidates, each region receives a learned positional embedding that
//! encodes its geometry, and a cross-attention aggregator refines the pooled
//! region embeddings before the final projection.
//!
//! Module map:
//!
//! - [`numcore`]: dense arrays, reverse-mode differentiation tape, attention
//!   and feed-forward primitives, finite-difference gradient checking.
//! - [`superpixel`]: mask codec, candidate filtering, partition enforcement,
//!   resizing and geometry.
//! - [`sspe`]: region positional embeddings (attention encoder and the two
//!   MLP variants).
//! - [`aggregator`]: patch alignment, pooling, scattering and the
//!   cross-attention aggregator.
//! - [`projector`]: the end-to-end projector, baseline projectors, fusion,
//!   token accounting and binary file formats.
//! - [`harness`]: synthetic scenes, referring queries, toy training and
//!   evaluation.

pub mod aggregator;
pub mod error;
pub mod harness;
pub mod numcore;
pub mod projector;
pub mod sspe;
pub mod superpixel;

pub use error::{Error, Result};
