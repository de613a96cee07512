//! Candidate masks, the greedy superpixel filter, and superpixel geometry.

mod filter;
mod mask;
mod rle;
mod set;

pub use filter::{candidate_order, filter_candidates, partition_mask_file, DEFAULT_OVERLAP_THRESHOLD};
pub use mask::{nearest_indices, BinaryGrid, CandidateMask, Level, MaskFile};
pub use rle::{decode_rle, encode_rle};
pub use set::{BBox, Source, SuperpixelSet};

/// Total pixel budget of the reference configuration: 40 superpixels of
/// 126×126 masks.
pub const REFERENCE_TARGET_PIXELS: f64 = 40.0 * 126.0 * 126.0;
