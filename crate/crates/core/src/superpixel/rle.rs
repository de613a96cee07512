//! Uncompressed run-length codec for binary masks.
//!
//! Runs alternate background/foreground counts, beginning with background,
//! over the mask in row-major order. The first run may be zero (mask starts
//! with foreground); encoding never emits any other zero-length run.

use super::mask::BinaryGrid;
use crate::{Error, Result};

pub fn encode_rle(grid: &BinaryGrid) -> Vec<u64> {
    let mut runs = Vec::new();
    let mut current = false;
    let mut n = 0u64;
    for &px in grid.data() {
        if px != current {
            runs.push(n);
            n = 0;
            current = px;
        }
        n += 1;
    }
    runs.push(n);
    runs
}

/// Decodes runs into a `height × width` grid.
///
/// Accepts signed counts so negative values from a file can be reported.
pub fn decode_rle(runs: &[i64], height: usize, width: usize) -> Result<BinaryGrid> {
    let total = height * width;
    let mut data = Vec::with_capacity(total);
    let mut value = false;
    for (k, &r) in runs.iter().enumerate() {
        if r < 0 {
            return Err(Error::invalid(format!("run {k} has negative count {r}")));
        }
        let r = r as usize;
        if data.len() + r > total {
            return Err(Error::invalid(format!(
                "runs exceed the {height}×{width} grid at run {k}"
            )));
        }
        data.extend(std::iter::repeat_n(value, r));
        value = !value;
    }
    if data.len() != total {
        return Err(Error::invalid(format!(
            "runs sum to {}, expected {total}",
            data.len()
        )));
    }
    BinaryGrid::from_vec(height, width, data)
}
