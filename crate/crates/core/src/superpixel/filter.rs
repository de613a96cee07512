use std::collections::VecDeque;

use super::mask::{CandidateMask, Level, MaskFile};
use super::set::{Source, SuperpixelSet};
use crate::{Error, Result};

pub const DEFAULT_OVERLAP_THRESHOLD: f64 = 0.5;

/// Processing order of the greedy filter: whole before part before
/// subpart, then larger area, then higher score, then lower id.
pub fn candidate_order(cands: &[CandidateMask]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..cands.len()).collect();
    idx.sort_by(|&a, &b| {
        let (x, y) = (&cands[a], &cands[b]);
        x.level
            .priority()
            .cmp(&y.level.priority())
            .then(y.area().cmp(&x.area()))
            .then(y.score.total_cmp(&x.score))
            .then(x.id.cmp(&y.id))
    });
    idx
}

/// Greedy overlap-minimising selection followed by partition enforcement.
///
/// A candidate is accepted iff the fraction of its foreground already
/// covered by accepted masks is below `theta`. Each covered pixel belongs
/// to the earliest accepted mask covering it; each 8-connected component of
/// uncovered pixels becomes a residual superpixel. Superpixels are indexed
/// in acceptance order, residuals last in row-major order of their first
/// pixel. Since `theta < 1`, every accepted mask owns at least one pixel.
pub fn filter_candidates(
    cands: &[CandidateMask],
    height: usize,
    width: usize,
    theta: f64,
) -> Result<SuperpixelSet> {
    if !(theta > 0.0 && theta < 1.0) {
        return Err(Error::invalid(format!("overlap threshold {theta} outside (0, 1)")));
    }
    if height == 0 || width == 0 {
        return Err(Error::invalid("mask grid has zero area"));
    }
    for c in cands {
        if c.mask().dims() != (height, width) {
            return Err(Error::shape(format!(
                "mask {} is {:?}, set declares {}×{}",
                c.id,
                c.mask().dims(),
                height,
                width
            )));
        }
    }

    const FREE: u32 = u32::MAX;
    let mut owner = vec![FREE; height * width];
    let mut sources = Vec::new();
    for i in candidate_order(cands) {
        let c = &cands[i];
        let px = c.mask().data();
        let covered = px
            .iter()
            .zip(&owner)
            .filter(|&(&m, &o)| m && o != FREE)
            .count();
        if (covered as f64) / (c.area() as f64) >= theta {
            continue;
        }
        let label = sources.len() as u32;
        for (o, &m) in owner.iter_mut().zip(px) {
            if m && *o == FREE {
                *o = label;
            }
        }
        sources.push(Source::Candidate {
            id: c.id,
            level: c.level,
        });
    }

    let mut queue = VecDeque::new();
    for start in 0..owner.len() {
        if owner[start] != FREE {
            continue;
        }
        let label = sources.len() as u32;
        sources.push(Source::Residual);
        owner[start] = label;
        queue.push_back(start);
        while let Some(p) = queue.pop_front() {
            let (r, c) = ((p / width) as isize, (p % width) as isize);
            for dr in -1..=1 {
                for dc in -1..=1 {
                    let (nr, nc) = (r + dr, c + dc);
                    if nr < 0 || nc < 0 || nr >= height as isize || nc >= width as isize {
                        continue;
                    }
                    let q = nr as usize * width + nc as usize;
                    if owner[q] == FREE {
                        owner[q] = label;
                        queue.push_back(q);
                    }
                }
            }
        }
    }

    let count = sources.len();
    SuperpixelSet::from_labels(height, width, count, owner, Some(sources))
}

/// The partition as a mask file, one disjoint mask per superpixel in index
/// order. Accepted candidates keep their id, level and score; residual
/// regions get fresh ids after the largest candidate id, level `subpart`
/// and score 0.
pub fn partition_mask_file(sp: &SuperpixelSet, cands: &[CandidateMask]) -> Result<MaskFile> {
    let mut next_id = cands.iter().map(|c| c.id).max().map_or(0, |m| m + 1);
    let mut masks = Vec::with_capacity(sp.len());
    for (i, src) in sp.sources().iter().enumerate() {
        let grid = sp.mask(i)?;
        let m = match *src {
            Source::Candidate { id, level } => {
                let score = cands.iter().find(|c| c.id == id).map_or(1.0, |c| c.score);
                CandidateMask::new(id, level, score, grid)?
            }
            Source::Residual => {
                let id = next_id;
                next_id += 1;
                CandidateMask::new(id, Level::Subpart, 0.0, grid)?
            }
        };
        masks.push(m);
    }
    Ok(MaskFile {
        height: sp.height(),
        width: sp.width(),
        masks,
    })
}
