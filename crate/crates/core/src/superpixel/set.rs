use rand::seq::SliceRandom;
use rand::SeedableRng;

use super::mask::{nearest_indices, BinaryGrid, Level};
use crate::numcore::DenseArray;
use crate::{Error, Result};

/// Where a superpixel came from.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Source {
    /// An accepted candidate mask.
    Candidate { id: u32, level: Level },
    /// An 8-connected component of pixels no accepted mask covered.
    Residual,
}

/// Tight inclusive bounding box in pixel units.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BBox {
    pub row_min: usize,
    pub col_min: usize,
    pub row_max: usize,
    pub col_max: usize,
}

impl BBox {
    /// `[row_min/H, col_min/W, (row_max+1)/H, (col_max+1)/W]`, so a full-grid
    /// box maps to `[0, 0, 1, 1]`.
    pub fn normalized(&self, height: usize, width: usize) -> [f64; 4] {
        let h = height as f64;
        let w = width as f64;
        [
            self.row_min as f64 / h,
            self.col_min as f64 / w,
            (self.row_max + 1) as f64 / h,
            (self.col_max + 1) as f64 / w,
        ]
    }
}

/// A partition of an `H × W` grid into `M` non-empty superpixels.
#[derive(Clone, Debug, PartialEq)]
pub struct SuperpixelSet {
    height: usize,
    width: usize,
    count: usize,
    labels: Vec<u32>,
    order: Vec<usize>,
    sources: Vec<Source>,
}

impl SuperpixelSet {
    /// Validating constructor. `order` defaults to the identity and
    /// `sources` to all-residual when omitted.
    pub fn from_labels(
        height: usize,
        width: usize,
        count: usize,
        labels: Vec<u32>,
        sources: Option<Vec<Source>>,
    ) -> Result<Self> {
        let sources = sources.unwrap_or_else(|| vec![Source::Residual; count]);
        let set = Self {
            height,
            width,
            count,
            labels,
            order: (0..count).collect(),
            sources,
        };
        set.validate()?;
        Ok(set)
    }

    /// Checks the partition invariant: every pixel carries a label in
    /// `[0, M)`, every superpixel owns at least one pixel, and `order` is a
    /// permutation.
    pub fn validate(&self) -> Result<()> {
        if self.count == 0 {
            return Err(Error::invalid("a superpixel set needs at least one superpixel"));
        }
        if self.labels.len() != self.height * self.width {
            return Err(Error::shape(format!(
                "label grid has {} entries for {}×{}",
                self.labels.len(),
                self.height,
                self.width
            )));
        }
        if self.sources.len() != self.count || self.order.len() != self.count {
            return Err(Error::shape("sources/order length differ from M"));
        }
        let mut seen = vec![false; self.count];
        for &o in &self.order {
            if o >= self.count || std::mem::replace(&mut seen[o], true) {
                return Err(Error::invalid("order is not a permutation"));
            }
        }
        let areas = self.areas_checked()?;
        if let Some(i) = areas.iter().position(|&a| a == 0) {
            return Err(Error::invalid(format!("superpixel {i} is empty")));
        }
        Ok(())
    }

    fn areas_checked(&self) -> Result<Vec<usize>> {
        let mut areas = vec![0usize; self.count];
        for &l in &self.labels {
            let l = l as usize;
            if l >= self.count {
                return Err(Error::invalid(format!("label {l} outside [0, {})", self.count)));
            }
            areas[l] += 1;
        }
        Ok(areas)
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn num_pixels(&self) -> usize {
        self.labels.len()
    }

    /// M.
    pub fn len(&self) -> usize {
        self.count
    }

    pub fn is_empty(&self) -> bool {
        self.count == 0
    }

    pub fn labels(&self) -> &[u32] {
        &self.labels
    }

    pub fn label_at(&self, r: usize, c: usize) -> usize {
        self.labels[r * self.width + c] as usize
    }

    /// `order[i]` is the index superpixel `i` had when the set was built.
    pub fn order(&self) -> &[usize] {
        &self.order
    }

    pub fn sources(&self) -> &[Source] {
        &self.sources
    }

    pub fn areas(&self) -> Vec<usize> {
        let mut areas = vec![0usize; self.count];
        for &l in &self.labels {
            areas[l as usize] += 1;
        }
        areas
    }

    fn check_index(&self, i: usize) -> Result<()> {
        if i >= self.count {
            return Err(Error::invalid(format!(
                "superpixel index {i} out of range for M={}",
                self.count
            )));
        }
        Ok(())
    }

    pub fn mask(&self, i: usize) -> Result<BinaryGrid> {
        self.check_index(i)?;
        let data = self.labels.iter().map(|&l| l as usize == i).collect();
        BinaryGrid::from_vec(self.height, self.width, data)
    }

    /// Binary assignment matrix S, `M × HW`.
    pub fn mask_matrix(&self) -> DenseArray {
        let n = self.num_pixels();
        let mut s = DenseArray::zeros(&[self.count, n]);
        for (p, &l) in self.labels.iter().enumerate() {
            s.data_mut()[l as usize * n + p] = 1.0;
        }
        s
    }

    pub fn bbox_of(&self, i: usize) -> Result<BBox> {
        self.check_index(i)?;
        let mut b = BBox {
            row_min: usize::MAX,
            col_min: usize::MAX,
            row_max: 0,
            col_max: 0,
        };
        for (p, &l) in self.labels.iter().enumerate() {
            if l as usize == i {
                let (r, c) = (p / self.width, p % self.width);
                b.row_min = b.row_min.min(r);
                b.col_min = b.col_min.min(c);
                b.row_max = b.row_max.max(r);
                b.col_max = b.col_max.max(c);
            }
        }
        Ok(b)
    }

    /// Mean pixel row/column (pixel `(r, c)` sits at coordinate `(r, c)`)
    /// and pixel count.
    pub fn centroid_area(&self, i: usize) -> Result<((f64, f64), usize)> {
        self.check_index(i)?;
        let (mut sr, mut sc, mut n) = (0.0, 0.0, 0usize);
        for (p, &l) in self.labels.iter().enumerate() {
            if l as usize == i {
                sr += (p / self.width) as f64;
                sc += (p % self.width) as f64;
                n += 1;
            }
        }
        Ok(((sr / n as f64, sc / n as f64), n))
    }

    /// Reorders superpixels so that new superpixel `j` is old `perm[j]`.
    pub fn permuted(&self, perm: &[usize]) -> Result<Self> {
        if perm.len() != self.count {
            return Err(Error::shape(format!(
                "permutation of length {} for M={}",
                perm.len(),
                self.count
            )));
        }
        let mut inverse = vec![usize::MAX; self.count];
        for (j, &old) in perm.iter().enumerate() {
            if old >= self.count || inverse[old] != usize::MAX {
                return Err(Error::invalid("not a permutation"));
            }
            inverse[old] = j;
        }
        Ok(Self {
            height: self.height,
            width: self.width,
            count: self.count,
            labels: self.labels.iter().map(|&l| inverse[l as usize] as u32).collect(),
            order: perm.iter().map(|&old| self.order[old]).collect(),
            sources: perm.iter().map(|&old| self.sources[old]).collect(),
        })
    }

    /// Seeded random reordering. Returns the set and the permutation used
    /// (new index `j` holds old superpixel `perm[j]`).
    pub fn shuffled(&self, seed: u64) -> (Self, Vec<usize>) {
        let mut perm: Vec<usize> = (0..self.count).collect();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        perm.shuffle(&mut rng);
        let set = self.permuted(&perm).expect("shuffle yields a permutation");
        (set, perm)
    }

    /// Inverse of any sequence of shuffles: restores construction order.
    pub fn sorted_by_order(&self) -> Self {
        let mut perm: Vec<usize> = (0..self.count).collect();
        perm.sort_by_key(|&i| self.order[i]);
        self.permuted(&perm).expect("sort yields a permutation")
    }

    /// The scale factor `√(P_target / (M·H·W))` used by [`Self::resized`].
    pub fn resize_factor(&self, target_total_pixels: f64) -> f64 {
        (target_total_pixels / (self.count * self.num_pixels()) as f64).sqrt()
    }

    /// Nearest-neighbour resize of the label grid by the factor above, so
    /// that the `M` per-superpixel key sequences hold about `P_target`
    /// pixels in total.
    ///
    /// A superpixel that loses all its pixels is re-seeded at the pixel
    /// closest to its rescaled centroid among pixels whose current owner
    /// keeps at least one other pixel.
    pub fn resized(&self, target_total_pixels: f64) -> Result<Self> {
        if !(target_total_pixels > 0.0) || !target_total_pixels.is_finite() {
            return Err(Error::invalid(format!(
                "target pixel budget must be positive, got {target_total_pixels}"
            )));
        }
        let f = self.resize_factor(target_total_pixels);
        let new_h = ((f * self.height as f64).round() as usize).max(1);
        let new_w = ((f * self.width as f64).round() as usize).max(1);
        self.resized_to(new_h, new_w)
    }

    /// Nearest-neighbour resize to explicit dims, with re-seeding.
    pub fn resized_to(&self, new_h: usize, new_w: usize) -> Result<Self> {
        if new_h * new_w < self.count {
            return Err(Error::invalid(format!(
                "{new_h}×{new_w} grid cannot hold {} non-empty superpixels",
                self.count
            )));
        }
        if (new_h, new_w) == self.dims() {
            return Ok(self.clone());
        }
        let rows = nearest_indices(self.height, new_h);
        let cols = nearest_indices(self.width, new_w);
        let mut labels = Vec::with_capacity(new_h * new_w);
        for &r in &rows {
            for &c in &cols {
                labels.push(self.labels[r * self.width + c]);
            }
        }
        let mut areas = vec![0usize; self.count];
        for &l in &labels {
            areas[l as usize] += 1;
        }
        let sy = new_h as f64 / self.height as f64;
        let sx = new_w as f64 / self.width as f64;
        for i in 0..self.count {
            if areas[i] > 0 {
                continue;
            }
            let ((cr, cc), _) = self.centroid_area(i)?;
            let tr = (cr + 0.5) * sy - 0.5;
            let tc = (cc + 0.5) * sx - 0.5;
            let mut best: Option<(f64, usize)> = None;
            for (p, &l) in labels.iter().enumerate() {
                if areas[l as usize] < 2 {
                    continue;
                }
                let dr = (p / new_w) as f64 - tr;
                let dc = (p % new_w) as f64 - tc;
                let d = dr * dr + dc * dc;
                if best.is_none_or(|(bd, _)| d < bd) {
                    best = Some((d, p));
                }
            }
            let (_, p) = best.expect("pixel count ≥ M guarantees a donor");
            areas[labels[p] as usize] -= 1;
            labels[p] = i as u32;
            areas[i] = 1;
        }
        let out = Self {
            height: new_h,
            width: new_w,
            count: self.count,
            labels,
            order: self.order.clone(),
            sources: self.sources.clone(),
        };
        debug_assert!(out.validate().is_ok());
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn stripes(h: usize, w: usize, m: usize) -> SuperpixelSet {
        let labels = (0..h * w).map(|p| ((p % w) * m / w) as u32).collect();
        SuperpixelSet::from_labels(h, w, m, labels, None).unwrap()
    }

    #[test]
    fn validation_catches_broken_partitions() {
        assert!(SuperpixelSet::from_labels(2, 2, 2, vec![0, 0, 0, 0], None).is_err());
        assert!(SuperpixelSet::from_labels(2, 2, 2, vec![0, 1, 2, 0], None).is_err());
        assert!(SuperpixelSet::from_labels(2, 2, 0, vec![], None).is_err());
        assert!(SuperpixelSet::from_labels(2, 2, 2, vec![0, 1, 1, 0], None).is_ok());
    }

    #[test]
    fn full_grid_geometry() {
        let s = SuperpixelSet::from_labels(5, 7, 1, vec![0; 35], None).unwrap();
        let b = s.bbox_of(0).unwrap();
        assert_eq!((b.row_min, b.col_min, b.row_max, b.col_max), (0, 0, 4, 6));
        let ((r, c), a) = s.centroid_area(0).unwrap();
        assert_eq!((r, c, a), (2.0, 3.0, 35));
        assert_eq!(b.normalized(5, 7), [0.0, 0.0, 1.0, 1.0]);
        assert!(s.bbox_of(1).is_err());
    }

    #[test]
    fn single_pixel_geometry() {
        let mut labels = vec![0u32; 20];
        labels[2 * 5 + 3] = 1;
        let s = SuperpixelSet::from_labels(4, 5, 2, labels, None).unwrap();
        let b = s.bbox_of(1).unwrap();
        assert_eq!((b.row_min, b.col_min, b.row_max, b.col_max), (2, 3, 2, 3));
        assert_eq!(s.centroid_area(1).unwrap(), ((2.0, 3.0), 1));
    }

    #[test]
    fn unit_factor_from_reference_constant() {
        let s = stripes(126, 126, 40);
        let r = s.resized(40.0 * 126.0 * 126.0).unwrap();
        assert_eq!(r, s);
    }

    #[test]
    fn half_factor_arithmetic() {
        let s = stripes(64, 64, 10);
        assert!((s.resize_factor(10.0 * 32.0 * 32.0) - 0.5).abs() < 1e-15);
        assert_eq!(s.resized(10.0 * 32.0 * 32.0).unwrap().dims(), (32, 32));
    }

    #[test]
    fn tiny_superpixel_is_reseeded() {
        let mut labels = vec![0u32; 64];
        labels[9] = 1;
        let s = SuperpixelSet::from_labels(8, 8, 2, labels, None).unwrap();
        let r = s.resized_to(2, 2).unwrap();
        assert_eq!(r.areas(), vec![3, 1]);
        assert_eq!(r.label_at(0, 0), 1);
    }

    #[test]
    fn shuffle_is_deterministic_and_invertible() {
        let s = stripes(6, 12, 6);
        let (a, pa) = s.shuffled(42);
        let (b, pb) = s.shuffled(42);
        assert_eq!(a, b);
        assert_eq!(pa, pb);
        assert_eq!(a.sorted_by_order(), s);
        let one = stripes(3, 3, 1);
        assert_eq!(one.shuffled(9).0, one);
    }

    #[test]
    fn mask_matrix_rows_partition() {
        let s = stripes(3, 4, 2);
        let m = s.mask_matrix();
        for p in 0..12 {
            assert_eq!(m.get(0, p) + m.get(1, p), 1.0);
        }
    }

    fn random_partition(h: usize, w: usize, m: usize, seed: u64) -> SuperpixelSet {
        use rand::Rng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let mut labels: Vec<u32> = (0..h * w).map(|_| rng.random_range(0..m as u32)).collect();
        for (i, l) in labels.iter_mut().take(m).enumerate() {
            *l = i as u32;
        }
        SuperpixelSet::from_labels(h, w, m, labels, None).unwrap()
    }

    proptest! {
        #[test]
        fn resize_preserves_partition(
            h in 4usize..20, w in 4usize..20, m in 1usize..8,
            f in 0.1f64..3.0, seed in any::<u64>()
        ) {
            let s = random_partition(h, w, m, seed);
            let target = f * f * (m * h * w) as f64;
            match s.resized(target) {
                Ok(r) => {
                    prop_assert!(r.validate().is_ok());
                    prop_assert_eq!(r.len(), m);
                    prop_assert!(r.areas().iter().all(|&a| a > 0));
                }
                Err(_) => {
                    let nh = ((f * h as f64).round() as usize).max(1);
                    let nw = ((f * w as f64).round() as usize).max(1);
                    prop_assert!(nh * nw < m);
                }
            }
        }
    }
}
