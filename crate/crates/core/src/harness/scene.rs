//! Synthetic scenes: patch-aligned objects on a background, their patch
//! embeddings, and the nested candidate masks an upstream segmenter would
//! produce for them.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::aggregator::PatchGrid;
use crate::numcore::DenseArray;
use crate::superpixel::{BinaryGrid, CandidateMask, Level};
use crate::{Error, Result};

/// Generation parameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SceneSpec {
    pub grid_h: usize,
    pub grid_w: usize,
    /// Mask pixels per patch along each axis.
    pub mask_scale: usize,
    /// Patch embedding width; at least `1 + categories + attributes`.
    pub dim: usize,
    pub categories: usize,
    pub attributes: usize,
    /// Planted objects for [`gen_scene`].
    pub objects: usize,
    /// Object side range in patches, inclusive.
    pub min_side: usize,
    pub max_side: usize,
    /// Extra small whole-mask distractors per planted object, drawn
    /// uniformly from this inclusive range.
    pub clutter_min: usize,
    pub clutter_max: usize,
    /// Spurious part/subpart masks straddling regions.
    pub spurious: usize,
    /// Standard deviation of the per-channel Gaussian noise.
    pub noise: f64,
    /// Category signal an object patch picks up from each 4-neighbour
    /// belonging to a different object (a receptive-field stand-in).
    pub bleed: f64,
}

impl Default for SceneSpec {
    /// The compact 12×12 family used by the toy selection task.
    fn default() -> Self {
        Self {
            grid_h: 12,
            grid_w: 12,
            mask_scale: 2,
            dim: 16,
            categories: 4,
            attributes: 3,
            objects: 3,
            min_side: 2,
            max_side: 3,
            clutter_min: 0,
            clutter_max: 0,
            spurious: 2,
            noise: 0.1,
            bleed: 0.5,
        }
    }
}

/// Benchmark corpus family: a 24×24 grid whose scene `i` plants
/// `1 + (i mod 12)` objects, each with four to six small distractors.
pub fn corpus_scene_spec(index: usize) -> SceneSpec {
    SceneSpec {
        grid_h: 24,
        grid_w: 24,
        attributes: 4,
        objects: 1 + index % 12,
        max_side: 4,
        clutter_min: 4,
        clutter_max: 6,
        spurious: 3,
        bleed: 0.0,
        ..SceneSpec::default()
    }
}

impl SceneSpec {
    pub fn mask_dims(&self) -> (usize, usize) {
        (self.grid_h * self.mask_scale, self.grid_w * self.mask_scale)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |f: &str, m: &str| Err(Error::format("scene spec", f, m));
        if self.grid_h == 0 || self.grid_w == 0 {
            return bad("grid_h", "grid must be non-empty");
        }
        if self.mask_scale == 0 {
            return bad("mask_scale", "must be positive");
        }
        if self.categories == 0 || self.attributes == 0 {
            return bad("categories", "need at least one category and attribute");
        }
        if self.dim < 1 + self.categories + self.attributes {
            return bad("dim", "too narrow for the signature channels");
        }
        if self.min_side == 0 || self.min_side > self.max_side {
            return bad("min_side", "need 1 ≤ min_side ≤ max_side");
        }
        if self.clutter_min > self.clutter_max {
            return bad("clutter_min", "exceeds clutter_max");
        }
        if !(self.noise >= 0.0 && self.noise.is_finite()) {
            return bad("noise", "must be a non-negative number");
        }
        if !(self.bleed >= 0.0 && self.bleed.is_finite()) {
            return bad("bleed", "must be a non-negative number");
        }
        Ok(())
    }

    /// Channel index of the background, category and attribute indicators.
    pub fn background_channel(&self) -> usize {
        0
    }

    pub fn category_channel(&self, c: usize) -> usize {
        1 + c
    }

    pub fn attribute_channel(&self, a: usize) -> usize {
        1 + self.categories + a
    }
}

/// One object, given by the patches it covers.
#[derive(Clone, Debug, PartialEq)]
pub struct SceneObject {
    pub category: usize,
    pub attribute: usize,
    pub cells: Vec<(usize, usize)>,
    /// Distractor filler rather than a planted object.
    pub clutter: bool,
}

impl SceneObject {
    pub fn rect(category: usize, attribute: usize, r0: usize, c0: usize, h: usize, w: usize) -> Self {
        let cells = (r0..r0 + h).flat_map(|r| (c0..c0 + w).map(move |c| (r, c))).collect();
        Self {
            category,
            attribute,
            cells,
            clutter: false,
        }
    }

    /// A rectangle with one corner patch removed (`corner` 0..4 =
    /// top-left, top-right, bottom-left, bottom-right). Needs both sides ≥ 2.
    pub fn blob(
        category: usize,
        attribute: usize,
        r0: usize,
        c0: usize,
        h: usize,
        w: usize,
        corner: usize,
    ) -> Self {
        let mut o = Self::rect(category, attribute, r0, c0, h, w);
        if h >= 2 && w >= 2 {
            let (r, c) = match corner % 4 {
                0 => (r0, c0),
                1 => (r0, c0 + w - 1),
                2 => (r0 + h - 1, c0),
                _ => (r0 + h - 1, c0 + w - 1),
            };
            o.cells.retain(|&x| x != (r, c));
        }
        o
    }

    pub fn area(&self) -> usize {
        self.cells.len()
    }

    /// Mean patch centre `(row, col)`, patch `(r, c)` centred at `(r+½, c+½)`.
    pub fn centroid(&self) -> (f64, f64) {
        let n = self.cells.len() as f64;
        let (sr, sc) = self
            .cells
            .iter()
            .fold((0.0, 0.0), |(a, b), &(r, c)| (a + r as f64 + 0.5, b + c as f64 + 0.5));
        (sr / n, sc / n)
    }

    /// Inclusive `(r0, c0, r1, c1)`.
    pub fn bbox(&self) -> (usize, usize, usize, usize) {
        let r0 = self.cells.iter().map(|c| c.0).min().unwrap_or(0);
        let c0 = self.cells.iter().map(|c| c.1).min().unwrap_or(0);
        let r1 = self.cells.iter().map(|c| c.0).max().unwrap_or(0);
        let c1 = self.cells.iter().map(|c| c.1).max().unwrap_or(0);
        (r0, c0, r1, c1)
    }

    /// Shares an edge with `other`.
    pub fn touches(&self, other: &SceneObject) -> bool {
        self.cells.iter().any(|&(r, c)| {
            other.cells.iter().any(|&(s, d)| r.abs_diff(s) + c.abs_diff(d) == 1)
        })
    }
}

/// A rendered scene.
#[derive(Clone, Debug)]
pub struct Scene {
    pub spec: SceneSpec,
    pub objects: Vec<SceneObject>,
    pub grid: PatchGrid,
    pub candidates: Vec<CandidateMask>,
    /// Per patch: 0 for background, `i + 1` for object `i`.
    pub patch_labels: Vec<usize>,
}

impl Scene {
    pub fn mask_dims(&self) -> (usize, usize) {
        self.spec.mask_dims()
    }

    pub fn planted(&self) -> usize {
        self.objects.iter().filter(|o| !o.clutter).count()
    }
}

/// Rasterises `objects`, adds noise and builds the candidate list.
pub fn render_scene(spec: &SceneSpec, objects: Vec<SceneObject>, seed: u64) -> Result<Scene> {
    spec.validate()?;
    let (h, w) = (spec.grid_h, spec.grid_w);
    let mut labels = vec![0usize; h * w];
    for (i, o) in objects.iter().enumerate() {
        if o.cells.is_empty() {
            return Err(Error::invalid(format!("object {i} has no cells")));
        }
        if o.category >= spec.categories || o.attribute >= spec.attributes {
            return Err(Error::invalid(format!("object {i} uses an unknown category/attribute")));
        }
        for &(r, c) in &o.cells {
            if r >= h || c >= w {
                return Err(Error::invalid(format!("object {i} leaves the {h}×{w} grid")));
            }
            if labels[r * w + c] != 0 {
                return Err(Error::invalid(format!("object {i} overlaps another object")));
            }
            labels[r * w + c] = i + 1;
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = Normal::new(0.0, spec.noise).map_err(|e| Error::invalid(e.to_string()))?;
    let mut f = DenseArray::zeros(&[h * w, spec.dim]);
    for (p, &l) in labels.iter().enumerate() {
        let row = f.row_mut(p);
        if l == 0 {
            row[spec.background_channel()] = 1.0;
        } else {
            let o = &objects[l - 1];
            row[spec.category_channel(o.category)] = 1.0;
            row[spec.attribute_channel(o.attribute)] = 1.0;
            if spec.bleed > 0.0 {
                let (r, c) = (p / w, p % w);
                let nbrs = [(r.wrapping_sub(1), c), (r + 1, c), (r, c.wrapping_sub(1)), (r, c + 1)];
                for (nr, nc) in nbrs {
                    if nr < h && nc < w {
                        let q = labels[nr * w + nc];
                        if q != 0 && q != l {
                            row[spec.category_channel(objects[q - 1].category)] += spec.bleed;
                        }
                    }
                }
            }
        }
        if spec.noise > 0.0 {
            for x in row.iter_mut() {
                *x += noise.sample(&mut rng);
            }
        }
    }
    let grid = PatchGrid::new(h, w, f)?;

    let s = spec.mask_scale;
    let (mh, mw) = spec.mask_dims();
    let pixel_grid = |cells: &dyn Fn(usize, usize) -> bool| {
        BinaryGrid::from_fn(mh, mw, |r, c| cells(r / s, c / s))
    };
    let mut cands = Vec::new();
    let mut push = |level: Level, grid: BinaryGrid, rng: &mut ChaCha8Rng| -> Result<()> {
        if grid.area() == 0 {
            return Ok(());
        }
        let id = cands.len() as u32;
        let score = rng.random_range(0.5..1.0);
        cands.push(CandidateMask::new(id, level, score, grid)?);
        Ok(())
    };
    for (i, o) in objects.iter().enumerate() {
        let inside = |r: usize, c: usize| labels[r * w + c] == i + 1;
        let whole = pixel_grid(&inside);
        let (r0, c0, r1, c1) = o.bbox();
        let (pr0, pc0) = (r0 * s, c0 * s);
        let (pr1, pc1) = ((r1 + 1) * s, (c1 + 1) * s);
        let (mr, mc) = ((pr0 + pr1) / 2, (pc0 + pc1) / 2);
        push(Level::Whole, whole.clone(), &mut rng)?;
        if o.clutter {
            continue;
        }
        let masked = |f: &dyn Fn(usize, usize) -> bool| BinaryGrid::from_fn(mh, mw, |r, c| whole.get(r, c) && f(r, c));
        if pr1 - pr0 >= pc1 - pc0 {
            push(Level::Part, masked(&|r, _| r < mr), &mut rng)?;
            push(Level::Part, masked(&|r, _| r >= mr), &mut rng)?;
        } else {
            push(Level::Part, masked(&|_, c| c < mc), &mut rng)?;
            push(Level::Part, masked(&|_, c| c >= mc), &mut rng)?;
        }
        for q in 0..4 {
            let top = q < 2;
            let left = q % 2 == 0;
            push(
                Level::Subpart,
                masked(&|r, c| (r < mr) == top && (c < mc) == left),
                &mut rng,
            )?;
        }
    }
    push(Level::Whole, pixel_grid(&|r, c| labels[r * w + c] == 0), &mut rng)?;
    for _ in 0..spec.spurious {
        let sh = rng.random_range(1..=mh.max(2) / 2);
        let sw = rng.random_range(1..=mw.max(2) / 2);
        let r0 = rng.random_range(0..=mh - sh.min(mh));
        let c0 = rng.random_range(0..=mw - sw.min(mw));
        let level = if rng.random_bool(0.5) { Level::Part } else { Level::Subpart };
        let g = BinaryGrid::from_fn(mh, mw, |r, c| r >= r0 && r < r0 + sh && c >= c0 && c < c0 + sw);
        push(level, g, &mut rng)?;
    }

    Ok(Scene {
        spec: spec.clone(),
        objects,
        grid,
        candidates: cands,
        patch_labels: labels,
    })
}

/// Tries to place an object of the given shape without touching `taken`
/// (a one-patch margin is kept unless `margin` is false).
#[allow(clippy::too_many_arguments)]
pub(crate) fn place_random(
    rng: &mut impl Rng,
    spec: &SceneSpec,
    taken: &[SceneObject],
    category: usize,
    attribute: usize,
    (h, w): (usize, usize),
    blob: bool,
    margin: bool,
) -> Option<SceneObject> {
    if h > spec.grid_h || w > spec.grid_w {
        return None;
    }
    for _ in 0..200 {
        let r0 = rng.random_range(0..=spec.grid_h - h);
        let c0 = rng.random_range(0..=spec.grid_w - w);
        let o = if blob {
            SceneObject::blob(category, attribute, r0, c0, h, w, rng.random_range(0..4))
        } else {
            SceneObject::rect(category, attribute, r0, c0, h, w)
        };
        if fits(&o, taken, margin) {
            return Some(o);
        }
    }
    None
}

pub(crate) fn fits(o: &SceneObject, taken: &[SceneObject], margin: bool) -> bool {
    let gap = usize::from(margin);
    taken.iter().all(|t| {
        o.cells.iter().all(|&(r, c)| {
            t.cells
                .iter()
                .all(|&(s, d)| r.abs_diff(s) > gap || c.abs_diff(d) > gap)
        })
    })
}

/// Random scene with `spec.objects` planted objects plus clutter.
pub fn gen_scene(seed: u64, spec: &SceneSpec) -> Result<Scene> {
    spec.validate()?;
    if spec.objects == 0 {
        return Err(Error::invalid("a scene needs at least one object"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut objects: Vec<SceneObject> = Vec::new();
    for i in 0..spec.objects {
        let hh = rng.random_range(spec.min_side..=spec.max_side);
        let ww = rng.random_range(spec.min_side..=spec.max_side);
        let cat = rng.random_range(0..spec.categories);
        let attr = rng.random_range(0..spec.attributes);
        let blob = rng.random_bool(0.5);
        let o = place_random(&mut rng, spec, &objects, cat, attr, (hh, ww), blob, true)
            .ok_or_else(|| Error::invalid(format!("no room for planted object {i}")))?;
        objects.push(o);
    }
    let planted = objects.len();
    for i in 0..planted {
        let n = rng.random_range(spec.clutter_min..=spec.clutter_max);
        for _ in 0..n {
            let hh = rng.random_range(1..=2);
            let ww = rng.random_range(1..=2);
            let cat = rng.random_range(0..spec.categories);
            let attr = rng.random_range(0..spec.attributes);
            let mut o = place_random(&mut rng, spec, &objects, cat, attr, (hh, ww), false, false)
                .ok_or_else(|| Error::invalid(format!("no room for clutter of object {i}")))?;
            o.clutter = true;
            objects.push(o);
        }
    }
    render_scene(spec, objects, rng.random())
}
