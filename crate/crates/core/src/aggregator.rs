//! Superpixel pooling, SSPE scattering and the superpixel aggregator.

use std::fmt;

use rand::Rng;

use crate::numcore::{
    block_stack, new_blocks, sinusoidal_pe_2d, AttentionConfig, AttnMask, BlockParams,
    DenseArray, ParamStore, Tape, Var,
};
use crate::superpixel::{nearest_indices, SuperpixelSet};
use crate::{Error, Result};

/// Patch-embedding field `F`, `HW × d` row-major over the patch grid.
#[derive(Clone, Debug, PartialEq)]
pub struct PatchGrid {
    height: usize,
    width: usize,
    features: DenseArray,
}

impl PatchGrid {
    pub fn new(height: usize, width: usize, features: DenseArray) -> Result<Self> {
        if height * width == 0 {
            return Err(Error::invalid("patch grid has no patches"));
        }
        if features.shape().len() != 2 || features.rows() != height * width {
            return Err(Error::shape(format!(
                "{height}×{width} patch grid needs {} feature rows, got {:?}",
                height * width,
                features.shape()
            )));
        }
        if !features.is_finite() {
            return Err(Error::NonFinite("patch embeddings".into()));
        }
        Ok(Self {
            height,
            width,
            features,
        })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn dim(&self) -> usize {
        self.features.cols()
    }

    pub fn num_patches(&self) -> usize {
        self.height * self.width
    }

    pub fn features(&self) -> &DenseArray {
        &self.features
    }
}

/// A superpixel set resampled to patch resolution.
#[derive(Clone, Debug, PartialEq)]
pub struct PatchAlignedSuperpixels {
    height: usize,
    width: usize,
    labels: Vec<usize>,
    /// `kept[j]` is the index in the source set of surviving superpixel `j`.
    kept: Vec<usize>,
    /// `remap[i]` is the new index of source superpixel `i`, if it survived.
    remap: Vec<Option<usize>>,
}

impl PatchAlignedSuperpixels {
    /// Builds directly from per-patch labels, which must cover `[0, M)`.
    pub fn from_labels(height: usize, width: usize, labels: Vec<usize>) -> Result<Self> {
        if labels.len() != height * width || labels.is_empty() {
            return Err(Error::shape("patch label count differs from grid"));
        }
        let m = labels.iter().max().map_or(0, |&x| x + 1);
        let mut seen = vec![false; m];
        for &l in &labels {
            seen[l] = true;
        }
        if seen.iter().any(|&s| !s) {
            return Err(Error::invalid("patch labels skip a superpixel"));
        }
        Ok(Self {
            height,
            width,
            labels,
            kept: (0..m).collect(),
            remap: (0..m).map(Some).collect(),
        })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn len(&self) -> usize {
        self.kept.len()
    }

    pub fn is_empty(&self) -> bool {
        self.kept.is_empty()
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn kept(&self) -> &[usize] {
        &self.kept
    }

    pub fn remap(&self) -> &[Option<usize>] {
        &self.remap
    }

    pub fn areas(&self) -> Vec<usize> {
        let mut a = vec![0; self.len()];
        for &l in &self.labels {
            a[l] += 1;
        }
        a
    }

    /// Patch indices of each superpixel.
    pub fn supports(&self) -> Vec<Vec<usize>> {
        let mut s = vec![Vec::new(); self.len()];
        for (p, &l) in self.labels.iter().enumerate() {
            s[l].push(p);
        }
        s
    }

    /// Binary assignment `S`, `M × HW`.
    pub fn mask_matrix(&self) -> DenseArray {
        let n = self.labels.len();
        let mut s = DenseArray::zeros(&[self.len(), n]);
        for (p, &l) in self.labels.iter().enumerate() {
            s.data_mut()[l * n + p] = 1.0;
        }
        s
    }

    /// Reorders so new superpixel `j` is current `perm[j]`.
    pub fn permuted(&self, perm: &[usize]) -> Result<Self> {
        let m = self.len();
        let mut inverse = vec![usize::MAX; m];
        if perm.len() != m {
            return Err(Error::shape("permutation length differs from M"));
        }
        for (j, &old) in perm.iter().enumerate() {
            if old >= m || inverse[old] != usize::MAX {
                return Err(Error::invalid("not a permutation"));
            }
            inverse[old] = j;
        }
        Ok(Self {
            height: self.height,
            width: self.width,
            labels: self.labels.iter().map(|&l| inverse[l]).collect(),
            kept: perm.iter().map(|&j| self.kept[j]).collect(),
            remap: self.remap.iter().map(|r| r.map(|j| inverse[j])).collect(),
        })
    }
}

/// Nearest-neighbour resampling of `sp`'s labels to the `h × w` patch grid.
///
/// Superpixels that end up owning no patch are dropped and the survivors
/// renumbered in their original relative order.
pub fn align_to_patches(sp: &SuperpixelSet, h: usize, w: usize) -> Result<PatchAlignedSuperpixels> {
    if h * w == 0 {
        return Err(Error::invalid("patch grid has zero area"));
    }
    let rows = nearest_indices(sp.height(), h);
    let cols = nearest_indices(sp.width(), w);
    let mut raw = Vec::with_capacity(h * w);
    for &r in &rows {
        for &c in &cols {
            raw.push(sp.label_at(r, c));
        }
    }
    let mut present = vec![false; sp.len()];
    for &l in &raw {
        present[l] = true;
    }
    let mut remap = vec![None; sp.len()];
    let mut kept = Vec::new();
    for (i, &p) in present.iter().enumerate() {
        if p {
            remap[i] = Some(kept.len());
            kept.push(i);
        }
    }
    let labels = raw.iter().map(|&l| remap[l].expect("present")).collect();
    Ok(PatchAlignedSuperpixels {
        height: h,
        width: w,
        labels,
        kept,
        remap,
    })
}

/// `E′ = N₁(S)·F`: per-superpixel mean of the patch embeddings (`M × d`).
pub fn pool_superpixels(tape: &mut Tape, s: &PatchAlignedSuperpixels, f: Var) -> Result<Var> {
    if tape.value(f).rows() != s.labels.len() {
        return Err(Error::shape(format!(
            "{} patch rows for {} labelled patches",
            tape.value(f).rows(),
            s.labels.len()
        )));
    }
    Ok(tape.segment_mean(f, s.labels.clone(), s.len()))
}

/// `P_patch = Sᵀ·P_sp`: each patch receives its owner's SSPE row (`HW × d`).
pub fn scatter_sspe(tape: &mut Tape, s: &PatchAlignedSuperpixels, p_sp: Var) -> Result<Var> {
    if tape.value(p_sp).rows() != s.len() {
        return Err(Error::shape(format!(
            "{} SSPE rows for {} superpixels",
            tape.value(p_sp).rows(),
            s.len()
        )));
    }
    Ok(tape.gather_rows(p_sp, s.labels.clone()))
}

/// How the aggregator's cross-attention relates queries to patches.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum SsaMode {
    /// Patch keys carry their superpixel's SSPE on top of the grid PE.
    #[default]
    ShareSspe,
    /// Patch keys carry the grid PE only.
    NoShare,
    /// Grid PE only, and each query may attend only to its own patches.
    AttnBias,
}

impl SsaMode {
    pub const ALL: [SsaMode; 3] = [SsaMode::ShareSspe, SsaMode::NoShare, SsaMode::AttnBias];

    pub fn as_str(self) -> &'static str {
        match self {
            SsaMode::ShareSspe => "share_sspe",
            SsaMode::NoShare => "no_share",
            SsaMode::AttnBias => "attn_bias",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "share_sspe" => Ok(SsaMode::ShareSspe),
            "no_share" => Ok(SsaMode::NoShare),
            "attn_bias" => Ok(SsaMode::AttnBias),
            other => Err(Error::invalid(format!("unknown aggregator mode {other:?}"))),
        }
    }
}

impl fmt::Display for SsaMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Logit bias that confines each query to the patches of its superpixel.
pub const OUTSIDE_BIAS: f64 = -1e9;

#[derive(Clone, Debug)]
pub struct SsaParams {
    pub mode: SsaMode,
    pub cfg: AttentionConfig,
    pub blocks: Vec<BlockParams>,
}

impl SsaParams {
    pub const DEFAULT_HEADS: usize = 4;
    pub const BLOCKS: usize = 3;

    pub fn new(
        store: &mut ParamStore,
        rng: &mut impl Rng,
        name: &str,
        d: usize,
        heads: usize,
        mode: SsaMode,
    ) -> Result<Self> {
        let cfg = AttentionConfig::new(d, heads)?;
        let blocks = new_blocks(store, rng, &format!("{name}.block"), &cfg, Self::BLOCKS)?;
        Ok(Self { mode, cfg, blocks })
    }
}

/// Refines pooled embeddings `E′` by attending over the patch field `F`.
///
/// Query PE is `P_sp` in every mode; key PE is the grid's sinusoidal PE,
/// plus `P_patch` in [`SsaMode::ShareSspe`]. `p_sp = None` stands for an
/// all-zero SSPE.
pub fn ssa_forward(
    tape: &mut Tape,
    store: &ParamStore,
    params: &SsaParams,
    e_prime: Var,
    f: Var,
    p_sp: Option<Var>,
    s: &PatchAlignedSuperpixels,
) -> Result<Var> {
    let d = params.cfg.model_dim;
    let (m, hw) = (s.len(), s.labels.len());
    if tape.shape(e_prime) != [m, d] {
        return Err(Error::shape(format!(
            "pooled embeddings {:?}, expected {m}×{d}",
            tape.shape(e_prime)
        )));
    }
    if tape.shape(f) != [hw, d] {
        return Err(Error::shape(format!(
            "patch embeddings {:?}, expected {hw}×{d}",
            tape.shape(f)
        )));
    }
    let mut key_pe = tape.constant(sinusoidal_pe_2d(s.height, s.width, d)?);
    if let (SsaMode::ShareSspe, Some(p)) = (params.mode, p_sp) {
        let p_patch = scatter_sspe(tape, s, p)?;
        key_pe = tape.add(key_pe, p_patch);
    }
    let bias;
    let cross_mask = match params.mode {
        SsaMode::AttnBias => {
            let mut b = DenseArray::full(&[m, hw], OUTSIDE_BIAS);
            for (p, &l) in s.labels.iter().enumerate() {
                b.set(l, p, 0.0);
            }
            bias = b;
            AttnMask::Bias(&bias)
        }
        _ => AttnMask::Full,
    };
    block_stack(
        tape,
        store,
        &params.blocks,
        &params.cfg,
        e_prime,
        p_sp,
        f,
        Some(key_pe),
        cross_mask,
        AttnMask::Full,
    )
}
