//! The end-to-end projector, baseline compressive projectors, token
//! accounting and file formats.

mod baselines;
mod formats;
mod model;

pub use baselines::{
    avg_pool_tokens, avg_pool_windows, global_query_tokens, pixel_shuffle_tokens,
    pixel_shuffle_windows, GlobalQueryParams,
};
pub use formats::{read_embeddings, read_tokens, stats_block, write_embeddings, write_tokens};
pub use model::{
    load_svp, read_model_file, write_model_file, KvMap, SspeVariant, SvpModelConfig,
};

use rand::Rng;

use crate::aggregator::{
    align_to_patches, pool_superpixels, ssa_forward, PatchAlignedSuperpixels, PatchGrid,
    SsaMode, SsaParams,
};
use crate::numcore::{mlp_forward, DenseArray, MlpParams, ParamStore, Tape, Var};
use crate::sspe::SspeModel;
use crate::superpixel::{filter_candidates, CandidateMask, SuperpixelSet};
use crate::{Error, Result};

/// Token count of the uncompressed reference (a 24×24 patch grid).
pub const REFERENCE_TOKEN_COUNT: usize = 576;

/// Token-count statistics of one emitted sequence.
#[derive(Clone, Debug, PartialEq)]
pub struct TokenStats {
    pub token_count: usize,
    pub reference_count: usize,
    /// `1 − token_count / reference_count`.
    pub compression: f64,
    /// Patches covered by each token.
    pub areas: Vec<usize>,
}

impl TokenStats {
    pub fn new(areas: Vec<usize>, reference_count: usize) -> Self {
        let token_count = areas.len();
        Self {
            token_count,
            reference_count,
            compression: 1.0 - token_count as f64 / reference_count as f64,
            areas,
        }
    }
}

/// Emitted tokens `T_v` (`M × d′`) with provenance.
#[derive(Clone, Debug, PartialEq)]
pub struct TokenSequence {
    pub tokens: DenseArray,
    /// `order[j]` identifies the region behind token `j` (for SVP: the
    /// superpixel's index as produced by the filter).
    pub order: Vec<usize>,
    pub stats: TokenStats,
}

/// Non-learnable pipeline settings.
#[derive(Clone, Debug, PartialEq)]
pub struct SvpConfig {
    pub theta: f64,
    /// Total pixel budget over all superpixel masks fed to the SSPE encoder.
    pub target_pixels: f64,
    pub shuffle_seed: Option<u64>,
}

impl Default for SvpConfig {
    fn default() -> Self {
        Self {
            theta: crate::superpixel::DEFAULT_OVERLAP_THRESHOLD,
            target_pixels: crate::superpixel::REFERENCE_TARGET_PIXELS,
            shuffle_seed: None,
        }
    }
}

/// Learnable pieces of the projector plus ablation switches.
#[derive(Clone, Debug)]
pub struct SvpParams {
    pub sspe: SspeModel,
    pub ssa: SsaParams,
    pub proj: MlpParams,
    pub use_sspe: bool,
    pub use_ssa: bool,
}

impl SvpParams {
    /// Standard layout: `sspe.*`, `ssa.*`, `proj.*`. The projection MLP is
    /// `d → 4d → d′`.
    pub fn new(
        store: &mut ParamStore,
        rng: &mut impl Rng,
        sspe: SspeModel,
        ssa_heads: usize,
        mode: SsaMode,
        d_out: usize,
    ) -> Result<Self> {
        let d = sspe.out_dim();
        let ssa = SsaParams::new(store, rng, "ssa", d, ssa_heads, mode)?;
        let proj = MlpParams::new(store, rng, "proj", [d, 4 * d, d_out])?;
        Ok(Self {
            sspe,
            ssa,
            proj,
            use_sspe: true,
            use_ssa: true,
        })
    }

    pub fn dim(&self) -> usize {
        self.sspe.out_dim()
    }

    pub fn out_dim(&self) -> usize {
        self.proj.dims()[2]
    }
}

/// The non-differentiable part of the pipeline: filtered superpixels, their
/// resized copy for the SSPE encoder, and the patch-resolution assignment.
#[derive(Clone, Debug)]
pub struct SvpPlan {
    pub original: SuperpixelSet,
    pub resized: SuperpixelSet,
    pub aligned: PatchAlignedSuperpixels,
}

impl SvpPlan {
    pub fn build(
        cands: &[CandidateMask],
        mask_dims: (usize, usize),
        grid_dims: (usize, usize),
        cfg: &SvpConfig,
    ) -> Result<Self> {
        let sp = filter_candidates(cands, mask_dims.0, mask_dims.1, cfg.theta)?;
        let plan = Self::from_set(sp, grid_dims, cfg.target_pixels)?;
        match cfg.shuffle_seed {
            Some(seed) => plan.shuffled(seed),
            None => Ok(plan),
        }
    }

    pub fn from_set(sp: SuperpixelSet, grid_dims: (usize, usize), target_pixels: f64) -> Result<Self> {
        let resized = sp.resized(target_pixels)?;
        let aligned = align_to_patches(&sp, grid_dims.0, grid_dims.1)?;
        Ok(Self {
            original: sp,
            resized,
            aligned,
        })
    }

    /// Applies `perm` (new `j` = current `perm[j]`) consistently to every
    /// view of the superpixels.
    pub fn permuted(&self, perm: &[usize]) -> Result<Self> {
        let original = self.original.permuted(perm)?;
        let resized = self.resized.permuted(perm)?;
        let aligned = align_to_patches(&original, self.aligned.height(), self.aligned.width())?;
        Ok(Self {
            original,
            resized,
            aligned,
        })
    }

    pub fn shuffled(&self, seed: u64) -> Result<Self> {
        let (_, perm) = self.original.shuffled(seed);
        self.permuted(&perm)
    }

    /// Token count.
    pub fn len(&self) -> usize {
        self.aligned.len()
    }

    pub fn is_empty(&self) -> bool {
        self.aligned.is_empty()
    }

    /// Filter-order index of each token's superpixel.
    pub fn token_order(&self) -> Vec<usize> {
        self.aligned
            .kept()
            .iter()
            .map(|&i| self.original.order()[i])
            .collect()
    }
}

/// Differentiable outputs of one forward pass.
#[derive(Clone, Copy, Debug)]
pub struct SvpVars {
    /// `M × d′` tokens.
    pub tokens: Var,
    /// `M × d` SSPE aligned with the tokens; `None` when SSPE is off.
    pub p_sp: Option<Var>,
    /// `M × d` aggregated embeddings before the SSPE addend.
    pub embeddings: Var,
}

/// `T_v = MLP(E + P_sp)` with `E = SSA(N₁(S)·F, F, P_sp, S)`.
///
/// With `use_sspe` off, `P_sp` is zero everywhere it appears; with
/// `use_ssa` off, `E = E′`.
pub fn svp_forward_plan(
    tape: &mut Tape,
    store: &ParamStore,
    params: &SvpParams,
    features: Var,
    plan: &SvpPlan,
) -> Result<SvpVars> {
    let d = params.dim();
    let hw = plan.aligned.labels().len();
    if tape.shape(features) != [hw, d] {
        return Err(Error::shape(format!(
            "patch embeddings {:?}, projector expects {hw}×{d}",
            tape.shape(features)
        )));
    }
    let p_sp = if params.use_sspe {
        let full = params.sspe.forward(tape, store, &plan.original, &plan.resized)?;
        let kept = plan.aligned.kept();
        if kept.len() == plan.original.len() {
            Some(full)
        } else {
            Some(tape.gather_rows(full, kept.to_vec()))
        }
    } else {
        None
    };
    let pooled = pool_superpixels(tape, &plan.aligned, features)?;
    let embeddings = if params.use_ssa {
        ssa_forward(tape, store, &params.ssa, pooled, features, p_sp, &plan.aligned)?
    } else {
        pooled
    };
    let x = match p_sp {
        Some(p) => tape.add(embeddings, p),
        None => embeddings,
    };
    let tokens = mlp_forward(tape, store, &params.proj, x)?;
    if !tape.value(tokens).is_finite() {
        return Err(Error::NonFinite("visual tokens".into()));
    }
    Ok(SvpVars {
        tokens,
        p_sp,
        embeddings,
    })
}

/// Full pipeline from raw inputs to a token sequence.
pub fn svp_forward(
    grid: &PatchGrid,
    cands: &[CandidateMask],
    mask_dims: (usize, usize),
    store: &ParamStore,
    params: &SvpParams,
    cfg: &SvpConfig,
) -> Result<TokenSequence> {
    let plan = SvpPlan::build(cands, mask_dims, (grid.height(), grid.width()), cfg)?;
    let mut tape = Tape::new();
    let f = tape.constant(grid.features().clone());
    let out = svp_forward_plan(&mut tape, store, params, f, &plan)?;
    Ok(TokenSequence {
        tokens: tape.value(out.tokens).clone(),
        order: plan.token_order(),
        stats: TokenStats::new(plan.aligned.areas(), REFERENCE_TOKEN_COUNT),
    })
}

/// Weighted sum of several projector outputs over the same superpixels:
/// `Σ_k w[k]·T_k`, with `w` a learnable vector.
pub fn fuse_outputs(tape: &mut Tape, inputs: &[(Var, &[usize])], weights: Var) -> Result<Var> {
    let Some(&(first, order)) = inputs.first() else {
        return Err(Error::invalid("nothing to fuse"));
    };
    if tape.value(weights).len() != inputs.len() {
        return Err(Error::shape(format!(
            "{} fusion weights for {} sources",
            tape.value(weights).len(),
            inputs.len()
        )));
    }
    let shape = tape.shape(first).to_vec();
    for (k, &(v, o)) in inputs.iter().enumerate() {
        if o != order {
            return Err(Error::invalid(format!("source {k} lists superpixels in another order")));
        }
        if tape.shape(v) != shape.as_slice() {
            return Err(Error::shape(format!("source {k} has shape {:?}", tape.shape(v))));
        }
    }
    let mut acc = tape.scale_by_entry(first, weights, 0);
    for (k, &(v, _)) in inputs.iter().enumerate().skip(1) {
        let term = tape.scale_by_entry(v, weights, k);
        acc = tape.add(acc, term);
    }
    Ok(acc)
}

/// Non-learnable convenience wrapper around [`fuse_outputs`].
pub fn fuse_svp_outputs(seqs: &[TokenSequence], weights: &[f64]) -> Result<TokenSequence> {
    let mut tape = Tape::new();
    let vars: Vec<Var> = seqs.iter().map(|s| tape.constant(s.tokens.clone())).collect();
    let inputs: Vec<(Var, &[usize])> = vars
        .iter()
        .zip(seqs)
        .map(|(&v, s)| (v, s.order.as_slice()))
        .collect();
    let w = tape.constant(DenseArray::from_vec(vec![weights.len()], weights.to_vec())?);
    let fused = fuse_outputs(&mut tape, &inputs, w)?;
    Ok(TokenSequence {
        tokens: tape.value(fused).clone(),
        order: seqs[0].order.clone(),
        stats: seqs[0].stats.clone(),
    })
}

/// Majority-object share of each token's support.
pub fn token_purity(supports: &[Vec<usize>], labels: &[usize]) -> Result<Vec<f64>> {
    let mut counts = std::collections::HashMap::new();
    supports
        .iter()
        .enumerate()
        .map(|(t, sup)| {
            if sup.is_empty() {
                return Err(Error::invalid(format!("token {t} has an empty support")));
            }
            counts.clear();
            for &p in sup {
                let l = *labels
                    .get(p)
                    .ok_or_else(|| Error::shape(format!("patch {p} has no label")))?;
                *counts.entry(l).or_insert(0usize) += 1;
            }
            let best = counts.values().copied().max().unwrap_or(0);
            Ok(best as f64 / sup.len() as f64)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numcore::seeded_rng;
    use crate::sspe::{SspeConfig, SspeEncoderParams};
    use crate::superpixel::{BinaryGrid, Level};

    fn tiny() -> (ParamStore, SvpParams) {
        let mut store = ParamStore::new();
        let mut rng = seeded_rng(4);
        let cfg = SspeConfig {
            model_dim: 8,
            heads: 2,
            queries: 2,
            blocks: 1,
            out_dim: 8,
        };
        let enc = SspeEncoderParams::new(&mut store, &mut rng, "sspe", cfg).unwrap();
        let p = SvpParams::new(&mut store, &mut rng, SspeModel::Attention(enc), 2, SsaMode::ShareSspe, 6)
            .unwrap();
        (store, p)
    }

    fn grid(h: usize, w: usize, d: usize) -> PatchGrid {
        PatchGrid::new(h, w, DenseArray::from_fn(h * w, d, |i, j| ((i * 5 + j * 3) % 7) as f64 * 0.1))
            .unwrap()
    }

    #[test]
    fn single_full_candidate_gives_one_token() {
        let (store, p) = tiny();
        let full = CandidateMask::new(0, Level::Whole, 0.9, BinaryGrid::from_fn(8, 8, |_, _| true))
            .unwrap();
        let cfg = SvpConfig {
            target_pixels: 16.0,
            ..SvpConfig::default()
        };
        let t = svp_forward(&grid(4, 4, 8), &[full], (8, 8), &store, &p, &cfg).unwrap();
        assert_eq!(t.stats.token_count, 1);
        assert!((t.stats.compression - (1.0 - 1.0 / 576.0)).abs() < 1e-15);
        assert_eq!(t.tokens.shape(), &[1, 6]);
    }

    #[test]
    fn ablation_base_with_zero_mlp_gives_zero_tokens() {
        let (mut store, mut p) = tiny();
        p.use_sspe = false;
        p.use_ssa = false;
        for id in [p.proj.first.w, p.proj.second.w] {
            store.value_mut(id).data_mut().fill(0.0);
        }
        let cands = [
            CandidateMask::new(0, Level::Whole, 0.9, BinaryGrid::from_fn(8, 8, |r, _| r < 4)).unwrap(),
        ];
        let cfg = SvpConfig {
            target_pixels: 32.0,
            ..SvpConfig::default()
        };
        let t = svp_forward(&grid(4, 4, 8), &cands, (8, 8), &store, &p, &cfg).unwrap();
        assert_eq!(t.stats.token_count, 2);
        assert_eq!(t.tokens.max_abs(), 0.0);
    }

    #[test]
    fn no_candidates_is_one_residual_token() {
        let (store, p) = tiny();
        let cfg = SvpConfig {
            target_pixels: 16.0,
            ..SvpConfig::default()
        };
        let t = svp_forward(&grid(4, 4, 8), &[], (8, 8), &store, &p, &cfg).unwrap();
        assert_eq!(t.stats.token_count, 1);
    }

    #[test]
    fn fusion_identities() {
        let seq = TokenSequence {
            tokens: DenseArray::from_fn(3, 2, |i, j| (i + 2 * j) as f64 * 0.3),
            order: vec![2, 0, 1],
            stats: TokenStats::new(vec![1, 1, 1], 576),
        };
        assert_eq!(fuse_svp_outputs(std::slice::from_ref(&seq), &[1.0]).unwrap(), seq);
        let two = fuse_svp_outputs(&[seq.clone(), seq.clone()], &[0.5, 0.5]).unwrap();
        assert_eq!(two.tokens, seq.tokens);
        let mut other = seq.clone();
        other.order = vec![0, 1, 2];
        assert!(fuse_svp_outputs(&[seq, other], &[0.5, 0.5]).is_err());
    }

    #[test]
    fn purity_examples() {
        let labels = vec![0, 0, 1, 1];
        assert_eq!(token_purity(&[vec![0, 1, 2, 3]], &labels).unwrap(), vec![0.5]);
        assert_eq!(token_purity(&[vec![0, 1], vec![2, 3]], &labels).unwrap(), vec![1.0, 1.0]);
        assert!(token_purity(&[vec![]], &labels).is_err());
    }
}
