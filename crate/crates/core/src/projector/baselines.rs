//! Fixed-budget comparators: pixel-shuffle, adaptive average pooling and a
//! global learnable-query resampler.

use rand::Rng;

use crate::numcore::{
    block_stack, mlp_forward, new_blocks, sinusoidal_pe_2d, AttentionConfig, AttnMask,
    BlockParams, DenseArray, MlpParams, ParamId, ParamStore, Tape, Var,
};
use crate::{Error, Result};

fn require_field(tape: &Tape, f: Var, h: usize, w: usize) -> Result<usize> {
    let s = tape.shape(f);
    if s.len() != 2 || s[0] != h * w {
        return Err(Error::shape(format!("patch field {s:?} for a {h}×{w} grid")));
    }
    Ok(s[1])
}

/// Patch indices of each `r × r` window, windows in row-major order and
/// patches within a window in row-major order.
pub fn pixel_shuffle_windows(h: usize, w: usize, r: usize) -> Result<Vec<Vec<usize>>> {
    if r == 0 || h % r != 0 || w % r != 0 {
        return Err(Error::invalid(format!("shuffle factor {r} does not divide {h}×{w}")));
    }
    let mut out = Vec::with_capacity(h * w / (r * r));
    for wy in 0..h / r {
        for wx in 0..w / r {
            let mut win = Vec::with_capacity(r * r);
            for dy in 0..r {
                for dx in 0..r {
                    win.push((wy * r + dy) * w + wx * r + dx);
                }
            }
            out.push(win);
        }
    }
    Ok(out)
}

/// Space-to-depth: each `r × r` window becomes one `r²·d` row (channel
/// `(dy·r + dx)·d + c`), then the MLP maps it to `d′`.
#[allow(clippy::too_many_arguments)]
pub fn pixel_shuffle_tokens(
    tape: &mut Tape,
    store: &ParamStore,
    f: Var,
    h: usize,
    w: usize,
    r: usize,
    mlp: &MlpParams,
) -> Result<Var> {
    let d = require_field(tape, f, h, w)?;
    let windows = pixel_shuffle_windows(h, w, r)?;
    let width = r * r * d;
    let mut idx = Vec::with_capacity(windows.len() * width);
    for win in &windows {
        for &p in win {
            idx.extend((0..d).map(|c| p * d + c));
        }
    }
    let stacked = tape.gather_elems(f, idx, &[windows.len(), width]);
    mlp_forward(tape, store, mlp, stacked)
}

/// Adaptive pooling windows: output cell `i` spans
/// `[⌊i·H/out⌋, ⌈(i+1)·H/out⌉)` along each axis.
pub fn avg_pool_windows(h: usize, w: usize, out_h: usize, out_w: usize) -> Result<Vec<Vec<usize>>> {
    if out_h == 0 || out_w == 0 {
        return Err(Error::invalid("pooled grid has zero size"));
    }
    if out_h > h || out_w > w {
        return Err(Error::invalid(format!(
            "cannot pool {h}×{w} up to {out_h}×{out_w}"
        )));
    }
    let span = |i: usize, n: usize, out: usize| (i * n / out, ((i + 1) * n).div_ceil(out));
    let mut wins = Vec::with_capacity(out_h * out_w);
    for i in 0..out_h {
        let (r0, r1) = span(i, h, out_h);
        for j in 0..out_w {
            let (c0, c1) = span(j, w, out_w);
            wins.push((r0..r1).flat_map(|r| (c0..c1).map(move |c| r * w + c)).collect());
        }
    }
    Ok(wins)
}

#[allow(clippy::too_many_arguments)]
pub fn avg_pool_tokens(
    tape: &mut Tape,
    store: &ParamStore,
    f: Var,
    h: usize,
    w: usize,
    out_h: usize,
    out_w: usize,
    mlp: &MlpParams,
) -> Result<Var> {
    require_field(tape, f, h, w)?;
    let wins = avg_pool_windows(h, w, out_h, out_w)?;
    let mut pool = DenseArray::zeros(&[wins.len(), h * w]);
    for (t, win) in wins.iter().enumerate() {
        let share = 1.0 / win.len() as f64;
        for &p in win {
            pool.set(t, p, share);
        }
    }
    let pooled = tape.left_mul_const(pool, f);
    mlp_forward(tape, store, mlp, pooled)
}

/// A fixed set of `K` learnable queries resampling the whole grid.
#[derive(Clone, Debug)]
pub struct GlobalQueryParams {
    pub queries: ParamId,
    pub cfg: AttentionConfig,
    pub blocks: Vec<BlockParams>,
    pub mlp: MlpParams,
}

impl GlobalQueryParams {
    pub const BLOCKS: usize = 3;

    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        rng: &mut impl Rng,
        name: &str,
        k: usize,
        d: usize,
        heads: usize,
        d_out: usize,
    ) -> Result<Self> {
        if k == 0 {
            return Err(Error::invalid("global resampler needs at least one query"));
        }
        let cfg = AttentionConfig::new(d, heads)?;
        let queries = store.add_xavier(&format!("{name}.queries"), &[k, d], k, d, rng)?;
        let blocks = new_blocks(store, rng, &format!("{name}.block"), &cfg, Self::BLOCKS)?;
        let mlp = MlpParams::new(store, rng, &format!("{name}.proj"), [d, 4 * d, d_out])?;
        Ok(Self {
            queries,
            cfg,
            blocks,
            mlp,
        })
    }

    pub fn num_queries(&self, store: &ParamStore) -> usize {
        store.value(self.queries).rows()
    }
}

/// `K` tokens regardless of content: queries cross-attend to `F` (grid PE
/// on the keys only), then the MLP.
pub fn global_query_tokens(
    tape: &mut Tape,
    store: &ParamStore,
    params: &GlobalQueryParams,
    f: Var,
    h: usize,
    w: usize,
) -> Result<Var> {
    let d = require_field(tape, f, h, w)?;
    if d != params.cfg.model_dim {
        return Err(Error::shape(format!(
            "patch width {d} differs from resampler width {}",
            params.cfg.model_dim
        )));
    }
    let pe = tape.constant(sinusoidal_pe_2d(h, w, d)?);
    let q = tape.param(store, params.queries);
    let x = block_stack(
        tape,
        store,
        &params.blocks,
        &params.cfg,
        q,
        None,
        f,
        Some(pe),
        AttnMask::Full,
        AttnMask::Full,
    )?;
    mlp_forward(tape, store, &params.mlp, x)
}
