use rand::Rng;

use super::array::DenseArray;
use super::params::{ParamId, ParamStore};
use super::tape::{Tape, Var};
use crate::{Error, Result};

/// Width and head layout of one attention stack.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AttentionConfig {
    pub model_dim: usize,
    pub heads: usize,
    /// FFN hidden width as a multiple of `model_dim`.
    pub ffn_mult: usize,
    pub ln_eps: f64,
}

impl AttentionConfig {
    pub fn new(model_dim: usize, heads: usize) -> Result<Self> {
        let cfg = Self {
            model_dim,
            heads,
            ffn_mult: 4,
            ln_eps: 1e-5,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.heads == 0 || self.model_dim == 0 || self.model_dim % self.heads != 0 {
            return Err(Error::invalid(format!(
                "model dim {} not divisible by {} heads",
                self.model_dim, self.heads
            )));
        }
        if !(self.ln_eps > 0.0) {
            return Err(Error::invalid("layer-norm epsilon must be positive"));
        }
        if self.ffn_mult == 0 {
            return Err(Error::invalid("ffn multiplier must be positive"));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.model_dim / self.heads
    }
}

/// Affine map `x·W + b` with `W` stored `[d_in, d_out]`.
#[derive(Clone, Debug)]
pub struct LinearParams {
    pub w: ParamId,
    pub b: Option<ParamId>,
    pub d_in: usize,
    pub d_out: usize,
}

impl LinearParams {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut impl Rng,
        name: &str,
        d_in: usize,
        d_out: usize,
        bias: bool,
    ) -> Result<Self> {
        let w = store.add_xavier(&format!("{name}.w"), &[d_in, d_out], d_in, d_out, rng)?;
        let b = if bias {
            Some(store.add_zeros(&format!("{name}.b"), &[d_out])?)
        } else {
            None
        };
        Ok(Self { w, b, d_in, d_out })
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Var {
        let w = tape.param(store, self.w);
        let y = tape.matmul(x, w);
        match self.b {
            Some(b) => {
                let b = tape.param(store, b);
                tape.add_row(y, b)
            }
            None => y,
        }
    }
}

#[derive(Clone, Debug)]
pub struct LayerNormParams {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNormParams {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize) -> Result<Self> {
        Ok(Self {
            gamma: store.add_full(&format!("{name}.gamma"), &[dim], 1.0)?,
            beta: store.add_zeros(&format!("{name}.beta"), &[dim])?,
        })
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var, eps: f64) -> Var {
        let g = tape.param(store, self.gamma);
        let b = tape.param(store, self.beta);
        tape.layer_norm(x, g, b, eps)
    }
}

#[derive(Clone, Debug)]
pub struct MhaParams {
    pub q: LinearParams,
    pub k: LinearParams,
    pub v: LinearParams,
    pub o: LinearParams,
}

impl MhaParams {
    pub fn new(store: &mut ParamStore, rng: &mut impl Rng, name: &str, d: usize) -> Result<Self> {
        Ok(Self {
            q: LinearParams::new(store, rng, &format!("{name}.q"), d, d, true)?,
            // A key bias only shifts each query's logits by a constant, which
            // softmax ignores; it would be a parameter with zero gradient.
            k: LinearParams::new(store, rng, &format!("{name}.k"), d, d, false)?,
            v: LinearParams::new(store, rng, &format!("{name}.v"), d, d, true)?,
            o: LinearParams::new(store, rng, &format!("{name}.o"), d, d, true)?,
        })
    }
}

/// Which keys each query may see.
#[derive(Clone, Copy, Debug)]
pub enum AttnMask<'a> {
    /// Every query attends to every key.
    Full,
    /// Rows split into this many equal blocks; block `g` of the queries sees
    /// only block `g` of the keys.
    Grouped(usize),
    /// Additive logit bias, one row per query and one column per key.
    Bias(&'a DenseArray),
}

impl AttnMask<'_> {
    fn groups(&self) -> usize {
        match self {
            AttnMask::Grouped(g) => *g,
            _ => 1,
        }
    }
}

fn require_finite(tape: &Tape, v: Var, what: &str) -> Result<()> {
    if tape.value(v).is_finite() {
        Ok(())
    } else {
        Err(Error::NonFinite(what.to_string()))
    }
}

fn require_shape(tape: &Tape, v: Var, rows: usize, cols: usize, what: &str) -> Result<()> {
    let a = tape.value(v);
    if a.shape().len() == 2 && a.rows() == rows && a.cols() == cols {
        Ok(())
    } else {
        Err(Error::shape(format!(
            "{what}: expected {rows}×{cols}, got {:?}",
            a.shape()
        )))
    }
}

/// Multi-head attention with positional embeddings added to the query and
/// key inputs (never to the values).
///
/// `softmax(W_q(q+q_pe) · (W_k(k+k_pe))ᵀ / √head_dim + bias) · W_v v`, heads
/// concatenated, then output-projected. A `None` embedding means zero.
#[allow(clippy::too_many_arguments)]
pub fn mha_forward(
    tape: &mut Tape,
    store: &ParamStore,
    params: &MhaParams,
    cfg: &AttentionConfig,
    q: Var,
    k: Var,
    v: Var,
    q_pe: Option<Var>,
    k_pe: Option<Var>,
    mask: AttnMask<'_>,
) -> Result<Var> {
    let d = cfg.model_dim;
    let lq = tape.value(q).rows();
    let lk = tape.value(k).rows();
    require_shape(tape, q, lq, d, "attention query")?;
    require_shape(tape, k, lk, d, "attention key")?;
    require_shape(tape, v, lk, d, "attention value")?;
    for (x, what) in [(q, "attention query"), (k, "attention key"), (v, "attention value")] {
        require_finite(tape, x, what)?;
    }
    if let Some(p) = q_pe {
        require_shape(tape, p, lq, d, "query positional embedding")?;
        require_finite(tape, p, "query positional embedding")?;
    }
    if let Some(p) = k_pe {
        require_shape(tape, p, lk, d, "key positional embedding")?;
        require_finite(tape, p, "key positional embedding")?;
    }
    let groups = mask.groups();
    if lq % groups != 0 || lk % groups != 0 {
        return Err(Error::shape(format!(
            "{lq} queries / {lk} keys not divisible into {groups} groups"
        )));
    }
    let bias = match mask {
        AttnMask::Bias(b) => {
            if b.shape() != [lq, lk] {
                return Err(Error::shape(format!(
                    "attention bias: expected {lq}×{lk}, got {:?}",
                    b.shape()
                )));
            }
            Some(b)
        }
        _ => None,
    };

    let q_in = match q_pe {
        Some(p) => tape.add(q, p),
        None => q,
    };
    let k_in = match k_pe {
        Some(p) => tape.add(k, p),
        None => k,
    };
    let qp = params.q.forward(tape, store, q_in);
    let kp = params.k.forward(tape, store, k_in);
    let vp = params.v.forward(tape, store, v);
    let att = tape.attention(qp, kp, vp, cfg.heads, groups, bias);
    Ok(params.o.forward(tape, store, att))
}

/// Position-wise feed-forward `Linear → GELU → Linear`.
#[derive(Clone, Debug)]
pub struct MlpParams {
    pub first: LinearParams,
    pub second: LinearParams,
}

impl MlpParams {
    /// `dims = [d_in, d_hidden, d_out]`.
    pub fn new(
        store: &mut ParamStore,
        rng: &mut impl Rng,
        name: &str,
        dims: [usize; 3],
    ) -> Result<Self> {
        Ok(Self {
            first: LinearParams::new(store, rng, &format!("{name}.fc1"), dims[0], dims[1], true)?,
            second: LinearParams::new(store, rng, &format!("{name}.fc2"), dims[1], dims[2], true)?,
        })
    }

    pub fn dims(&self) -> [usize; 3] {
        [self.first.d_in, self.first.d_out, self.second.d_out]
    }
}

pub fn mlp_forward(tape: &mut Tape, store: &ParamStore, params: &MlpParams, x: Var) -> Result<Var> {
    let [d_in, hidden, _] = params.dims();
    let rows = tape.value(x).rows();
    require_shape(tape, x, rows, d_in, "mlp input")?;
    require_finite(tape, x, "mlp input")?;
    if params.second.d_in != hidden {
        return Err(Error::shape("mlp hidden widths disagree"));
    }
    let h = params.first.forward(tape, store, x);
    let h = tape.gelu(h);
    Ok(params.second.forward(tape, store, h))
}

/// One cross-attention → self-attention → FFN block, pre-normalized.
#[derive(Clone, Debug)]
pub struct BlockParams {
    pub ln_cross: LayerNormParams,
    pub cross: MhaParams,
    pub ln_self: LayerNormParams,
    pub self_attn: MhaParams,
    pub ln_ffn: LayerNormParams,
    pub ffn: MlpParams,
}

impl BlockParams {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut impl Rng,
        name: &str,
        cfg: &AttentionConfig,
    ) -> Result<Self> {
        let d = cfg.model_dim;
        Ok(Self {
            ln_cross: LayerNormParams::new(store, &format!("{name}.ln_cross"), d)?,
            cross: MhaParams::new(store, rng, &format!("{name}.cross"), d)?,
            ln_self: LayerNormParams::new(store, &format!("{name}.ln_self"), d)?,
            self_attn: MhaParams::new(store, rng, &format!("{name}.self"), d)?,
            ln_ffn: LayerNormParams::new(store, &format!("{name}.ln_ffn"), d)?,
            ffn: MlpParams::new(store, rng, &format!("{name}.ffn"), [d, d * cfg.ffn_mult, d])?,
        })
    }
}

/// Builds `count` blocks named `{name}.{i}`.
pub fn new_blocks(
    store: &mut ParamStore,
    rng: &mut impl Rng,
    name: &str,
    cfg: &AttentionConfig,
    count: usize,
) -> Result<Vec<BlockParams>> {
    (0..count)
        .map(|i| BlockParams::new(store, rng, &format!("{name}.{i}"), cfg))
        .collect()
}

/// Applies one block to `queries`.
///
/// ```text
/// x ← x + CrossAttn(LN(x) + q_pe, kv + kv_pe, kv)
/// x ← x + SelfAttn(LN(x) + q_pe, LN(x) + q_pe, LN(x))
/// x ← x + FFN(LN(x))
/// ```
#[allow(clippy::too_many_arguments)]
pub fn transformer_block(
    tape: &mut Tape,
    store: &ParamStore,
    params: &BlockParams,
    cfg: &AttentionConfig,
    queries: Var,
    q_pe: Option<Var>,
    kv: Var,
    kv_pe: Option<Var>,
    cross_mask: AttnMask<'_>,
    self_mask: AttnMask<'_>,
) -> Result<Var> {
    let eps = cfg.ln_eps;
    require_finite(tape, queries, "block queries")?;

    let h = params.ln_cross.forward(tape, store, queries, eps);
    let c = mha_forward(tape, store, &params.cross, cfg, h, kv, kv, q_pe, kv_pe, cross_mask)?;
    let x = tape.add(queries, c);

    let h = params.ln_self.forward(tape, store, x, eps);
    let s = mha_forward(tape, store, &params.self_attn, cfg, h, h, h, q_pe, q_pe, self_mask)?;
    let x = tape.add(x, s);

    let h = params.ln_ffn.forward(tape, store, x, eps);
    let f = mlp_forward(tape, store, &params.ffn, h)?;
    Ok(tape.add(x, f))
}

/// Runs a block stack with the same masks and embeddings at every block.
#[allow(clippy::too_many_arguments)]
pub fn block_stack(
    tape: &mut Tape,
    store: &ParamStore,
    blocks: &[BlockParams],
    cfg: &AttentionConfig,
    mut queries: Var,
    q_pe: Option<Var>,
    kv: Var,
    kv_pe: Option<Var>,
    cross_mask: AttnMask<'_>,
    self_mask: AttnMask<'_>,
) -> Result<Var> {
    for b in blocks {
        queries = transformer_block(
            tape, store, b, cfg, queries, q_pe, kv, kv_pe, cross_mask, self_mask,
        )?;
    }
    Ok(queries)
}
