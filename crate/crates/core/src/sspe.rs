//! Per-superpixel positional embeddings.
//!
//! The attention encoder reads each superpixel's binary mask as a key/value
//! sequence (mask-value embedding plus a 2D sinusoidal key embedding) and
//! summarises it with a small set of shared learnable queries. Two MLP
//! variants embed the bounding box or a fixed-size resampled mask instead.

use rand::Rng;

use crate::numcore::{
    mha_forward, mlp_forward, new_blocks, sinusoidal_pe_2d, AttentionConfig, AttnMask,
    BlockParams, DenseArray, LinearParams, MlpParams, ParamId, ParamStore, Tape, Var,
};
use crate::superpixel::{BinaryGrid, SuperpixelSet};
use crate::{Error, Result};

/// Shape of the attention encoder.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SspeConfig {
    pub model_dim: usize,
    pub heads: usize,
    pub queries: usize,
    pub blocks: usize,
    /// Width of the produced embedding (the pipeline's `d`).
    pub out_dim: usize,
}

impl Default for SspeConfig {
    fn default() -> Self {
        Self {
            model_dim: 128,
            heads: 8,
            queries: 4,
            blocks: 3,
            out_dim: 64,
        }
    }
}

impl SspeConfig {
    pub fn attention(&self) -> Result<AttentionConfig> {
        AttentionConfig::new(self.model_dim, self.heads)
    }

    pub fn validate(&self) -> Result<()> {
        self.attention()?;
        if self.queries == 0 || self.out_dim == 0 {
            return Err(Error::invalid("sspe needs at least one query and a positive width"));
        }
        if self.model_dim % 4 != 0 {
            return Err(Error::invalid("sspe model dim must be a multiple of 4"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct SspeEncoderParams {
    pub cfg: SspeConfig,
    pub attn: AttentionConfig,
    /// Embedding table for mask values 0 and 1, `2 × d_m`.
    pub value_embed: ParamId,
    /// `N × d_m`.
    pub queries: ParamId,
    /// `N × d_m`.
    pub query_pe: ParamId,
    pub blocks: Vec<BlockParams>,
    /// `N·d_m → d`, no bias.
    pub out: LinearParams,
}

impl SspeEncoderParams {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut impl Rng,
        name: &str,
        cfg: SspeConfig,
    ) -> Result<Self> {
        cfg.validate()?;
        let attn = cfg.attention()?;
        let dm = cfg.model_dim;
        let n = cfg.queries;
        let value_embed = store.add_xavier(&format!("{name}.value_embed"), &[2, dm], 2, dm, rng)?;
        let queries = store.add_xavier(&format!("{name}.queries"), &[n, dm], n, dm, rng)?;
        let query_pe = store.add_xavier(&format!("{name}.query_pe"), &[n, dm], n, dm, rng)?;
        let blocks = new_blocks(store, rng, &format!("{name}.block"), &attn, cfg.blocks)?;
        let out = LinearParams::new(store, rng, &format!("{name}.out"), n * dm, cfg.out_dim, false)?;
        Ok(Self {
            cfg,
            attn,
            value_embed,
            queries,
            query_pe,
            blocks,
            out,
        })
    }
}

/// SSPE rows for the superpixels of `sp`, in their current order (`M × d`).
pub fn encode_sspe(
    tape: &mut Tape,
    store: &ParamStore,
    params: &SspeEncoderParams,
    sp: &SuperpixelSet,
) -> Result<Var> {
    let (h, w) = sp.dims();
    let hw = h * w;
    let mut idx = Vec::with_capacity(sp.len() * hw);
    for i in 0..sp.len() {
        idx.extend(sp.labels().iter().map(|&l| usize::from(l as usize == i)));
    }
    encode_value_indices(tape, store, params, idx, sp.len(), h, w)
}

/// Encodes arbitrary masks sharing one grid, one output row per mask.
pub fn encode_masks(
    tape: &mut Tape,
    store: &ParamStore,
    params: &SspeEncoderParams,
    masks: &[BinaryGrid],
) -> Result<Var> {
    let Some(first) = masks.first() else {
        return Err(Error::invalid("no masks to encode"));
    };
    let (h, w) = first.dims();
    let mut idx = Vec::with_capacity(masks.len() * h * w);
    for m in masks {
        if m.dims() != (h, w) {
            return Err(Error::shape(format!(
                "mask dims {:?} differ from {h}×{w}",
                m.dims()
            )));
        }
        idx.extend(m.data().iter().map(|&b| usize::from(b)));
    }
    encode_value_indices(tape, store, params, idx, masks.len(), h, w)
}

/// Core of the encoder. `idx` holds `M` row-major `h × w` masks as 0/1.
///
/// All superpixels run through the blocks together, but attention is
/// grouped so superpixel `i`'s queries only ever see superpixel `i`'s keys
/// and each other.
fn encode_value_indices(
    tape: &mut Tape,
    store: &ParamStore,
    params: &SspeEncoderParams,
    idx: Vec<usize>,
    m: usize,
    h: usize,
    w: usize,
) -> Result<Var> {
    let cfg = &params.cfg;
    let (dm, n) = (cfg.model_dim, cfg.queries);
    let hw = h * w;
    if hw == 0 || m == 0 {
        return Err(Error::invalid("empty mask grid"));
    }
    check_param(store, params.value_embed, &[2, dm], "value embedding")?;
    check_param(store, params.queries, &[n, dm], "sspe queries")?;
    check_param(store, params.query_pe, &[n, dm], "sspe query embeddings")?;

    let pe = tape.constant(sinusoidal_pe_2d(h, w, dm)?);
    let table = tape.param(store, params.value_embed);
    let q_rows: Vec<usize> = (0..m).flat_map(|_| 0..n).collect();
    let queries = tape.param(store, params.queries);
    let mut x = tape.gather_rows(queries, q_rows.clone());
    let qpe = tape.param(store, params.query_pe);
    let q_pe = tape.gather_rows(qpe, q_rows);
    let tile: Vec<usize> = (0..m).flat_map(|_| 0..hw).collect();

    let attn = &params.attn;
    let eps = attn.ln_eps;
    for b in &params.blocks {
        // Cross-attention over the mask. The key input is value_embed[v] +
        // pe[p], so its projection splits into a 2-row table and an hw-row
        // table shared by every superpixel.
        let ln = b.ln_cross.forward(tape, store, x, eps);
        let q_in = tape.add(ln, q_pe);
        let qp = b.cross.q.forward(tape, store, q_in);
        let wk = tape.param(store, b.cross.k.w);
        let k_tab = tape.matmul(table, wk);
        let k_pos = b.cross.k.forward(tape, store, pe);
        let k_val = tape.gather_rows(k_tab, idx.clone());
        let k_pos = tape.gather_rows(k_pos, tile.clone());
        let kp = tape.add(k_val, k_pos);
        let v_tab = b.cross.v.forward(tape, store, table);
        let vp = tape.gather_rows(v_tab, idx.clone());
        let att = tape.attention(qp, kp, vp, attn.heads, m, None);
        let c = b.cross.o.forward(tape, store, att);
        x = tape.add(x, c);

        let ln = b.ln_self.forward(tape, store, x, eps);
        let s = mha_forward(
            tape,
            store,
            &b.self_attn,
            attn,
            ln,
            ln,
            ln,
            Some(q_pe),
            Some(q_pe),
            AttnMask::Grouped(m),
        )?;
        x = tape.add(x, s);
        let ln = b.ln_ffn.forward(tape, store, x, eps);
        let f = mlp_forward(tape, store, &b.ffn, ln)?;
        x = tape.add(x, f);
    }
    let flat = tape.reshape(x, &[m, n * dm]);
    let out = params.out.forward(tape, store, flat);
    if !tape.value(out).is_finite() {
        return Err(Error::NonFinite("sspe output".into()));
    }
    Ok(out)
}

fn check_param(store: &ParamStore, id: ParamId, shape: &[usize], what: &str) -> Result<()> {
    let s = store.value(id).shape();
    if s != shape {
        return Err(Error::shape(format!("{what}: expected {shape:?}, got {s:?}")));
    }
    Ok(())
}

/// Bounding-box variant: `(row_min, col_min, row_max, col_max)` → MLP.
#[derive(Clone, Debug)]
pub struct BboxMlpParams {
    pub mlp: MlpParams,
}

impl BboxMlpParams {
    pub const HIDDEN: usize = 32;

    pub fn new(store: &mut ParamStore, rng: &mut impl Rng, name: &str, d: usize) -> Result<Self> {
        Ok(Self {
            mlp: MlpParams::new(store, rng, name, [4, Self::HIDDEN, d])?,
        })
    }
}

/// Normalised boxes of every superpixel, in set order.
pub fn normalized_bboxes(sp: &SuperpixelSet) -> Result<Vec<[f64; 4]>> {
    (0..sp.len())
        .map(|i| Ok(sp.bbox_of(i)?.normalized(sp.height(), sp.width())))
        .collect()
}

pub fn bbox_mlp_sspe(
    tape: &mut Tape,
    store: &ParamStore,
    params: &BboxMlpParams,
    boxes: &[[f64; 4]],
) -> Result<Var> {
    if boxes.is_empty() {
        return Err(Error::invalid("no boxes to encode"));
    }
    for (i, b) in boxes.iter().enumerate() {
        let in_range = b.iter().all(|v| (0.0..=1.0).contains(v));
        if !in_range || b[0] > b[2] || b[1] > b[3] {
            return Err(Error::invalid(format!("box {i} {b:?} is not normalised")));
        }
    }
    let data = boxes.iter().flatten().copied().collect();
    let x = tape.constant(DenseArray::from_vec(vec![boxes.len(), 4], data)?);
    mlp_forward(tape, store, &params.mlp, x)
}

/// Resampled-mask variant: each mask resized to `side × side`, flattened
/// and fed to an MLP.
#[derive(Clone, Debug)]
pub struct MaskMlpParams {
    pub side: usize,
    pub mlp: MlpParams,
}

impl MaskMlpParams {
    pub const HIDDEN: usize = 32;

    pub fn new(
        store: &mut ParamStore,
        rng: &mut impl Rng,
        name: &str,
        side: usize,
        d: usize,
    ) -> Result<Self> {
        if side == 0 {
            return Err(Error::invalid("mask side must be at least 1"));
        }
        Ok(Self {
            side,
            mlp: MlpParams::new(store, rng, name, [side * side, Self::HIDDEN, d])?,
        })
    }
}

pub fn mask_mlp_sspe(
    tape: &mut Tape,
    store: &ParamStore,
    params: &MaskMlpParams,
    sp: &SuperpixelSet,
) -> Result<Var> {
    let s = params.side;
    let mut data = Vec::with_capacity(sp.len() * s * s);
    for i in 0..sp.len() {
        let m = sp.mask(i)?.resize_nearest(s, s);
        data.extend(m.data().iter().map(|&b| if b { 1.0 } else { 0.0 }));
    }
    let x = tape.constant(DenseArray::from_vec(vec![sp.len(), s * s], data)?);
    mlp_forward(tape, store, &params.mlp, x)
}

/// Any of the embedding variants, including the sum of the box and
/// attention encoders.
#[derive(Clone, Debug)]
pub enum SspeModel {
    Attention(SspeEncoderParams),
    BboxMlp(BboxMlpParams),
    MaskMlp(MaskMlpParams),
    BboxPlusAttention(BboxMlpParams, SspeEncoderParams),
}

impl SspeModel {
    pub fn out_dim(&self) -> usize {
        match self {
            SspeModel::Attention(p) | SspeModel::BboxPlusAttention(_, p) => p.cfg.out_dim,
            SspeModel::BboxMlp(p) => p.mlp.dims()[2],
            SspeModel::MaskMlp(p) => p.mlp.dims()[2],
        }
    }

    /// `M × d` embeddings. The attention encoder reads `resized`; the MLP
    /// variants read `original` (both must list the same superpixels).
    pub fn forward(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        original: &SuperpixelSet,
        resized: &SuperpixelSet,
    ) -> Result<Var> {
        if original.len() != resized.len() {
            return Err(Error::shape("original and resized sets differ in M"));
        }
        match self {
            SspeModel::Attention(p) => encode_sspe(tape, store, p, resized),
            SspeModel::BboxMlp(p) => bbox_mlp_sspe(tape, store, p, &normalized_bboxes(original)?),
            SspeModel::MaskMlp(p) => mask_mlp_sspe(tape, store, p, original),
            SspeModel::BboxPlusAttention(b, a) => {
                let x = bbox_mlp_sspe(tape, store, b, &normalized_bboxes(original)?)?;
                let y = encode_sspe(tape, store, a, resized)?;
                Ok(tape.add(x, y))
            }
        }
    }
}
