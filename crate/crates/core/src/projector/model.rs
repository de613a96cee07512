//! Projector hyper-parameters and the self-describing model file.
//!
//! ```text
//! SVPMODEL 1
//! key=value          (one per line, sorted by key)
//! end
//! <parameter store>
//! ```

use std::collections::BTreeMap;
use std::fmt;
use std::io::{BufRead, Write};
use std::str::FromStr;

use rand::Rng;

use super::{SvpConfig, SvpParams};
use crate::aggregator::{SsaMode, SsaParams};
use crate::numcore::{Dtype, ParamStore};
use crate::sspe::{BboxMlpParams, MaskMlpParams, SspeConfig, SspeEncoderParams, SspeModel};
use crate::{Error, Result};

pub type KvMap = BTreeMap<String, String>;

const MAGIC: &str = "SVPMODEL 1";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SspeVariant {
    Attention,
    BboxMlp,
    MaskMlp,
    BboxPlusAttention,
}

impl SspeVariant {
    pub fn as_str(self) -> &'static str {
        match self {
            SspeVariant::Attention => "attention",
            SspeVariant::BboxMlp => "bbox_mlp",
            SspeVariant::MaskMlp => "mask_mlp",
            SspeVariant::BboxPlusAttention => "bbox_attention",
        }
    }
}

impl FromStr for SspeVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "attention" => Ok(SspeVariant::Attention),
            "bbox_mlp" => Ok(SspeVariant::BboxMlp),
            "mask_mlp" => Ok(SspeVariant::MaskMlp),
            "bbox_attention" => Ok(SspeVariant::BboxPlusAttention),
            other => Err(Error::invalid(format!("unknown sspe variant {other:?}"))),
        }
    }
}

impl fmt::Display for SspeVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Everything needed to rebuild an [`SvpParams`] layout and run it.
#[derive(Clone, Debug, PartialEq)]
pub struct SvpModelConfig {
    pub dim: usize,
    pub out_dim: usize,
    pub sspe_variant: SspeVariant,
    pub sspe: SspeConfig,
    pub mask_side: usize,
    pub ssa_heads: usize,
    pub ssa_mode: SsaMode,
    pub use_sspe: bool,
    pub use_ssa: bool,
    pub theta: f64,
    pub target_pixels: f64,
}

impl Default for SvpModelConfig {
    /// Desk-scale defaults: `d = 64`, `d′ = 128`, reference SSPE encoder.
    fn default() -> Self {
        Self {
            dim: 64,
            out_dim: 128,
            sspe_variant: SspeVariant::Attention,
            sspe: SspeConfig::default(),
            mask_side: 8,
            ssa_heads: SsaParams::DEFAULT_HEADS,
            ssa_mode: SsaMode::ShareSspe,
            use_sspe: true,
            use_ssa: true,
            theta: crate::superpixel::DEFAULT_OVERLAP_THRESHOLD,
            target_pixels: crate::superpixel::REFERENCE_TARGET_PIXELS,
        }
    }
}

fn parse<T: FromStr>(kv: &KvMap, key: &str) -> Result<Option<T>> {
    match kv.get(key) {
        None => Ok(None),
        Some(v) => v
            .parse()
            .map(Some)
            .map_err(|_| Error::format("model config", key, format!("cannot parse {v:?}"))),
    }
}

impl SvpModelConfig {
    pub fn svp_config(&self) -> SvpConfig {
        SvpConfig {
            theta: self.theta,
            target_pixels: self.target_pixels,
            shuffle_seed: None,
        }
    }

    /// Allocates parameters named `sspe.*`, `sspe_bbox.*`, `ssa.*`, `proj.*`.
    pub fn build(&self, store: &mut ParamStore, rng: &mut impl Rng) -> Result<SvpParams> {
        let sspe_cfg = SspeConfig {
            out_dim: self.dim,
            ..self.sspe
        };
        let sspe = match self.sspe_variant {
            SspeVariant::Attention => {
                SspeModel::Attention(SspeEncoderParams::new(store, rng, "sspe", sspe_cfg)?)
            }
            SspeVariant::BboxMlp => {
                SspeModel::BboxMlp(BboxMlpParams::new(store, rng, "sspe_bbox", self.dim)?)
            }
            SspeVariant::MaskMlp => SspeModel::MaskMlp(MaskMlpParams::new(
                store,
                rng,
                "sspe_mask",
                self.mask_side,
                self.dim,
            )?),
            SspeVariant::BboxPlusAttention => {
                let b = BboxMlpParams::new(store, rng, "sspe_bbox", self.dim)?;
                let a = SspeEncoderParams::new(store, rng, "sspe", sspe_cfg)?;
                SspeModel::BboxPlusAttention(b, a)
            }
        };
        let mut p = SvpParams::new(store, rng, sspe, self.ssa_heads, self.ssa_mode, self.out_dim)?;
        p.use_sspe = self.use_sspe;
        p.use_ssa = self.use_ssa;
        Ok(p)
    }

    pub fn to_kv(&self) -> KvMap {
        let mut kv = KvMap::new();
        let mut put = |k: &str, v: String| {
            kv.insert(k.to_string(), v);
        };
        put("svp.dim", self.dim.to_string());
        put("svp.out_dim", self.out_dim.to_string());
        put("svp.sspe_variant", self.sspe_variant.to_string());
        put("svp.sspe_model_dim", self.sspe.model_dim.to_string());
        put("svp.sspe_heads", self.sspe.heads.to_string());
        put("svp.sspe_queries", self.sspe.queries.to_string());
        put("svp.sspe_blocks", self.sspe.blocks.to_string());
        put("svp.mask_side", self.mask_side.to_string());
        put("svp.ssa_heads", self.ssa_heads.to_string());
        put("svp.ssa_mode", self.ssa_mode.to_string());
        put("svp.use_sspe", self.use_sspe.to_string());
        put("svp.use_ssa", self.use_ssa.to_string());
        put("svp.theta", self.theta.to_string());
        put("svp.target_pixels", self.target_pixels.to_string());
        kv
    }

    /// Reads `svp.*` keys; absent keys keep their defaults.
    pub fn from_kv(kv: &KvMap) -> Result<Self> {
        let mut c = Self::default();
        macro_rules! take {
            ($field:expr, $key:literal) => {
                if let Some(v) = parse(kv, $key)? {
                    $field = v;
                }
            };
        }
        take!(c.dim, "svp.dim");
        take!(c.out_dim, "svp.out_dim");
        take!(c.sspe.model_dim, "svp.sspe_model_dim");
        take!(c.sspe.heads, "svp.sspe_heads");
        take!(c.sspe.queries, "svp.sspe_queries");
        take!(c.sspe.blocks, "svp.sspe_blocks");
        take!(c.mask_side, "svp.mask_side");
        take!(c.ssa_heads, "svp.ssa_heads");
        take!(c.use_sspe, "svp.use_sspe");
        take!(c.use_ssa, "svp.use_ssa");
        take!(c.theta, "svp.theta");
        take!(c.target_pixels, "svp.target_pixels");
        if let Some(v) = kv.get("svp.sspe_variant") {
            c.sspe_variant = v
                .parse()
                .map_err(|e: Error| Error::format("model config", "svp.sspe_variant", e.to_string()))?;
        }
        if let Some(v) = kv.get("svp.ssa_mode") {
            c.ssa_mode = SsaMode::parse(v)
                .map_err(|e| Error::format("model config", "svp.ssa_mode", e.to_string()))?;
        }
        c.sspe.out_dim = c.dim;
        c.validate()?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |k: &str, m: &str| Err(Error::format("model config", k, m));
        if self.dim == 0 || self.dim % 4 != 0 {
            return bad("svp.dim", "must be a positive multiple of 4");
        }
        if self.out_dim == 0 {
            return bad("svp.out_dim", "must be positive");
        }
        if self.ssa_heads == 0 || self.dim % self.ssa_heads != 0 {
            return bad("svp.ssa_heads", "must divide svp.dim");
        }
        if !(self.theta > 0.0 && self.theta < 1.0) {
            return bad("svp.theta", "must lie in (0, 1)");
        }
        if !(self.target_pixels > 0.0 && self.target_pixels.is_finite()) {
            return bad("svp.target_pixels", "must be positive");
        }
        if self.mask_side == 0 {
            return bad("svp.mask_side", "must be positive");
        }
        SspeConfig {
            out_dim: self.dim,
            ..self.sspe
        }
        .validate()
        .map_err(|e| Error::format("model config", "svp.sspe_model_dim", e.to_string()))
    }
}

pub fn write_model_file(w: &mut impl Write, kv: &KvMap, store: &ParamStore, dtype: Dtype) -> Result<()> {
    let mut head = format!("{MAGIC}\n");
    for (k, v) in kv {
        if k.contains('=') || k.contains('\n') || v.contains('\n') {
            return Err(Error::invalid(format!("config entry {k:?} cannot be written")));
        }
        head.push_str(&format!("{k}={v}\n"));
    }
    head.push_str("end\n");
    w.write_all(head.as_bytes())?;
    store.write_to(w, dtype)
}

pub fn read_model_file(r: &mut impl BufRead) -> Result<(KvMap, ParamStore, Dtype)> {
    let ctx = "model file";
    let mut line = String::new();
    r.read_line(&mut line)?;
    if line.trim_end_matches('\n') != MAGIC {
        return Err(Error::format(ctx, "magic", format!("got {:?}", line.trim_end())));
    }
    let mut kv = KvMap::new();
    loop {
        line.clear();
        if r.read_line(&mut line)? == 0 {
            return Err(Error::format(ctx, "end", "missing config terminator"));
        }
        let l = line.trim_end_matches('\n');
        if l == "end" {
            break;
        }
        let (k, v) = l
            .split_once('=')
            .ok_or_else(|| Error::format(ctx, "config", format!("line {l:?} is not key=value")))?;
        kv.insert(k.to_string(), v.to_string());
    }
    let (store, dtype) = ParamStore::read_from(r)?;
    Ok((kv, store, dtype))
}

/// Rebuilds the parameter layout described by the `svp.*` keys and fills
/// it from `stored`, which must provide every entry.
pub fn load_svp(kv: &KvMap, stored: &ParamStore) -> Result<(SvpModelConfig, ParamStore, SvpParams)> {
    let cfg = SvpModelConfig::from_kv(kv)?;
    let mut store = ParamStore::new();
    let params = cfg.build(&mut store, &mut crate::numcore::seeded_rng(0))?;
    let loaded = store.load_values_from(stored)?;
    if loaded != store.len() {
        let missing = store
            .entries()
            .iter()
            .find(|e| stored.id_of(&e.name).is_none())
            .map(|e| e.name.clone())
            .unwrap_or_default();
        return Err(Error::format("model file", missing, "parameter missing from file"));
    }
    Ok((cfg, store, params))
}
