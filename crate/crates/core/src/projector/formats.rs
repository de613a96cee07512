//! Binary embedding (`SVPE`) and token (`SVPT`) files.
//!
//! Both start with a 4-byte magic, a little-endian `u32` version and `u32`
//! extents, a `u8` dtype code (0 = f32, 1 = f64), and a row-major payload.
//! Token files then carry a `key=value` stats block.

use std::io::{Read, Write};

use super::{TokenSequence, TokenStats};
use crate::aggregator::PatchGrid;
use crate::numcore::{read_payload, write_payload, DenseArray, Dtype};
use crate::{Error, Result};

const EMBED_MAGIC: &[u8; 4] = b"SVPE";
const TOKEN_MAGIC: &[u8; 4] = b"SVPT";
const VERSION: u32 = 1;

fn read_u32(r: &mut impl Read, ctx: &str, field: &str) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)
        .map_err(|_| Error::format(ctx, field, "file ends early"))?;
    Ok(u32::from_le_bytes(b))
}

fn read_header(r: &mut impl Read, magic: &[u8; 4], ctx: &str) -> Result<()> {
    let mut m = [0u8; 4];
    r.read_exact(&mut m)
        .map_err(|_| Error::format(ctx, "magic", "file ends early"))?;
    if &m != magic {
        return Err(Error::format(ctx, "magic", format!("expected {:?}", std::str::from_utf8(magic).unwrap())));
    }
    let v = read_u32(r, ctx, "version")?;
    if v != VERSION {
        return Err(Error::format(ctx, "version", format!("unsupported version {v}")));
    }
    Ok(())
}

fn read_dtype(r: &mut impl Read, ctx: &str) -> Result<Dtype> {
    let mut b = [0u8; 1];
    r.read_exact(&mut b)
        .map_err(|_| Error::format(ctx, "dtype", "file ends early"))?;
    Dtype::from_code(b[0]).ok_or_else(|| Error::format(ctx, "dtype", format!("unknown code {}", b[0])))
}

fn read_values(r: &mut impl Read, n: usize, dtype: Dtype, ctx: &str) -> Result<Vec<f64>> {
    let data = read_payload(r, n, dtype).map_err(|e| match e {
        Error::Io(_) => Error::format(ctx, "payload", format!("expected {n} values")),
        other => other,
    })?;
    if data.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite(format!("{ctx} payload")));
    }
    Ok(data)
}

fn to_u32(x: usize, field: &str) -> Result<u32> {
    u32::try_from(x).map_err(|_| Error::invalid(format!("{field} {x} exceeds u32")))
}

pub fn write_embeddings(w: &mut impl Write, grid: &PatchGrid, dtype: Dtype) -> Result<()> {
    let mut head = Vec::with_capacity(21);
    head.extend_from_slice(EMBED_MAGIC);
    for x in [
        VERSION,
        to_u32(grid.height(), "height")?,
        to_u32(grid.width(), "width")?,
        to_u32(grid.dim(), "dim")?,
    ] {
        head.extend_from_slice(&x.to_le_bytes());
    }
    head.push(dtype.code());
    w.write_all(&head)?;
    write_payload(w, grid.features().data(), dtype)
}

pub fn read_embeddings(r: &mut impl Read) -> Result<(PatchGrid, Dtype)> {
    let ctx = "embedding file";
    read_header(r, EMBED_MAGIC, ctx)?;
    let h = read_u32(r, ctx, "height")? as usize;
    let w = read_u32(r, ctx, "width")? as usize;
    let d = read_u32(r, ctx, "dim")? as usize;
    if h * w == 0 || d == 0 {
        return Err(Error::format(ctx, "height", "grid and channel extents must be positive"));
    }
    let dtype = read_dtype(r, ctx)?;
    let data = read_values(r, h * w * d, dtype, ctx)?;
    let mut rest = Vec::new();
    r.read_to_end(&mut rest)?;
    if !rest.is_empty() {
        return Err(Error::format(ctx, "payload", "trailing bytes"));
    }
    Ok((PatchGrid::new(h, w, DenseArray::from_vec(vec![h * w, d], data)?)?, dtype))
}

fn join<T: ToString>(xs: &[T]) -> String {
    xs.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",")
}

/// The `key=value` block printed after a token payload (and by the CLI).
pub fn stats_block(seq: &TokenSequence) -> String {
    let s = &seq.stats;
    format!(
        "token_count={}\nreference_count={}\ncompression={}\nareas={}\norder={}\n",
        s.token_count,
        s.reference_count,
        s.compression,
        join(&s.areas),
        join(&seq.order)
    )
}

pub fn write_tokens(w: &mut impl Write, seq: &TokenSequence, dtype: Dtype) -> Result<()> {
    let (m, d) = (seq.tokens.rows(), seq.tokens.cols());
    if seq.stats.token_count != m || seq.order.len() != m || seq.stats.areas.len() != m {
        return Err(Error::shape("token stats disagree with the token matrix"));
    }
    let mut head = Vec::with_capacity(17);
    head.extend_from_slice(TOKEN_MAGIC);
    for x in [VERSION, to_u32(m, "token count")?, to_u32(d, "token width")?] {
        head.extend_from_slice(&x.to_le_bytes());
    }
    head.push(dtype.code());
    w.write_all(&head)?;
    write_payload(w, seq.tokens.data(), dtype)?;
    w.write_all(stats_block(seq).as_bytes())?;
    Ok(())
}

fn parse_list(v: &str, ctx: &str, field: &str) -> Result<Vec<usize>> {
    if v.is_empty() {
        return Ok(Vec::new());
    }
    v.split(',')
        .map(|x| {
            x.parse()
                .map_err(|_| Error::format(ctx, field, format!("bad entry {x:?}")))
        })
        .collect()
}

pub fn read_tokens(r: &mut impl Read) -> Result<(TokenSequence, Dtype)> {
    let ctx = "token file";
    read_header(r, TOKEN_MAGIC, ctx)?;
    let m = read_u32(r, ctx, "token_count")? as usize;
    let d = read_u32(r, ctx, "width")? as usize;
    let dtype = read_dtype(r, ctx)?;
    let data = read_values(r, m * d, dtype, ctx)?;
    let mut text = String::new();
    r.read_to_string(&mut text)
        .map_err(|_| Error::format(ctx, "stats", "stats block is not UTF-8"))?;
    let mut fields = std::collections::BTreeMap::new();
    for line in text.lines() {
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::format(ctx, "stats", format!("line {line:?} is not key=value")))?;
        fields.insert(k.to_string(), v.to_string());
    }
    let get = |k: &str| {
        fields
            .get(k)
            .map(String::as_str)
            .ok_or_else(|| Error::format(ctx, k, "missing"))
    };
    let count: usize = get("token_count")?
        .parse()
        .map_err(|_| Error::format(ctx, "token_count", "not an integer"))?;
    if count != m {
        return Err(Error::format(ctx, "token_count", format!("stats say {count}, header {m}")));
    }
    let reference: usize = get("reference_count")?
        .parse()
        .map_err(|_| Error::format(ctx, "reference_count", "not an integer"))?;
    if reference == 0 {
        return Err(Error::format(ctx, "reference_count", "must be positive"));
    }
    let areas = parse_list(get("areas")?, ctx, "areas")?;
    if areas.len() != m {
        return Err(Error::format(ctx, "areas", format!("{} areas for {m} tokens", areas.len())));
    }
    let order = parse_list(get("order")?, ctx, "order")?;
    if order.len() != m {
        return Err(Error::format(ctx, "order", format!("{} entries for {m} tokens", order.len())));
    }
    let stats = TokenStats::new(areas, reference);
    if get("compression")? != stats.compression.to_string() {
        return Err(Error::format(ctx, "compression", "inconsistent with token_count"));
    }
    let seq = TokenSequence {
        tokens: DenseArray::from_vec(vec![m, d], data)?,
        order,
        stats,
    };
    if stats_block(&seq) != text {
        return Err(Error::format(ctx, "stats", "unexpected keys or layout"));
    }
    Ok((seq, dtype))
}
