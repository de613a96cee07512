use std::fmt;
use std::io::{BufRead, Write};

use serde_json::{json, Value};

use super::rle::{decode_rle, encode_rle};
use crate::{Error, Result};

/// Row-major binary raster.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct BinaryGrid {
    height: usize,
    width: usize,
    data: Vec<bool>,
}

impl BinaryGrid {
    pub fn from_vec(height: usize, width: usize, data: Vec<bool>) -> Result<Self> {
        if data.len() != height * width {
            return Err(Error::shape(format!(
                "{height}×{width} grid needs {} pixels, got {}",
                height * width,
                data.len()
            )));
        }
        Ok(Self {
            height,
            width,
            data,
        })
    }

    pub fn from_fn(height: usize, width: usize, f: impl Fn(usize, usize) -> bool) -> Self {
        let mut data = Vec::with_capacity(height * width);
        for r in 0..height {
            for c in 0..width {
                data.push(f(r, c));
            }
        }
        Self {
            height,
            width,
            data,
        }
    }

    pub fn empty(height: usize, width: usize) -> Self {
        Self::from_fn(height, width, |_, _| false)
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

    pub fn data(&self) -> &[bool] {
        &self.data
    }

    pub fn get(&self, r: usize, c: usize) -> bool {
        self.data[r * self.width + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: bool) {
        self.data[r * self.width + c] = v;
    }

    pub fn area(&self) -> usize {
        self.data.iter().filter(|&&b| b).count()
    }

    /// Nearest-neighbour resampling to `h × w`.
    pub fn resize_nearest(&self, h: usize, w: usize) -> Self {
        let rows = nearest_indices(self.height, h);
        let cols = nearest_indices(self.width, w);
        Self::from_fn(h, w, |r, c| self.get(rows[r], cols[c]))
    }
}

/// Source index sampled by output index `i` when resampling `src` cells to
/// `dst` cells: the cell containing the output cell's centre.
pub fn nearest_indices(src: usize, dst: usize) -> Vec<usize> {
    (0..dst)
        .map(|i| {
            let x = ((i as f64 + 0.5) * src as f64 / dst as f64).floor() as usize;
            x.min(src - 1)
        })
        .collect()
}

/// Nesting level of a candidate mask.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Level {
    Whole,
    Part,
    Subpart,
}

impl Level {
    /// Lower is preferred by the filter.
    pub fn priority(self) -> u8 {
        match self {
            Level::Whole => 0,
            Level::Part => 1,
            Level::Subpart => 2,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Level::Whole => "whole",
            Level::Part => "part",
            Level::Subpart => "subpart",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "whole" => Some(Level::Whole),
            "part" => Some(Level::Part),
            "subpart" => Some(Level::Subpart),
            _ => None,
        }
    }
}

impl fmt::Display for Level {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// One candidate segmentation mask.
#[derive(Clone, Debug, PartialEq)]
pub struct CandidateMask {
    pub id: u32,
    pub level: Level,
    pub score: f64,
    mask: BinaryGrid,
    area: usize,
}

impl CandidateMask {
    pub fn new(id: u32, level: Level, score: f64, mask: BinaryGrid) -> Result<Self> {
        if !(0.0..=1.0).contains(&score) {
            return Err(Error::invalid(format!("mask {id}: score {score} outside [0, 1]")));
        }
        let area = mask.area();
        if area == 0 {
            return Err(Error::invalid(format!("mask {id} has no foreground pixels")));
        }
        Ok(Self {
            id,
            level,
            score,
            mask,
            area,
        })
    }

    pub fn mask(&self) -> &BinaryGrid {
        &self.mask
    }

    pub fn area(&self) -> usize {
        self.area
    }
}

/// Contents of a mask file: declared dims plus the masks.
#[derive(Clone, Debug, PartialEq)]
pub struct MaskFile {
    pub height: usize,
    pub width: usize,
    pub masks: Vec<CandidateMask>,
}

impl MaskFile {
    /// Writes the line-oriented JSON form.
    ///
    /// ```text
    /// {"height":H,"width":W,"count":N}
    /// {"id":0,"level":"whole","score":0.9,"rle":[0,12,4]}
    /// ...
    /// ```
    pub fn write_to(&self, w: &mut impl Write) -> Result<()> {
        let header = json!({"height": self.height, "width": self.width, "count": self.masks.len()});
        writeln!(w, "{}", header_line(&header))?;
        for m in &self.masks {
            let runs = encode_rle(m.mask());
            let line = format!(
                "{{\"id\":{},\"level\":\"{}\",\"score\":{},\"rle\":{}}}",
                m.id,
                m.level,
                serde_json::to_string(&m.score).expect("finite score"),
                serde_json::to_string(&runs).expect("ints")
            );
            writeln!(w, "{line}")?;
        }
        Ok(())
    }

    pub fn read_from(r: &mut impl BufRead) -> Result<Self> {
        let mut lines = r.lines();
        let header_text = lines
            .next()
            .ok_or_else(|| Error::format("mask file", "height", "file is empty"))??;
        let header: Value = serde_json::from_str(&header_text)
            .map_err(|e| Error::format("mask file header", "header", e.to_string()))?;
        let height = uint_field(&header, "height", "mask file header")? as usize;
        let width = uint_field(&header, "width", "mask file header")? as usize;
        let count = uint_field(&header, "count", "mask file header")? as usize;
        let mut masks = Vec::with_capacity(count);
        for (k, line) in lines.enumerate() {
            let line = line?;
            if line.is_empty() {
                continue;
            }
            let ctx = format!("mask file entry {k}");
            let v: Value = serde_json::from_str(&line)
                .map_err(|e| Error::format(&ctx, "entry", e.to_string()))?;
            let id = uint_field(&v, "id", &ctx)?;
            let id = u32::try_from(id).map_err(|_| Error::format(&ctx, "id", "exceeds u32"))?;
            let level_str = v
                .get("level")
                .and_then(Value::as_str)
                .ok_or_else(|| Error::format(&ctx, "level", "missing or not a string"))?;
            let level = Level::parse(level_str).ok_or_else(|| {
                Error::format(&ctx, "level", format!("unknown level {level_str:?}"))
            })?;
            let score = v
                .get("score")
                .and_then(Value::as_f64)
                .ok_or_else(|| Error::format(&ctx, "score", "missing or not a number"))?;
            let runs = v
                .get("rle")
                .and_then(Value::as_array)
                .ok_or_else(|| Error::format(&ctx, "rle", "missing or not an array"))?
                .iter()
                .map(|x| {
                    x.as_i64()
                        .ok_or_else(|| Error::format(&ctx, "rle", "run is not an integer"))
                })
                .collect::<Result<Vec<_>>>()?;
            let grid = decode_rle(&runs, height, width)
                .map_err(|e| Error::format(&ctx, "rle", e.to_string()))?;
            let mask = CandidateMask::new(id, level, score, grid).map_err(|e| {
                let field = if score.is_finite() && (0.0..=1.0).contains(&score) {
                    "rle"
                } else {
                    "score"
                };
                Error::format(&ctx, field, e.to_string())
            })?;
            masks.push(mask);
        }
        if masks.len() != count {
            return Err(Error::format(
                "mask file header",
                "count",
                format!("declares {count} masks, found {}", masks.len()),
            ));
        }
        Ok(Self {
            height,
            width,
            masks,
        })
    }
}

fn header_line(v: &Value) -> String {
    // Fixed key order, independent of map ordering.
    format!(
        "{{\"height\":{},\"width\":{},\"count\":{}}}",
        v["height"], v["width"], v["count"]
    )
}

fn uint_field(v: &Value, field: &str, ctx: &str) -> Result<u64> {
    v.get(field)
        .and_then(Value::as_u64)
        .ok_or_else(|| Error::format(ctx, field, "missing or not a non-negative integer"))
}
