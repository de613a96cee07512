use std::collections::HashMap;
use std::io::{BufRead, Read, Write};

use rand::Rng;

use super::array::{DenseArray, Dtype};
use crate::{Error, Result};

/// Handle to an entry of a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
pub struct ParamEntry {
    pub name: String,
    pub value: DenseArray,
    pub grad: DenseArray,
    pub trainable: bool,
}

/// Named, flat collection of learnable arrays with gradient slots.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    entries: Vec<ParamEntry>,
    by_name: HashMap<String, usize>,
}

const MAGIC: &str = "SVPPARAMS";
const VERSION: u32 = 1;

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: &str, value: DenseArray, trainable: bool) -> Result<ParamId> {
        if name.is_empty() || name.chars().any(char::is_whitespace) {
            return Err(Error::invalid(format!("bad parameter name {name:?}")));
        }
        if self.by_name.contains_key(name) {
            return Err(Error::invalid(format!("duplicate parameter name {name:?}")));
        }
        if !value.is_finite() {
            return Err(Error::NonFinite(format!("parameter {name}")));
        }
        let id = self.entries.len();
        let grad = DenseArray::zeros(value.shape());
        self.entries.push(ParamEntry {
            name: name.to_string(),
            value,
            grad,
            trainable,
        });
        self.by_name.insert(name.to_string(), id);
        Ok(ParamId(id))
    }

    /// Adds a matrix with entries uniform in `±√(6/(fan_in+fan_out))`.
    pub fn add_xavier(
        &mut self,
        name: &str,
        shape: &[usize],
        fan_in: usize,
        fan_out: usize,
        rng: &mut impl Rng,
    ) -> Result<ParamId> {
        let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| rng.random_range(-limit..limit)).collect();
        self.add(name, DenseArray::from_vec(shape.to_vec(), data)?, true)
    }

    pub fn add_zeros(&mut self, name: &str, shape: &[usize]) -> Result<ParamId> {
        self.add(name, DenseArray::zeros(shape), true)
    }

    pub fn add_full(&mut self, name: &str, shape: &[usize], v: f64) -> Result<ParamId> {
        self.add(name, DenseArray::full(shape, v), true)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn entry(&self, id: ParamId) -> &ParamEntry {
        &self.entries[id.0]
    }

    pub fn entries(&self) -> &[ParamEntry] {
        &self.entries
    }

    pub fn value(&self, id: ParamId) -> &DenseArray {
        &self.entries[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut DenseArray {
        &mut self.entries[id.0].value
    }

    pub fn grad(&self, id: ParamId) -> &DenseArray {
        &self.entries[id.0].grad
    }

    pub fn grad_mut(&mut self, id: ParamId) -> &mut DenseArray {
        &mut self.entries[id.0].grad
    }

    pub fn id_of(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied().map(ParamId)
    }

    pub fn set_trainable(&mut self, id: ParamId, trainable: bool) {
        self.entries[id.0].trainable = trainable;
    }

    pub fn zero_grad(&mut self) {
        for e in &mut self.entries {
            e.grad.data_mut().iter_mut().for_each(|g| *g = 0.0);
        }
    }

    /// Sets every value (trainable or not) to zero.
    pub fn zero_values(&mut self) {
        for e in &mut self.entries {
            e.value.data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
    }

    pub fn num_scalars(&self) -> usize {
        self.entries.iter().map(|e| e.value.len()).sum()
    }

    /// Writes the text header followed by the little-endian payload.
    ///
    /// ```text
    /// SVPPARAMS 1
    /// dtype f64
    /// count <n>
    /// param <name> <trainable 0|1> <ndim> <dim>...
    /// end
    /// <payload, entries in header order>
    /// ```
    pub fn write_to(&self, w: &mut impl Write, dtype: Dtype) -> Result<()> {
        let mut header = String::new();
        header.push_str(&format!("{MAGIC} {VERSION}\n"));
        header.push_str(match dtype {
            Dtype::F32 => "dtype f32\n",
            Dtype::F64 => "dtype f64\n",
        });
        header.push_str(&format!("count {}\n", self.entries.len()));
        for e in &self.entries {
            let dims: Vec<String> = e.value.shape().iter().map(|d| d.to_string()).collect();
            header.push_str(&format!(
                "param {} {} {} {}\n",
                e.name,
                u8::from(e.trainable),
                e.value.shape().len(),
                dims.join(" ")
            ));
        }
        header.push_str("end\n");
        w.write_all(header.as_bytes())?;
        for e in &self.entries {
            write_payload(w, e.value.data(), dtype)?;
        }
        Ok(())
    }

    pub fn read_from(r: &mut impl BufRead) -> Result<(Self, Dtype)> {
        let ctx = "parameter file";
        let mut line = String::new();
        let mut next_line = |r: &mut dyn BufRead, field: &str| -> Result<String> {
            line.clear();
            if r.read_line(&mut line)? == 0 {
                return Err(Error::format(ctx, field, "unexpected end of header"));
            }
            Ok(line.trim_end_matches('\n').to_string())
        };
        let magic = next_line(r, "magic")?;
        if magic != format!("{MAGIC} {VERSION}") {
            return Err(Error::format(ctx, "magic", format!("got {magic:?}")));
        }
        let dtype = match next_line(r, "dtype")?.as_str() {
            "dtype f32" => Dtype::F32,
            "dtype f64" => Dtype::F64,
            other => return Err(Error::format(ctx, "dtype", format!("got {other:?}"))),
        };
        let count_line = next_line(r, "count")?;
        let count: usize = count_line
            .strip_prefix("count ")
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| Error::format(ctx, "count", format!("got {count_line:?}")))?;
        let mut specs = Vec::with_capacity(count);
        for k in 0..count {
            let l = next_line(r, "param")?;
            let toks: Vec<&str> = l.split(' ').collect();
            let bad = || Error::format(ctx, "param", format!("entry {k}: {l:?}"));
            if toks.len() < 4 || toks[0] != "param" {
                return Err(bad());
            }
            let trainable = match toks[2] {
                "0" => false,
                "1" => true,
                _ => return Err(bad()),
            };
            let ndim: usize = toks[3].parse().map_err(|_| bad())?;
            if toks.len() != 4 + ndim {
                return Err(bad());
            }
            let shape = toks[4..]
                .iter()
                .map(|t| t.parse::<usize>().map_err(|_| bad()))
                .collect::<Result<Vec<_>>>()?;
            specs.push((toks[1].to_string(), trainable, shape));
        }
        if next_line(r, "end")? != "end" {
            return Err(Error::format(ctx, "end", "missing header terminator"));
        }
        let mut store = ParamStore::new();
        for (name, trainable, shape) in specs {
            let n: usize = shape.iter().product();
            let data = read_payload(r, n, dtype).map_err(|e| match e {
                Error::Io(_) => Error::format(ctx, "payload", format!("truncated at {name}")),
                other => other,
            })?;
            store.add(&name, DenseArray::from_vec(shape, data)?, trainable)?;
        }
        let mut rest = Vec::new();
        r.read_to_end(&mut rest)?;
        if !rest.is_empty() {
            return Err(Error::format(ctx, "payload", "trailing bytes"));
        }
        Ok((store, dtype))
    }

    /// Copies values from `other` for every name present in both stores.
    pub fn load_values_from(&mut self, other: &ParamStore) -> Result<usize> {
        let mut n = 0;
        for e in &mut self.entries {
            if let Some(&j) = other.by_name.get(&e.name) {
                let src = &other.entries[j].value;
                if src.shape() != e.value.shape() {
                    return Err(Error::shape(format!("parameter {} shape differs", e.name)));
                }
                e.value = src.clone();
                n += 1;
            }
        }
        Ok(n)
    }
}

pub(crate) fn write_payload(w: &mut impl Write, data: &[f64], dtype: Dtype) -> Result<()> {
    let mut buf = Vec::with_capacity(data.len() * dtype.width());
    match dtype {
        Dtype::F32 => data
            .iter()
            .for_each(|&v| buf.extend_from_slice(&(v as f32).to_le_bytes())),
        Dtype::F64 => data
            .iter()
            .for_each(|&v| buf.extend_from_slice(&v.to_le_bytes())),
    }
    w.write_all(&buf)?;
    Ok(())
}

pub(crate) fn read_payload(r: &mut impl Read, n: usize, dtype: Dtype) -> Result<Vec<f64>> {
    let mut buf = vec![0u8; n * dtype.width()];
    r.read_exact(&mut buf)?;
    Ok(match dtype {
        Dtype::F32 => buf
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
            .collect(),
        Dtype::F64 => buf
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
            .collect(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn names_are_unique() {
        let mut s = ParamStore::new();
        s.add_zeros("a", &[2]).unwrap();
        assert!(s.add_zeros("a", &[3]).is_err());
        assert!(s.add_zeros("has space", &[1]).is_err());
    }

    #[test]
    fn zero_grad_resets_slots() {
        let mut s = ParamStore::new();
        let id = s.add_full("w", &[2, 2], 1.0).unwrap();
        s.grad_mut(id).data_mut()[3] = 4.0;
        s.zero_grad();
        assert_eq!(s.grad(id).sum(), 0.0);
        assert_eq!(s.grad(id).shape(), s.value(id).shape());
    }

    #[test]
    fn serialization_round_trips_bytes() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut s = ParamStore::new();
        s.add_xavier("blk.w", &[3, 4], 3, 4, &mut rng).unwrap();
        let frozen = s.add_zeros("blk.b", &[4]).unwrap();
        s.set_trainable(frozen, false);
        for dtype in [Dtype::F32, Dtype::F64] {
            let mut bytes = Vec::new();
            s.write_to(&mut bytes, dtype).unwrap();
            let (back, dt) = ParamStore::read_from(&mut &bytes[..]).unwrap();
            assert_eq!(dt, dtype);
            assert!(!back.entry(frozen).trainable);
            let mut again = Vec::new();
            back.write_to(&mut again, dtype).unwrap();
            assert_eq!(bytes, again);
        }
    }

    #[test]
    fn truncated_payload_names_field() {
        let mut s = ParamStore::new();
        s.add_full("w", &[4], 1.0).unwrap();
        let mut bytes = Vec::new();
        s.write_to(&mut bytes, Dtype::F64).unwrap();
        bytes.truncate(bytes.len() - 3);
        let err = ParamStore::read_from(&mut &bytes[..]).unwrap_err();
        assert!(err.to_string().contains("payload"), "{err}");
    }
}
