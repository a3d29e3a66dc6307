//! Named parameter storage, initialization and the checkpoint file format.
//!
//! A checkpoint is a text manifest followed by raw little-endian `f64`s:
//!
//! ```text
//! insctc-checkpoint 1
//! params <count>
//! <name> <extent> <extent> ...
//! ...
//! end
//! <binary payload, parameters in manifest order>
//! ```

use std::collections::HashMap;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use rand::Rng;

use super::array::DenseArray;
use crate::error::{Error, Result};

pub const CHECKPOINT_MAGIC: &str = "insctc-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Dense index of a parameter inside a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(pub usize);

/// How a parameter is initialized.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Init {
    /// Uniform in ±sqrt(6 / (fan_in + fan_out)) using the last two extents.
    Xavier,
    Zeros,
    Ones,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<DenseArray>,
    index: HashMap<String, ParamId>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Adds a parameter. Replaces the value if `name` already exists.
    pub fn insert(&mut self, name: &str, value: DenseArray) -> ParamId {
        if let Some(&id) = self.index.get(name) {
            self.values[id.0] = value;
            return id;
        }
        let id = ParamId(self.values.len());
        self.names.push(name.to_string());
        self.values.push(value);
        self.index.insert(name.to_string(), id);
        id
    }

    pub fn init<R: Rng + ?Sized>(
        &mut self,
        name: &str,
        shape: &[usize],
        init: Init,
        rng: &mut R,
    ) -> ParamId {
        let value = match init {
            Init::Zeros => DenseArray::zeros(shape),
            Init::Ones => DenseArray::full(shape, 1.0),
            Init::Xavier => {
                let (fan_in, fan_out) = match shape {
                    [] => (1, 1),
                    [n] => (*n, *n),
                    s => (s[s.len() - 2], s[s.len() - 1]),
                };
                let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
                let mut a = DenseArray::zeros(shape);
                for v in a.data_mut() {
                    *v = rng.random_range(-bound..=bound);
                }
                a
            }
        };
        self.insert(name, value)
    }

    pub fn id(&self, name: &str) -> Result<ParamId> {
        self.index
            .get(name)
            .copied()
            .ok_or_else(|| Error::UnboundLeaf(name.to_string()))
    }

    pub fn get(&self, name: &str) -> Option<&DenseArray> {
        self.index.get(name).map(|id| &self.values[id.0])
    }

    pub fn value(&self, id: ParamId) -> &DenseArray {
        &self.values[id.0]
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut DenseArray {
        &mut self.values[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &DenseArray)> {
        self.names.iter().map(String::as_str).zip(&self.values)
    }

    /// Total number of scalar parameters.
    pub fn scalar_count(&self) -> usize {
        self.values.iter().map(DenseArray::len).sum()
    }

    /// Same names in the same order with the same shapes.
    pub fn check_compatible(&self, other: &ParamStore) -> Result<()> {
        if self.len() != other.len() {
            return Err(Error::CheckpointMismatch(format!(
                "{} parameters vs {}",
                self.len(),
                other.len()
            )));
        }
        for ((na, va), (nb, vb)) in self.iter().zip(other.iter()) {
            if na != nb || va.shape() != vb.shape() {
                return Err(Error::CheckpointMismatch(format!(
                    "`{na}` {:?} vs `{nb}` {:?}",
                    va.shape(),
                    vb.shape()
                )));
            }
        }
        Ok(())
    }

    pub fn write_checkpoint<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "{CHECKPOINT_MAGIC} {CHECKPOINT_VERSION}")?;
        writeln!(w, "params {}", self.len())?;
        for (name, value) in self.iter() {
            write!(w, "{name}")?;
            for e in value.shape() {
                write!(w, " {e}")?;
            }
            writeln!(w)?;
        }
        writeln!(w, "end")?;
        for value in &self.values {
            for v in value.data() {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        w.flush()
    }

    pub fn read_checkpoint<R: Read>(r: R) -> Result<Self> {
        let mut r = BufReader::new(r);
        let mut line = String::new();
        let mut lineno = 0;
        let mut next_line = |r: &mut BufReader<R>, line: &mut String| -> Result<usize> {
            line.clear();
            lineno += 1;
            let n = r.read_line(line).map_err(|e| Error::Parse {
                what: "checkpoint".into(),
                line: lineno,
                msg: e.to_string(),
            })?;
            if n == 0 {
                return Err(Error::Parse {
                    what: "checkpoint".into(),
                    line: lineno,
                    msg: "unexpected end of header".into(),
                });
            }
            Ok(lineno)
        };
        let bad = |line: usize, msg: String| Error::Parse {
            what: "checkpoint".into(),
            line,
            msg,
        };

        let ln = next_line(&mut r, &mut line)?;
        let mut head = line.split_whitespace();
        if head.next() != Some(CHECKPOINT_MAGIC) {
            return Err(bad(ln, "missing checkpoint magic".into()));
        }
        let version: u32 = head
            .next()
            .and_then(|v| v.parse().ok())
            .ok_or_else(|| bad(ln, "missing version".into()))?;
        if version != CHECKPOINT_VERSION {
            return Err(bad(ln, format!("unsupported version {version}")));
        }
        let ln = next_line(&mut r, &mut line)?;
        let count: usize = line
            .strip_prefix("params ")
            .and_then(|c| c.trim().parse().ok())
            .ok_or_else(|| bad(ln, "expected `params <count>`".into()))?;
        let mut manifest = Vec::with_capacity(count);
        for _ in 0..count {
            let ln = next_line(&mut r, &mut line)?;
            let mut fields = line.split_whitespace();
            let name = fields
                .next()
                .ok_or_else(|| bad(ln, "empty manifest line".into()))?
                .to_string();
            let shape = fields
                .map(|f| f.parse::<usize>())
                .collect::<std::result::Result<Vec<_>, _>>()
                .map_err(|e| bad(ln, e.to_string()))?;
            manifest.push((name, shape));
        }
        let ln = next_line(&mut r, &mut line)?;
        if line.trim_end() != "end" {
            return Err(bad(ln, "expected `end`".into()));
        }
        let mut store = ParamStore::new();
        let mut buf = [0u8; 8];
        for (name, shape) in manifest {
            let len: usize = shape.iter().product();
            let mut data = Vec::with_capacity(len);
            for _ in 0..len {
                r.read_exact(&mut buf)
                    .map_err(|e| bad(ln, format!("payload for `{name}`: {e}")))?;
                data.push(f64::from_le_bytes(buf));
            }
            store.insert(&name, DenseArray::new(shape, data)?);
        }
        Ok(store)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        self.write_checkpoint(std::io::BufWriter::new(file))
            .map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        Self::read_checkpoint(file)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn init_follows_fan_bounds() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut s = ParamStore::new();
        let w = s.init("w", &[10, 6], Init::Xavier, &mut rng);
        let b = s.init("b", &[6], Init::Zeros, &mut rng);
        let g = s.init("g", &[6], Init::Ones, &mut rng);
        let bound = (6.0f64 / 16.0).sqrt();
        assert!(s.value(w).data().iter().all(|v| v.abs() <= bound));
        assert!(s.value(b).data().iter().all(|&v| v == 0.0));
        assert!(s.value(g).data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn checkpoint_round_trip_is_bit_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut s = ParamStore::new();
        s.init("enc.w", &[3, 4], Init::Xavier, &mut rng);
        s.insert(
            "odd",
            DenseArray::vector(vec![f64::MIN_POSITIVE, -0.0, 1e308, 1.0 / 3.0]),
        );
        s.insert("scalar", DenseArray::scalar(std::f64::consts::PI));
        let mut bytes = Vec::new();
        s.write_checkpoint(&mut bytes).unwrap();
        let back = ParamStore::read_checkpoint(bytes.as_slice()).unwrap();
        back.check_compatible(&s).unwrap();
        for ((_, a), (_, b)) in s.iter().zip(back.iter()) {
            let bits_a: Vec<u64> = a.data().iter().map(|v| v.to_bits()).collect();
            let bits_b: Vec<u64> = b.data().iter().map(|v| v.to_bits()).collect();
            assert_eq!(bits_a, bits_b);
        }
    }

    #[test]
    fn truncated_checkpoint_is_rejected() {
        let mut s = ParamStore::new();
        s.insert("w", DenseArray::vector(vec![1.0, 2.0]));
        let mut bytes = Vec::new();
        s.write_checkpoint(&mut bytes).unwrap();
        bytes.truncate(bytes.len() - 3);
        assert!(ParamStore::read_checkpoint(bytes.as_slice()).is_err());
    }

    #[test]
    fn mismatched_store_is_reported() {
        let mut a = ParamStore::new();
        a.insert("w", DenseArray::zeros(&[2, 2]));
        let mut b = ParamStore::new();
        b.insert("w", DenseArray::zeros(&[2, 3]));
        assert!(matches!(
            a.check_compatible(&b),
            Err(Error::CheckpointMismatch(_))
        ));
    }
}
