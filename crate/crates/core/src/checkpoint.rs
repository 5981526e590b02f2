//! Binary checkpoints.
//!
//! Layout, all integers `u64` little-endian:
//!
//! ```text
//! b"MSZR1"
//! config_len, config bytes (UTF-8 key = value text)
//! tensor_count
//! per tensor: name_len, name bytes, rows, cols, rows*cols f64 (LE)
//! ```

use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::Matrix;

pub const MAGIC: &[u8; 5] = b"MSZR1";

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: String,
    pub tensors: Vec<(String, Matrix)>,
}

impl Checkpoint {
    pub fn from_store(config: impl Into<String>, store: &ParamStore) -> Self {
        Checkpoint {
            config: config.into(),
            tensors: store
                .entries()
                .iter()
                .map(|e| (e.name.clone(), e.value.clone()))
                .collect(),
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        put_u64(&mut out, self.config.len() as u64);
        out.extend_from_slice(self.config.as_bytes());
        put_u64(&mut out, self.tensors.len() as u64);
        for (name, m) in &self.tensors {
            put_u64(&mut out, name.len() as u64);
            out.extend_from_slice(name.as_bytes());
            put_u64(&mut out, m.rows() as u64);
            put_u64(&mut out, m.cols() as u64);
            for v in m.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(MAGIC.len())? != MAGIC {
            return Err(Error::Checkpoint("bad magic, not a checkpoint".into()));
        }
        let n = r.len()?;
        let config = String::from_utf8(r.take(n)?.to_vec())
            .map_err(|_| Error::Checkpoint("config block is not UTF-8".into()))?;
        let count = r.len()?;
        let mut tensors = Vec::new();
        for _ in 0..count {
            let n = r.len()?;
            let name = String::from_utf8(r.take(n)?.to_vec())
                .map_err(|_| Error::Checkpoint("tensor name is not UTF-8".into()))?;
            let rows = r.len()?;
            let cols = r.len()?;
            let total = rows
                .checked_mul(cols)
                .filter(|t| t.checked_mul(8).is_some_and(|b| b <= bytes.len()))
                .ok_or_else(|| Error::Checkpoint(format!("{name}: implausible shape {rows}x{cols}")))?;
            let raw = r.take(total * 8)?;
            let data = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
                .collect();
            let m = Matrix::new(rows, cols, data).map_err(|e| Error::Checkpoint(format!("{name}: {e}")))?;
            tensors.push((name, m));
        }
        if r.pos != bytes.len() {
            return Err(Error::Checkpoint(format!("{} trailing bytes", bytes.len() - r.pos)));
        }
        Ok(Checkpoint { config, tensors })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)
            .and_then(|mut f| f.read_to_end(&mut bytes))
            .map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }

    /// Copies every tensor into `store`. Names, order and shapes must match
    /// exactly; nothing is written unless all of them do.
    pub fn apply(&self, store: &mut ParamStore) -> Result<()> {
        if self.tensors.len() != store.len() {
            return Err(Error::Checkpoint(format!(
                "checkpoint has {} tensors, model has {}",
                self.tensors.len(),
                store.len()
            )));
        }
        for ((name, m), e) in self.tensors.iter().zip(store.entries()) {
            if *name != e.name {
                return Err(Error::Checkpoint(format!("expected tensor {:?}, found {name:?}", e.name)));
            }
            if m.shape() != e.value.shape() {
                return Err(Error::Shape {
                    op: "Checkpoint::apply",
                    left: m.shape(),
                    right: e.value.shape(),
                });
            }
        }
        let ids: Vec<_> = store.ids().collect();
        for (id, (_, m)) in ids.into_iter().zip(&self.tensors) {
            store.assign(id, m.clone())?;
        }
        Ok(())
    }
}

fn put_u64(out: &mut Vec<u8>, v: u64) {
    out.extend_from_slice(&v.to_le_bytes());
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::Checkpoint(format!("truncated at byte {}", self.bytes.len())))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn len(&mut self) -> Result<usize> {
        let raw = self.take(8)?;
        let v = u64::from_le_bytes(raw.try_into().expect("8 bytes"));
        usize::try_from(v).map_err(|_| Error::Checkpoint(format!("length {v} overflows")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store() -> ParamStore {
        let mut s = ParamStore::new();
        s.add("a", Matrix::from_fn(2, 3, |i, j| (i * 3 + j) as f64 * 0.1 - 0.25));
        s.add("b", Matrix::filled(1, 4, f64::MIN_POSITIVE));
        s
    }

    #[test]
    fn round_trip_is_bitwise() {
        let ck = Checkpoint::from_store("kind = sa\n", &store());
        let back = Checkpoint::from_bytes(&ck.to_bytes()).unwrap();
        assert_eq!(back, ck);
        let mut fresh = store();
        for id in fresh.ids().collect::<Vec<_>>() {
            let (r, c) = fresh.get(id).shape();
            fresh.assign(id, Matrix::zeros(r, c)).unwrap();
        }
        back.apply(&mut fresh).unwrap();
        assert_eq!(fresh, store());
    }

    #[test]
    fn truncation_and_garbage_error() {
        let bytes = Checkpoint::from_store("", &store()).to_bytes();
        for cut in [0, 3, 5, 12, bytes.len() - 1] {
            assert!(Checkpoint::from_bytes(&bytes[..cut]).is_err(), "cut {cut}");
        }
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(Checkpoint::from_bytes(&extra).is_err());
        assert!(Checkpoint::from_bytes(b"NOPE1").is_err());
    }

    #[test]
    fn mismatched_store_rejected() {
        let ck = Checkpoint::from_store("", &store());
        let mut other = ParamStore::new();
        other.add("a", Matrix::zeros(3, 2));
        other.add("b", Matrix::zeros(1, 4));
        assert!(matches!(ck.apply(&mut other), Err(Error::Shape { .. })));
        assert_eq!(other.get(other.find("b").unwrap()), &Matrix::zeros(1, 4));
    }
}
