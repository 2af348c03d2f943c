//! Named parameter collections and the binary checkpoint format.
//!
//! Checkpoint layout (all integers little-endian):
//!
//! ```text
//! magic   b"DTCNPARM"
//! version u32 (= 1)
//! count   u32
//! repeated `count` times:
//!     name_len u32, name utf-8 bytes
//!     ndim u32, dims u64 * ndim
//!     values f64 * product(dims)
//! ```

use std::io::{Read, Write};
use std::path::Path;

use indexmap::IndexMap;

use super::tensor::Tensor;
use crate::error::{Error, Result};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"DTCNPARM";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Ordered map from parameter name to tensor. Iteration follows insertion order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParameterSet {
    entries: IndexMap<String, Tensor>,
}

impl ParameterSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) -> Result<()> {
        let name = name.into();
        if self.entries.contains_key(&name) {
            return Err(Error::InvalidArgument(format!("duplicate parameter {name}")));
        }
        self.entries.insert(name, value);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.entries.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.entries.get_mut(name)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    /// Total number of scalar entries across all tensors.
    pub fn scalar_count(&self) -> usize {
        self.entries.values().map(Tensor::len).sum()
    }

    /// Same names, same order, same shapes.
    pub fn check_compatible(&self, other: &ParameterSet) -> Result<()> {
        if self.len() != other.len() {
            return Err(Error::Incompatible(format!(
                "{} vs {} entries",
                self.len(),
                other.len()
            )));
        }
        for ((na, ta), (nb, tb)) in self.iter().zip(other.iter()) {
            if na != nb {
                return Err(Error::Incompatible(format!("name {na} vs {nb}")));
            }
            if ta.shape() != tb.shape() {
                return Err(Error::Incompatible(format!(
                    "{na}: shape {:?} vs {:?}",
                    ta.shape(),
                    tb.shape()
                )));
            }
        }
        Ok(())
    }

    /// Entries whose name satisfies `keep`, in order.
    pub fn filter(&self, keep: impl Fn(&str) -> bool) -> ParameterSet {
        ParameterSet {
            entries: self
                .entries
                .iter()
                .filter(|(k, _)| keep(k))
                .map(|(k, v)| (k.clone(), v.clone()))
                .collect(),
        }
    }

    /// Overwrites entries of `self` with same-named entries from `other`.
    pub fn update_from(&mut self, other: &ParameterSet) -> Result<()> {
        for (name, value) in other.iter() {
            let slot = self
                .entries
                .get_mut(name)
                .ok_or_else(|| Error::Incompatible(format!("unknown parameter {name}")))?;
            if slot.shape() != value.shape() {
                return Err(Error::Incompatible(format!(
                    "{name}: shape {:?} vs {:?}",
                    slot.shape(),
                    value.shape()
                )));
            }
            *slot = value.clone();
        }
        Ok(())
    }

    pub fn max_abs_diff(&self, other: &ParameterSet) -> Result<f64> {
        self.check_compatible(other)?;
        Ok(self
            .entries
            .values()
            .zip(other.entries.values())
            .map(|(a, b)| a.max_abs_diff(b))
            .fold(0.0, f64::max))
    }

    pub fn write_to(&self, w: &mut impl Write) -> std::io::Result<()> {
        w.write_all(CHECKPOINT_MAGIC)?;
        w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
        w.write_all(&(self.len() as u32).to_le_bytes())?;
        for (name, t) in self.iter() {
            w.write_all(&(name.len() as u32).to_le_bytes())?;
            w.write_all(name.as_bytes())?;
            w.write_all(&(t.shape().len() as u32).to_le_bytes())?;
            for &d in t.shape() {
                w.write_all(&(d as u64).to_le_bytes())?;
            }
            for v in t.data() {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut buf = Vec::new();
        self.write_to(&mut buf).expect("writing to a Vec cannot fail");
        buf
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes, "checkpoint");
        let magic = r.take(8)?;
        if magic != CHECKPOINT_MAGIC {
            return Err(r.fail("bad magic"));
        }
        let version = r.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::Version {
                found: version,
                expected: CHECKPOINT_VERSION,
            });
        }
        let count = r.u32()?;
        let mut set = ParameterSet::new();
        for _ in 0..count {
            let len = r.u32()? as usize;
            let name = std::str::from_utf8(r.take(len)?)
                .map_err(|_| r.fail("parameter name is not utf-8"))?
                .to_string();
            let ndim = r.u32()? as usize;
            let mut shape = Vec::with_capacity(ndim);
            for _ in 0..ndim {
                shape.push(r.u64()? as usize);
            }
            let n = shape
                .iter()
                .try_fold(1usize, |acc, &d| acc.checked_mul(d))
                .ok_or_else(|| r.fail("shape overflow"))?;
            let data = r.f64s(n)?;
            set.insert(name, Tensor::new(shape, data)?)?;
        }
        if !r.is_done() {
            return Err(r.fail("trailing bytes"));
        }
        Ok(set)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        self.write_to(&mut file).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)
            .and_then(|mut f| f.read_to_end(&mut bytes))
            .map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

/// Little-endian cursor shared by the binary formats.
pub(crate) struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    context: &'static str,
}

impl<'a> Reader<'a> {
    pub(crate) fn new(bytes: &'a [u8], context: &'static str) -> Self {
        Self { bytes, pos: 0, context }
    }

    pub(crate) fn fail(&self, reason: &str) -> Error {
        Error::Format {
            context: self.context.to_string(),
            reason: format!("{reason} at byte {}", self.pos),
        }
    }

    pub(crate) fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(self.fail("truncated"));
        }
        let out = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    pub(crate) fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    pub(crate) fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    pub(crate) fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        let raw = self.take(n.checked_mul(8).ok_or_else(|| self.fail("length overflow"))?)?;
        Ok(raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }

    pub(crate) fn is_done(&self) -> bool {
        self.pos == self.bytes.len()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> ParameterSet {
        let mut p = ParameterSet::new();
        p.insert(
            "b.weight",
            Tensor::from_rows(&[vec![1.5, -0.0], vec![f64::MIN_POSITIVE, 3.0]]),
        )
        .unwrap();
        p.insert("a.bias", Tensor::vector(vec![0.1, 0.2, 0.3])).unwrap();
        p
    }

    #[test]
    fn checkpoint_round_trip_is_bit_exact_and_ordered() {
        let p = sample();
        let q = ParameterSet::from_bytes(&p.to_bytes()).unwrap();
        assert_eq!(q.names().collect::<Vec<_>>(), vec!["b.weight", "a.bias"]);
        for ((_, a), (_, b)) in p.iter().zip(q.iter()) {
            let bits = |t: &Tensor| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
            assert_eq!(bits(a), bits(b));
        }
    }

    #[test]
    fn truncated_checkpoint_is_format_error() {
        let bytes = sample().to_bytes();
        for cut in [0, 5, 12, bytes.len() - 1] {
            assert!(matches!(
                ParameterSet::from_bytes(&bytes[..cut]),
                Err(Error::Format { .. })
            ));
        }
    }

    #[test]
    fn wrong_version_is_reported() {
        let mut bytes = sample().to_bytes();
        bytes[8] = 9;
        assert!(matches!(
            ParameterSet::from_bytes(&bytes),
            Err(Error::Version { found: 9, .. })
        ));
    }

    #[test]
    fn compatibility_checks_order() {
        let p = sample();
        let mut q = ParameterSet::new();
        q.insert("a.bias", Tensor::vector(vec![0.0; 3])).unwrap();
        q.insert("b.weight", Tensor::zeros(&[2, 2])).unwrap();
        assert!(p.check_compatible(&q).is_err());
        assert!(p.check_compatible(&p.clone()).is_ok());
    }
}
