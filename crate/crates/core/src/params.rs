//! Named tensors stored in one flat `f64` buffer.
//!
//! Layers refer to their tensors by offset, gradients share the layout, and
//! optimizers and finite-difference checks work on the flat slice directly.

use std::io::{Read, Write};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
}

impl TensorEntry {
    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn range(&self) -> std::ops::Range<usize> {
        self.offset..self.offset + self.len()
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ParamSet {
    entries: Vec<TensorEntry>,
    values: Vec<f64>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    /// Appends a zero tensor and returns its offset.
    pub fn add(&mut self, name: impl Into<String>, shape: &[usize]) -> usize {
        let name = name.into();
        debug_assert!(self.entry(&name).is_none(), "duplicate tensor {name}");
        let offset = self.values.len();
        let entry = TensorEntry {
            name,
            shape: shape.to_vec(),
            offset,
        };
        self.values.resize(offset + entry.len(), 0.0);
        self.entries.push(entry);
        offset
    }

    /// Appends a tensor filled from `U(-limit, limit)`.
    pub fn add_uniform<R: Rng>(
        &mut self,
        name: impl Into<String>,
        shape: &[usize],
        limit: f64,
        rng: &mut R,
    ) -> usize {
        let offset = self.add(name, shape);
        for v in &mut self.values[offset..] {
            *v = rng.gen_range(-limit..=limit);
        }
        offset
    }

    pub fn entries(&self) -> &[TensorEntry] {
        &self.entries
    }

    pub fn entry(&self, name: &str) -> Option<&TensorEntry> {
        self.entries.iter().find(|e| e.name == name)
    }

    pub fn tensor(&self, name: &str) -> Option<&[f64]> {
        self.entry(name).map(|e| &self.values[e.range()])
    }

    pub fn tensor_mut(&mut self, name: &str) -> Option<&mut [f64]> {
        let range = self.entry(name)?.range();
        Some(&mut self.values[range])
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Zero-filled buffer with this layout, for gradients.
    pub fn zeros_like(&self) -> Vec<f64> {
        vec![0.0; self.values.len()]
    }

    /// Replaces values, keeping the layout.
    pub fn assign(&mut self, values: &[f64]) -> Result<()> {
        if values.len() != self.values.len() {
            return Err(Error::Shape(format!(
                "parameter buffer has {} values, got {}",
                self.values.len(),
                values.len()
            )));
        }
        self.values.copy_from_slice(values);
        Ok(())
    }

    pub fn same_layout(&self, other: &ParamSet) -> bool {
        self.entries == other.entries
    }
}

const MAGIC: &[u8; 8] = b"CLCKPT01";

/// Writes named tensors to the checkpoint container.
///
/// Layout (all integers little-endian):
/// `magic[8] = "CLCKPT01"`, `hash_len: u32`, `hash: utf8`, `n_tensors: u32`,
/// then per tensor `name_len: u32`, `name: utf8`, `ndim: u32`,
/// `dims: u64 * ndim`, `data: f64 * prod(dims)`.
pub fn write_container<W: Write>(
    mut w: W,
    spec_hash: &str,
    tensors: &[(String, &ParamSet)],
) -> std::io::Result<()> {
    w.write_all(MAGIC)?;
    write_str(&mut w, spec_hash)?;
    let count: usize = tensors.iter().map(|(_, p)| p.entries.len()).sum();
    w.write_all(&(count as u32).to_le_bytes())?;
    for (prefix, set) in tensors {
        for entry in &set.entries {
            write_str(&mut w, &format!("{prefix}{}", entry.name))?;
            w.write_all(&(entry.shape.len() as u32).to_le_bytes())?;
            for d in &entry.shape {
                w.write_all(&(*d as u64).to_le_bytes())?;
            }
            for v in &set.values[entry.range()] {
                w.write_all(&v.to_le_bytes())?;
            }
        }
    }
    w.flush()
}

/// A tensor read back from a container.
#[derive(Clone, Debug, PartialEq)]
pub struct StoredTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

pub fn read_container<R: Read>(mut r: R) -> Result<(String, Vec<StoredTensor>)> {
    let bad = |m: &str| Error::Checkpoint(m.to_string());
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)
        .map_err(|_| bad("truncated header"))?;
    if &magic != MAGIC {
        return Err(bad("not a parameter container (bad magic)"));
    }
    let hash = read_str(&mut r)?;
    let count = read_u32(&mut r)? as usize;
    let mut tensors = Vec::with_capacity(count);
    for _ in 0..count {
        let name = read_str(&mut r)?;
        let ndim = read_u32(&mut r)? as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            let mut b = [0u8; 8];
            r.read_exact(&mut b).map_err(|_| bad("truncated dims"))?;
            shape.push(u64::from_le_bytes(b) as usize);
        }
        let len: usize = shape.iter().product();
        let mut data = Vec::with_capacity(len);
        let mut b = [0u8; 8];
        for _ in 0..len {
            r.read_exact(&mut b)
                .map_err(|_| bad("truncated tensor data"))?;
            data.push(f64::from_le_bytes(b));
        }
        tensors.push(StoredTensor { name, shape, data });
    }
    Ok((hash, tensors))
}

/// Copies stored tensors named `{prefix}{entry}` into `set`, checking shapes.
pub fn load_into(set: &mut ParamSet, prefix: &str, stored: &[StoredTensor]) -> Result<()> {
    let entries = set.entries.clone();
    for entry in entries {
        let full = format!("{prefix}{}", entry.name);
        let t = stored
            .iter()
            .find(|t| t.name == full)
            .ok_or_else(|| Error::Checkpoint(format!("missing tensor `{full}`")))?;
        if t.shape != entry.shape {
            return Err(Error::Checkpoint(format!(
                "tensor `{full}` has shape {:?}, expected {:?}",
                t.shape, entry.shape
            )));
        }
        set.values[entry.range()].copy_from_slice(&t.data);
    }
    Ok(())
}

fn write_str<W: Write>(w: &mut W, s: &str) -> std::io::Result<()> {
    w.write_all(&(s.len() as u32).to_le_bytes())?;
    w.write_all(s.as_bytes())
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)
        .map_err(|_| Error::Checkpoint("truncated container".into()))?;
    Ok(u32::from_le_bytes(b))
}

fn read_str<R: Read>(r: &mut R) -> Result<String> {
    let len = read_u32(r)? as usize;
    let mut buf = vec![0u8; len];
    r.read_exact(&mut buf)
        .map_err(|_| Error::Checkpoint("truncated container".into()))?;
    String::from_utf8(buf).map_err(|_| Error::Checkpoint("tensor name is not utf-8".into()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn container_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut p = ParamSet::new();
        p.add_uniform("a.weight", &[3, 2], 0.5, &mut rng);
        p.add("a.bias", &[2]);
        let mut buf = Vec::new();
        write_container(&mut buf, "abc", &[("head.".to_string(), &p)]).unwrap();
        let (hash, stored) = read_container(buf.as_slice()).unwrap();
        assert_eq!(hash, "abc");
        assert_eq!(stored.len(), 2);
        let mut q = ParamSet::new();
        q.add("a.weight", &[3, 2]);
        q.add("a.bias", &[2]);
        load_into(&mut q, "head.", &stored).unwrap();
        assert_eq!(p, q);

        let mut wrong = ParamSet::new();
        wrong.add("a.weight", &[2, 3]);
        assert!(load_into(&mut wrong, "head.", &stored).is_err());
        assert!(read_container(&buf[..10]).is_err());
    }
}
