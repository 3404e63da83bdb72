//! Named parameter collections and the checkpoint format.
//!
//! A [`ParamStore`] maps dotted names (`enc.b1.c1.w`) to tensors. The map is
//! a `BTreeMap`, so every iteration — serialization, aggregation, optimizer
//! sweeps — walks parameters in one canonical (lexicographic) order. That
//! ordering is a determinism guarantee, not an aesthetic choice.
//!
//! Checkpoint layout (version 1, little-endian):
//!
//! ```text
//! "FMEM"  magic
//! u32     version = 1
//! u32     tensor count
//! per tensor, in name order:
//!   u16   name length, then the UTF-8 name bytes
//!   u8    rank
//!   u32   extent per dimension
//!   f64   element data, row-major
//! ```

use std::collections::BTreeMap;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::wire::{put_f64, put_u16, put_u32, Cursor};

const MAGIC: &[u8; 4] = b"FMEM";
const VERSION: u32 = 1;

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    map: BTreeMap<String, Tensor>,
}

impl ParamStore {
    pub fn new() -> ParamStore {
        ParamStore::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) {
        self.map.insert(name.into(), t);
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.map.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.map.get_mut(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.map.contains_key(name)
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    /// Name-ordered iteration — the canonical order.
    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.map.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor)> {
        self.map.iter_mut()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.map.keys()
    }

    /// Copy every entry whose name starts with `prefix` out of `src` into
    /// `self`, overwriting existing tensors. Returns how many were copied.
    pub fn overwrite_prefix_from(&mut self, src: &ParamStore, prefix: &str) -> usize {
        let mut n = 0;
        for (name, t) in src.iter() {
            if name.starts_with(prefix) {
                self.map.insert(name.clone(), t.clone());
                n += 1;
            }
        }
        n
    }

    /// Sub-store of entries whose name starts with `prefix`.
    pub fn subset(&self, prefix: &str) -> ParamStore {
        let mut out = ParamStore::new();
        for (name, t) in self.iter() {
            if name.starts_with(prefix) {
                out.insert(name.clone(), t.clone());
            }
        }
        out
    }

    /// Element-wise unweighted mean of several stores with identical keys and
    /// shapes. Computed in anchor + delta form — the first store plus the
    /// mean of the remaining stores' deviations from it — so averaging any
    /// count of identical stores reproduces them bit-exactly (aggregation of
    /// agreeing clients is the identity, for every N, not just powers of two).
    pub fn mean(stores: &[&ParamStore]) -> Result<ParamStore> {
        let first = stores
            .first()
            .ok_or_else(|| Error::data("mean of zero parameter stores"))?;
        let inv = 1.0 / stores.len() as f64;
        let mut out = ParamStore::new();
        let mut column = vec![0.0f64; stores.len().saturating_sub(1)];
        for (name, t0) in first.iter() {
            let mut slices = Vec::with_capacity(stores.len() - 1);
            for s in &stores[1..] {
                let t = s.get(name).ok_or_else(|| {
                    Error::data(format!("store missing parameter `{name}` during aggregation"))
                })?;
                if t.shape() != t0.shape() {
                    return Err(Error::data(format!("shape mismatch for `{name}` during aggregation")));
                }
                slices.push(t.data());
            }
            let base = t0.data();
            let mut acc = vec![0.0f64; t0.numel()];
            for (j, a) in acc.iter_mut().enumerate() {
                for (c, s) in column.iter_mut().zip(&slices) {
                    *c = s[j] - base[j];
                }
                let d = pairwise_sum(&column);
                // Identical stores have all-zero deltas; return the anchor's
                // bits untouched (even for negative-zero entries).
                *a = if d == 0.0 { base[j] } else { base[j] + d * inv };
            }
            out.insert(name.clone(), Tensor::from_vec(t0.shape(), acc)?);
        }
        // Catch stores that have extra keys beyond the first store's.
        for s in stores {
            if s.len() != first.len() {
                return Err(Error::data("parameter stores disagree on key set during aggregation"));
            }
        }
        Ok(out)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut buf = Vec::new();
        buf.extend_from_slice(MAGIC);
        put_u32(&mut buf, VERSION);
        put_u32(&mut buf, self.map.len() as u32);
        for (name, t) in self.iter() {
            put_u16(&mut buf, name.len() as u16);
            buf.extend_from_slice(name.as_bytes());
            buf.push(t.rank() as u8);
            for &d in t.shape() {
                put_u32(&mut buf, d as u32);
            }
            for &v in t.data() {
                put_f64(&mut buf, v);
            }
        }
        buf
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<ParamStore> {
        let mut c = Cursor::new(bytes);
        if c.take(4)? != MAGIC {
            return Err(Error::format("bad checkpoint magic"));
        }
        let version = c.u32()?;
        if version != VERSION {
            return Err(Error::format(format!("unsupported checkpoint version {version}")));
        }
        let count = c.u32()? as usize;
        let mut out = ParamStore::new();
        for _ in 0..count {
            let nlen = c.u16()? as usize;
            let name = std::str::from_utf8(c.take(nlen)?)
                .map_err(|_| Error::format("checkpoint name is not UTF-8"))?
                .to_string();
            let rank = c.u8()? as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(c.u32()? as usize);
            }
            let numel: usize = shape.iter().product();
            let mut data = Vec::with_capacity(numel);
            for _ in 0..numel {
                data.push(c.f64()?);
            }
            if out.contains(&name) {
                return Err(Error::format(format!("duplicate parameter `{name}` in checkpoint")));
            }
            out.insert(name, Tensor::from_vec(&shape, data)?);
        }
        if !c.is_done() {
            return Err(Error::format("trailing bytes after checkpoint payload"));
        }
        Ok(out)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<ParamStore> {
        let bytes = std::fs::read(path)?;
        ParamStore::from_bytes(&bytes)
    }
}

/// Balanced-tree sum: `(a+b)+(c+d)`, not `((a+b)+c)+d`. Order is fixed by
/// slice length alone, so aggregation is deterministic across runs.
fn pairwise_sum(v: &[f64]) -> f64 {
    match v.len() {
        0 => 0.0,
        1 => v[0],
        n => pairwise_sum(&v[..n / 2]) + pairwise_sum(&v[n / 2..]),
    }
}
