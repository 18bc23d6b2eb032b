//! Named parameter tensors and their binary serialization.

use std::collections::BTreeMap;
use std::io::{Read, Write};

use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Matrix;

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    tensors: BTreeMap<String, Matrix>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Matrix) {
        self.tensors.insert(name.into(), value);
    }

    pub fn get(&self, name: &str) -> Option<&Matrix> {
        self.tensors.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Matrix> {
        self.tensors.get_mut(name)
    }

    /// Panics on unknown names; parameter names are fixed by the model layout.
    pub fn expect(&self, name: &str) -> &Matrix {
        self.tensors
            .get(name)
            .unwrap_or_else(|| panic!("missing parameter {name}"))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Matrix)> {
        self.tensors.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Matrix)> {
        self.tensors.iter_mut()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.tensors.keys()
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.values().map(|m| m.data().len()).sum()
    }

    /// Subset of tensors whose names start with `prefix`.
    pub fn with_prefix(&self, prefix: &str) -> ParamStore {
        ParamStore {
            tensors: self
                .tensors
                .iter()
                .filter(|(k, _)| k.starts_with(prefix))
                .map(|(k, v)| (k.clone(), v.clone()))
                .collect(),
        }
    }

    /// Registers every tensor on the tape.
    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> Bound {
        Bound {
            vars: self
                .tensors
                .iter()
                .map(|(k, v)| (k.clone(), tape.leaf(v.clone(), trainable)))
                .collect(),
        }
    }

    /// FNV-1a over names and raw bits; used to detect mutation.
    pub fn checksum(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        let mut feed = |bytes: &[u8]| {
            for b in bytes {
                h ^= u64::from(*b);
                h = h.wrapping_mul(0x0100_0000_01b3);
            }
        };
        for (k, v) in &self.tensors {
            feed(k.as_bytes());
            for x in v.data() {
                feed(&x.to_bits().to_le_bytes());
            }
        }
        h
    }
}

/// Tape variables for a bound [`ParamStore`].
#[derive(Debug, Clone, Default)]
pub struct Bound {
    vars: BTreeMap<String, Var>,
}

impl Bound {
    pub fn var(&self, name: &str) -> Var {
        *self
            .vars
            .get(name)
            .unwrap_or_else(|| panic!("parameter {name} not bound"))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Var)> {
        self.vars.iter()
    }

    /// Merges another binding (names must not collide).
    pub fn extend(&mut self, other: Bound) {
        self.vars.extend(other.vars);
    }
}

const MAGIC: &[u8; 8] = b"TGMAECK1";

/// Writes named tensor groups: `magic, count, {name, rows, cols, f64 LE data}*`.
pub fn write_tensors<W: Write>(w: &mut W, groups: &[(&str, &ParamStore)]) -> Result<()> {
    w.write_all(MAGIC)?;
    let count: usize = groups.iter().map(|(_, s)| s.len()).sum();
    w.write_all(&(count as u64).to_le_bytes())?;
    for (prefix, store) in groups {
        for (name, m) in store.iter() {
            let full = format!("{prefix}/{name}");
            w.write_all(&(full.len() as u64).to_le_bytes())?;
            w.write_all(full.as_bytes())?;
            w.write_all(&(m.rows() as u64).to_le_bytes())?;
            w.write_all(&(m.cols() as u64).to_le_bytes())?;
            for x in m.data() {
                w.write_all(&x.to_le_bytes())?;
            }
        }
    }
    Ok(())
}

/// Inverse of [`write_tensors`]: returns one store per prefix.
pub fn read_tensors<R: Read>(r: &mut R) -> Result<BTreeMap<String, ParamStore>> {
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::Checkpoint("bad magic".into()));
    }
    let read_u64 = |r: &mut R| -> Result<u64> {
        let mut b = [0u8; 8];
        r.read_exact(&mut b)?;
        Ok(u64::from_le_bytes(b))
    };
    let count = read_u64(r)?;
    let mut out: BTreeMap<String, ParamStore> = BTreeMap::new();
    for _ in 0..count {
        let len = read_u64(r)? as usize;
        let mut name = vec![0u8; len];
        r.read_exact(&mut name)?;
        let name = String::from_utf8(name).map_err(|e| Error::Checkpoint(e.to_string()))?;
        let rows = read_u64(r)? as usize;
        let cols = read_u64(r)? as usize;
        let mut data = Vec::with_capacity(rows * cols);
        let mut b = [0u8; 8];
        for _ in 0..rows * cols {
            r.read_exact(&mut b)?;
            data.push(f64::from_le_bytes(b));
        }
        let (prefix, rest) = name
            .split_once('/')
            .ok_or_else(|| Error::Checkpoint(format!("tensor name {name} lacks a group")))?;
        out.entry(prefix.to_string())
            .or_default()
            .insert(rest, Matrix::from_vec(rows, cols, data));
    }
    Ok(out)
}
