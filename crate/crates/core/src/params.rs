//! Named parameter collections and their on-disk format.
//!
//! A [`ParamSet`] is an ordered, named set of real-valued arrays with value
//! semantics: cloning one yields an independent snapshot. Networks read their
//! weights out of a `ParamSet` by name, the optimizer and EMA walk entries in
//! insertion order, and checkpoints are groups of `ParamSet`s flattened into
//! one file.
//!
//! File format: `MTCK` magic, u32 version, u64 manifest length, JSON manifest
//! (name, shape, dtype, byte offset per entry), then a single little-endian
//! float32 blob. Round-trips are bit-exact.

use std::collections::HashMap;
use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use ndarray::{ArrayD, ArrayView1, ArrayView4, ArrayViewMut1, ArrayViewMut4, Ix1, Ix4, IxDyn};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"MTCK";
const VERSION: u32 = 1;

/// Ordered, named collection of f32 arrays for one network (or one optimizer
/// moment bank). Insertion order is the canonical iteration order.
#[derive(Debug, Clone, Default)]
pub struct ParamSet {
    names: Vec<String>,
    index: HashMap<String, usize>,
    arrays: Vec<ArrayD<f32>>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    /// Number of entries (arrays), not scalars.
    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    /// Total scalar parameter count.
    pub fn num_scalars(&self) -> usize {
        self.arrays.iter().map(|a| a.len()).sum()
    }

    pub fn insert(&mut self, name: impl Into<String>, array: ArrayD<f32>) -> Result<()> {
        let name = name.into();
        if name.contains('/') {
            return Err(Error::validation(format!(
                "parameter name `{name}` may not contain '/' (reserved for checkpoint sections)"
            )));
        }
        if self.index.contains_key(&name) {
            return Err(Error::validation(format!("duplicate parameter `{name}`")));
        }
        self.index.insert(name.clone(), self.arrays.len());
        self.names.push(name);
        self.arrays.push(array);
        Ok(())
    }

    pub fn contains(&self, name: &str) -> bool {
        self.index.contains_key(name)
    }

    pub fn get(&self, name: &str) -> Result<&ArrayD<f32>> {
        self.index
            .get(name)
            .map(|&i| &self.arrays[i])
            .ok_or_else(|| Error::config(format!("missing parameter `{name}`")))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut ArrayD<f32>> {
        match self.index.get(name) {
            Some(&i) => Ok(&mut self.arrays[i]),
            None => Err(Error::config(format!("missing parameter `{name}`"))),
        }
    }

    /// Rank-4 view (conv weights).
    pub fn view4(&self, name: &str) -> Result<ArrayView4<'_, f32>> {
        let a = self.get(name)?;
        a.view().into_dimensionality::<Ix4>().map_err(|_| {
            Error::config(format!(
                "parameter `{name}` has shape {:?}, expected rank 4",
                a.shape()
            ))
        })
    }

    /// Rank-1 view (biases, norm gains).
    pub fn view1(&self, name: &str) -> Result<ArrayView1<'_, f32>> {
        let a = self.get(name)?;
        a.view().into_dimensionality::<Ix1>().map_err(|_| {
            Error::config(format!(
                "parameter `{name}` has shape {:?}, expected rank 1",
                a.shape()
            ))
        })
    }

    pub fn view4_mut(&mut self, name: &str) -> Result<ArrayViewMut4<'_, f32>> {
        let a = self.get_mut(name)?;
        let shape = a.shape().to_vec();
        a.view_mut()
            .into_dimensionality::<Ix4>()
            .map_err(move |_| {
                Error::config(format!("parameter has shape {shape:?}, expected rank 4"))
            })
    }

    pub fn view1_mut(&mut self, name: &str) -> Result<ArrayViewMut1<'_, f32>> {
        let a = self.get_mut(name)?;
        let shape = a.shape().to_vec();
        a.view_mut()
            .into_dimensionality::<Ix1>()
            .map_err(move |_| {
                Error::config(format!("parameter has shape {shape:?}, expected rank 1"))
            })
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.names.iter().map(|s| s.as_str())
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &ArrayD<f32>)> {
        self.names
            .iter()
            .map(|s| s.as_str())
            .zip(self.arrays.iter())
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut ArrayD<f32>)> {
        self.names
            .iter()
            .map(|s| s.as_str())
            .zip(self.arrays.iter_mut())
    }

    /// Same names, same order, same shapes.
    pub fn same_layout(&self, other: &ParamSet) -> bool {
        self.names == other.names
            && self
                .arrays
                .iter()
                .zip(other.arrays.iter())
                .all(|(a, b)| a.shape() == b.shape())
    }

    pub fn check_same_layout(&self, other: &ParamSet, what: &str) -> Result<()> {
        if self.same_layout(other) {
            Ok(())
        } else {
            Err(Error::validation(format!("{what}: parameter layouts differ")))
        }
    }

    /// Zero-filled set with identical layout (gradient / moment banks).
    pub fn zeros_like(&self) -> ParamSet {
        ParamSet {
            names: self.names.clone(),
            index: self.index.clone(),
            arrays: self
                .arrays
                .iter()
                .map(|a| ArrayD::zeros(a.raw_dim()))
                .collect(),
        }
    }

    /// `self += scale * other`, entrywise over identical layouts.
    pub fn add_scaled(&mut self, other: &ParamSet, scale: f32) -> Result<()> {
        self.check_same_layout(other, "add_scaled")?;
        for (a, b) in self.arrays.iter_mut().zip(other.arrays.iter()) {
            a.zip_mut_with(b, |x, y| *x += scale * y);
        }
        Ok(())
    }

    pub fn fill(&mut self, value: f32) {
        for a in self.arrays.iter_mut() {
            a.fill(value);
        }
    }

    /// Bitwise equality of every entry (name, shape and payload).
    pub fn bit_eq(&self, other: &ParamSet) -> bool {
        self.same_layout(other)
            && self.arrays.iter().zip(other.arrays.iter()).all(|(a, b)| {
                a.iter()
                    .zip(b.iter())
                    .all(|(x, y)| x.to_bits() == y.to_bits())
            })
    }

    pub fn all_finite(&self) -> bool {
        self.arrays.iter().all(|a| a.iter().all(|x| x.is_finite()))
    }

    /// Paired entry access by position for optimizer inner loops.
    pub(crate) fn array_at(&self, i: usize) -> &ArrayD<f32> {
        &self.arrays[i]
    }

    pub(crate) fn array_at_mut(&mut self, i: usize) -> &mut ArrayD<f32> {
        &mut self.arrays[i]
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut ckpt = Checkpoint::new();
        ckpt.insert_section("params", self.clone());
        ckpt.save(path)
    }

    pub fn load(path: &Path) -> Result<ParamSet> {
        let ckpt = Checkpoint::load(path)?;
        ckpt.section("params").cloned().ok_or_else(|| {
            Error::config(format!("{}: no `params` section", path.display()))
        })
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct ManifestEntry {
    name: String,
    shape: Vec<usize>,
    dtype: String,
    offset: u64,
}

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    version: u32,
    meta: serde_json::Value,
    entries: Vec<ManifestEntry>,
}

/// A group of named `ParamSet` sections plus a JSON metadata block, written
/// as one manifest + one float32 blob.
#[derive(Debug, Clone, Default)]
pub struct Checkpoint {
    sections: Vec<(String, ParamSet)>,
    pub meta: serde_json::Value,
}

impl Checkpoint {
    pub fn new() -> Self {
        Self {
            sections: Vec::new(),
            meta: serde_json::Value::Null,
        }
    }

    pub fn insert_section(&mut self, name: impl Into<String>, params: ParamSet) {
        self.sections.push((name.into(), params));
    }

    pub fn section(&self, name: &str) -> Option<&ParamSet> {
        self.sections
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, p)| p)
    }

    pub fn section_names(&self) -> impl Iterator<Item = &str> {
        self.sections.iter().map(|(n, _)| n.as_str())
    }

    pub fn required_section(&self, name: &str) -> Result<&ParamSet> {
        self.section(name)
            .ok_or_else(|| Error::config(format!("checkpoint has no `{name}` section")))
    }

    pub fn meta_u64(&self, key: &str) -> Result<u64> {
        self.meta
            .get(key)
            .and_then(|v| v.as_u64())
            .ok_or_else(|| Error::config(format!("checkpoint meta missing `{key}`")))
    }

    pub fn meta_f64(&self, key: &str) -> Result<f64> {
        self.meta
            .get(key)
            .and_then(|v| v.as_f64())
            .ok_or_else(|| Error::config(format!("checkpoint meta missing `{key}`")))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut entries = Vec::new();
        let mut blob: Vec<u8> = Vec::new();
        for (section, params) in &self.sections {
            for (name, array) in params.iter() {
                let offset = blob.len() as u64;
                for v in array.iter() {
                    blob.extend_from_slice(&v.to_le_bytes());
                }
                entries.push(ManifestEntry {
                    name: format!("{section}/{name}"),
                    shape: array.shape().to_vec(),
                    dtype: "f32".to_string(),
                    offset,
                });
            }
        }
        let manifest = Manifest {
            version: VERSION,
            meta: self.meta.clone(),
            entries,
        };
        let manifest_bytes = serde_json::to_vec(&manifest)?;

        if let Some(dir) = path.parent() {
            if !dir.as_os_str().is_empty() {
                fs::create_dir_all(dir)?;
            }
        }
        let mut f = fs::File::create(path)?;
        f.write_all(MAGIC)?;
        f.write_all(&VERSION.to_le_bytes())?;
        f.write_all(&(manifest_bytes.len() as u64).to_le_bytes())?;
        f.write_all(&manifest_bytes)?;
        f.write_all(&blob)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Checkpoint> {
        let mut f = fs::File::open(path)
            .map_err(|e| Error::config(format!("cannot open checkpoint {}: {e}", path.display())))?;
        let mut head = [0u8; 4];
        f.read_exact(&mut head)?;
        if &head != MAGIC {
            return Err(Error::config(format!(
                "{}: not a checkpoint file (bad magic)",
                path.display()
            )));
        }
        let mut v = [0u8; 4];
        f.read_exact(&mut v)?;
        let version = u32::from_le_bytes(v);
        if version != VERSION {
            return Err(Error::config(format!(
                "{}: unsupported checkpoint version {version}",
                path.display()
            )));
        }
        let mut l = [0u8; 8];
        f.read_exact(&mut l)?;
        let manifest_len = u64::from_le_bytes(l) as usize;
        let mut manifest_bytes = vec![0u8; manifest_len];
        f.read_exact(&mut manifest_bytes)?;
        let manifest: Manifest = serde_json::from_slice(&manifest_bytes)?;
        let mut blob = Vec::new();
        f.read_to_end(&mut blob)?;

        let mut ckpt = Checkpoint::new();
        ckpt.meta = manifest.meta;
        for entry in &manifest.entries {
            if entry.dtype != "f32" {
                return Err(Error::config(format!(
                    "entry `{}` has unsupported dtype `{}`",
                    entry.name, entry.dtype
                )));
            }
            let (section, name) = entry.name.split_once('/').ok_or_else(|| {
                Error::config(format!("entry `{}` has no section prefix", entry.name))
            })?;
            let count: usize = entry.shape.iter().product();
            let start = entry.offset as usize;
            let end = start + 4 * count;
            if end > blob.len() {
                return Err(Error::config(format!(
                    "entry `{}` extends past end of blob",
                    entry.name
                )));
            }
            let mut data = Vec::with_capacity(count);
            for chunk in blob[start..end].chunks_exact(4) {
                data.push(f32::from_le_bytes([chunk[0], chunk[1], chunk[2], chunk[3]]));
            }
            let array = ArrayD::from_shape_vec(IxDyn(&entry.shape), data)
                .map_err(|e| Error::config(format!("entry `{}`: {e}", entry.name)))?;
            match ckpt.sections.iter_mut().find(|(n, _)| n == section) {
                Some((_, params)) => params.insert(name, array)?,
                None => {
                    let mut params = ParamSet::new();
                    params.insert(name, array)?;
                    ckpt.sections.push((section.to_string(), params));
                }
            }
        }
        Ok(ckpt)
    }
}
