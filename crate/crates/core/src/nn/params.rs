//! Named parameter storage and the on-disk checkpoint format.
//!
//! A checkpoint is a pair of files: `<stem>.json`, mapping each tensor name
//! to its shape, dtype and byte offset, and `<stem>.bin`, one little-endian
//! blob of 32-bit floats in manifest order.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use candle_core::{DType, Device, Tensor, Var};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone)]
pub struct Params {
    vars: BTreeMap<String, Var>,
    dtype: DType,
    device: Device,
}

impl Params {
    pub fn new(dtype: DType, device: &Device) -> Self {
        Self {
            vars: BTreeMap::new(),
            dtype,
            device: device.clone(),
        }
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    pub fn len(&self) -> usize {
        self.vars.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vars.is_empty()
    }

    pub fn numel(&self) -> usize {
        self.vars.values().map(|v| v.elem_count()).sum()
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) -> Result<()> {
        let t = t.to_dtype(self.dtype)?.to_device(&self.device)?;
        self.vars.insert(name.into(), Var::from_tensor(&t)?);
        Ok(())
    }

    pub fn gaussian<R: Rng>(&mut self, name: &str, shape: &[usize], std: f64, rng: &mut R) -> Result<()> {
        let normal = Normal::new(0.0, std).expect("finite std");
        let n: usize = shape.iter().product();
        let data: Vec<f64> = (0..n).map(|_| normal.sample(rng)).collect();
        self.insert(name, Tensor::from_vec(data, shape, &self.device)?)
    }

    pub fn zeros(&mut self, name: &str, shape: &[usize]) -> Result<()> {
        self.insert(name, Tensor::zeros(shape, self.dtype, &self.device)?)
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.vars
            .get(name)
            .map(|v| v.as_tensor())
            .ok_or_else(|| Error::Missing(format!("parameter `{name}` not found")))
    }

    pub fn var(&self, name: &str) -> Option<&Var> {
        self.vars.get(name)
    }

    /// Overwrites a parameter in place; the shape must not change.
    pub fn set(&self, name: &str, value: &Tensor) -> Result<()> {
        let var = self
            .vars
            .get(name)
            .ok_or_else(|| Error::Missing(format!("parameter `{name}` not found")))?;
        if var.dims() != value.dims() {
            return Err(Error::shape(format!("parameter `{name}`"), var.dims(), value.dims()));
        }
        var.set(&value.to_dtype(self.dtype)?)?;
        Ok(())
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Var)> {
        self.vars.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.vars.keys().map(String::as_str)
    }

    /// Prefixes every name and merges into `dst`.
    pub fn merge_into(&self, prefix: &str, dst: &mut BTreeMap<String, Var>) {
        for (k, v) in &self.vars {
            dst.insert(format!("{prefix}.{k}"), v.clone());
        }
    }

    /// Deep copy with fresh storage.
    pub fn deep_clone(&self) -> Result<Self> {
        let mut out = Self::new(self.dtype, &self.device);
        for (k, v) in &self.vars {
            out.vars.insert(k.clone(), Var::from_tensor(&v.as_tensor().copy()?)?);
        }
        Ok(out)
    }

    pub fn to_dtype(&self, dtype: DType) -> Result<Self> {
        let mut out = Self::new(dtype, &self.device);
        for (k, v) in &self.vars {
            out.insert(k.clone(), v.as_tensor().clone())?;
        }
        Ok(out)
    }

    /// Order-sensitive hash of every parameter's f32 bit pattern.
    pub fn fingerprint(&self) -> Result<u64> {
        fingerprint(self.vars.iter().map(|(k, v)| (k.as_str(), v.as_tensor())))
    }
}

pub fn fingerprint<'a>(tensors: impl Iterator<Item = (&'a str, &'a Tensor)>) -> Result<u64> {
    use std::hash::{Hash, Hasher};
    let mut h = std::collections::hash_map::DefaultHasher::new();
    for (k, t) in tensors {
        k.hash(&mut h);
        for v in t.to_dtype(DType::F64)?.flatten_all()?.to_vec1::<f64>()? {
            v.to_bits().hash(&mut h);
        }
    }
    Ok(h.finish())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub shape: Vec<usize>,
    pub dtype: String,
    pub offset: usize,
}

pub fn blob_paths(stem: &Path) -> (PathBuf, PathBuf) {
    (stem.with_extension("json"), stem.with_extension("bin"))
}

/// Writes named tensors as manifest + f32 blob.
pub fn save_tensors<'a>(stem: &Path, tensors: impl Iterator<Item = (&'a str, &'a Tensor)>) -> Result<()> {
    let (json_path, bin_path) = blob_paths(stem);
    let mut manifest = BTreeMap::new();
    let mut blob: Vec<u8> = Vec::new();
    for (name, t) in tensors {
        let values = t.to_dtype(DType::F32)?.flatten_all()?.to_vec1::<f32>()?;
        manifest.insert(
            name.to_string(),
            TensorEntry {
                shape: t.dims().to_vec(),
                dtype: "f32".into(),
                offset: blob.len(),
            },
        );
        for v in values {
            blob.extend_from_slice(&v.to_le_bytes());
        }
    }
    let json = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    fs::write(&json_path, json).map_err(|e| Error::io(&json_path, e))?;
    fs::write(&bin_path, blob).map_err(|e| Error::io(&bin_path, e))?;
    Ok(())
}

pub fn load_tensors(stem: &Path, device: &Device) -> Result<BTreeMap<String, Tensor>> {
    let (json_path, bin_path) = blob_paths(stem);
    let json = fs::read_to_string(&json_path).map_err(|e| Error::io(&json_path, e))?;
    let manifest: BTreeMap<String, TensorEntry> =
        serde_json::from_str(&json).map_err(|e| Error::format(&json_path, e))?;
    let blob = fs::read(&bin_path).map_err(|e| Error::io(&bin_path, e))?;
    let mut out = BTreeMap::new();
    for (name, entry) in manifest {
        if entry.dtype != "f32" {
            return Err(Error::format(
                &json_path,
                format!("tensor `{name}` has unsupported dtype {}", entry.dtype),
            ));
        }
        let n: usize = entry.shape.iter().product();
        let end = entry.offset + 4 * n;
        let bytes = blob
            .get(entry.offset..end)
            .ok_or_else(|| Error::format(&bin_path, format!("tensor `{name}` runs past end of blob")))?;
        let values: Vec<f32> = bytes
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .collect();
        out.insert(name, Tensor::from_vec(values, entry.shape, device)?);
    }
    Ok(out)
}

impl Params {
    pub fn save(&self, stem: &Path) -> Result<()> {
        save_tensors(stem, self.vars.iter().map(|(k, v)| (k.as_str(), v.as_tensor())))
    }

    /// Loads values into the existing (config-shaped) parameters. Every
    /// parameter must be present with exactly the expected shape.
    pub fn load_from(&self, stem: &Path) -> Result<()> {
        let loaded = load_tensors(stem, &self.device)?;
        self.assign_from(&loaded, "", &blob_paths(stem).0)
    }

    pub(crate) fn assign_from(&self, loaded: &BTreeMap<String, Tensor>, prefix: &str, origin: &Path) -> Result<()> {
        for (name, var) in &self.vars {
            let key = if prefix.is_empty() {
                name.clone()
            } else {
                format!("{prefix}.{name}")
            };
            let t = loaded
                .get(&key)
                .ok_or_else(|| Error::format(origin, format!("missing tensor `{key}`")))?;
            if t.dims() != var.dims() {
                return Err(Error::format(
                    origin,
                    format!(
                        "tensor `{key}` has shape {:?}, config expects {:?}",
                        t.dims(),
                        var.dims()
                    ),
                ));
            }
            var.set(&t.to_dtype(self.dtype)?)?;
        }
        Ok(())
    }
}
