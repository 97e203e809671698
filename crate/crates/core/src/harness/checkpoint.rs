//! Versioned binary checkpoint container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! "LVCK" | version u32 | stage u8 | dtype u8 | step u64 | seed u64 | adam_t u64
//! config  : u64 length + UTF-8 TOML snapshot
//! blobs   : u32 count, each  u16 name-len + name + u64 len + bytes
//! tensors : u32 count, each  u16 name-len + name + u8 ndim + u64 dims...
//!           + element data (little-endian, dtype-width floats)
//! ```
//!
//! Tensor order is the parameter-set creation order, so saving, loading and
//! saving again produces byte-identical files. Codebook entries and EMA
//! statistics are ordinary tensor entries (32-bit floats under the default
//! f32 profile).

use super::config::Stage;
use crate::error::{Error, Result};
use crate::nn::ParamSet;
use crate::quantizer::Codebook;
use crate::scalar::{Dtype, Scalar};
use ndarray::{ArrayD, IxDyn};
use std::io::{Read, Write};
use std::path::Path;

const MAGIC: &[u8; 4] = b"LVCK";
const VERSION: u32 = 1;

#[derive(Debug, Clone)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Raw little-endian element bytes.
    pub data: Vec<u8>,
}

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub stage: Stage,
    pub dtype: Dtype,
    pub step: u64,
    pub seed: u64,
    pub adam_t: u64,
    pub config_toml: String,
    pub blobs: Vec<(String, Vec<u8>)>,
    pub tensors: Vec<TensorEntry>,
}

impl Checkpoint {
    pub fn new(stage: Stage, dtype: Dtype, seed: u64) -> Self {
        Checkpoint {
            stage,
            dtype,
            step: 0,
            seed,
            adam_t: 0,
            config_toml: String::new(),
            blobs: Vec::new(),
            tensors: Vec::new(),
        }
    }

    pub fn put_array<T: Scalar>(&mut self, name: &str, array: &ArrayD<T>) {
        assert_eq!(T::DTYPE, self.dtype, "tensor dtype mismatch");
        let std = crate::tensor::ops::standardize(array);
        let mut data = Vec::with_capacity(std.len() * T::byte_width());
        for &x in std.as_slice().unwrap() {
            x.write_le(&mut data);
        }
        self.tensors.push(TensorEntry {
            name: name.to_string(),
            shape: array.shape().to_vec(),
            data,
        });
    }

    pub fn get_array<T: Scalar>(&self, name: &str) -> Result<ArrayD<T>> {
        if T::DTYPE != self.dtype {
            return Err(Error::format(format!(
                "checkpoint dtype does not match requested scalar type for {name}"
            )));
        }
        let entry = self
            .tensors
            .iter()
            .find(|t| t.name == name)
            .ok_or_else(|| Error::format(format!("checkpoint missing tensor {name}")))?;
        let w = T::byte_width();
        let n: usize = entry.shape.iter().product();
        if entry.data.len() != n * w {
            return Err(Error::format(format!("tensor {name}: wrong byte count")));
        }
        let values: Vec<T> = entry.data.chunks_exact(w).map(T::read_le).collect();
        Ok(ArrayD::from_shape_vec(IxDyn(&entry.shape), values).unwrap())
    }

    pub fn put_blob(&mut self, name: &str, data: Vec<u8>) {
        self.blobs.push((name.to_string(), data));
    }

    pub fn get_blob(&self, name: &str) -> Result<&[u8]> {
        self.blobs
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, d)| d.as_slice())
            .ok_or_else(|| Error::format(format!("checkpoint missing blob {name}")))
    }

    pub fn has_blob(&self, name: &str) -> bool {
        self.blobs.iter().any(|(n, _)| n == name)
    }

    /// Store parameter values and optimizer moments under a prefix.
    pub fn put_params<T: Scalar>(&mut self, prefix: &str, params: &ParamSet<T>) {
        for (name, p) in params.iter() {
            let p = p.borrow();
            self.put_array(&format!("{prefix}param.{name}"), &p.value);
            self.put_array(&format!("{prefix}adam_m.{name}"), &p.m);
            self.put_array(&format!("{prefix}adam_v.{name}"), &p.v);
        }
    }

    pub fn restore_params<T: Scalar>(&self, prefix: &str, params: &ParamSet<T>) -> Result<()> {
        for (name, p) in params.iter() {
            let mut p = p.borrow_mut();
            p.value = self.get_array(&format!("{prefix}param.{name}"))?;
            p.m = self.get_array(&format!("{prefix}adam_m.{name}"))?;
            p.v = self.get_array(&format!("{prefix}adam_v.{name}"))?;
        }
        Ok(())
    }

    pub fn put_codebook<T: Scalar>(&mut self, prefix: &str, cb: &Codebook<T>) {
        self.put_array(
            &format!("{prefix}codebook.entries"),
            &cb.entries.clone().into_dyn(),
        );
        self.put_array(
            &format!("{prefix}codebook.ema_cluster_size"),
            &cb.ema_cluster_size.clone().into_dyn(),
        );
        self.put_array(
            &format!("{prefix}codebook.ema_embed_sum"),
            &cb.ema_embed_sum.clone().into_dyn(),
        );
    }

    pub fn restore_codebook<T: Scalar>(&self, prefix: &str, cb: &mut Codebook<T>) -> Result<()> {
        cb.entries = self
            .get_array(&format!("{prefix}codebook.entries"))?
            .into_dimensionality()
            .map_err(|_| Error::format("codebook.entries: wrong rank"))?;
        cb.ema_cluster_size = self
            .get_array(&format!("{prefix}codebook.ema_cluster_size"))?
            .into_dimensionality()
            .map_err(|_| Error::format("codebook.ema_cluster_size: wrong rank"))?;
        cb.ema_embed_sum = self
            .get_array(&format!("{prefix}codebook.ema_embed_sum"))?
            .into_dimensionality()
            .map_err(|_| Error::format("codebook.ema_embed_sum: wrong rank"))?;
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.push(self.stage.tag());
        out.push(self.dtype.tag());
        out.extend_from_slice(&self.step.to_le_bytes());
        out.extend_from_slice(&self.seed.to_le_bytes());
        out.extend_from_slice(&self.adam_t.to_le_bytes());
        let cfg = self.config_toml.as_bytes();
        out.extend_from_slice(&(cfg.len() as u64).to_le_bytes());
        out.extend_from_slice(cfg);
        out.extend_from_slice(&(self.blobs.len() as u32).to_le_bytes());
        for (name, data) in &self.blobs {
            out.extend_from_slice(&(name.len() as u16).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(data.len() as u64).to_le_bytes());
            out.extend_from_slice(data);
        }
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for t in &self.tensors {
            out.extend_from_slice(&(t.name.len() as u16).to_le_bytes());
            out.extend_from_slice(t.name.as_bytes());
            out.push(t.shape.len() as u8);
            for &d in &t.shape {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            out.extend_from_slice(&t.data);
        }
        out
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent)?;
        }
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        f.write_all(&self.to_bytes())?;
        f.flush()?;
        Ok(())
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(Error::format("checkpoint: bad magic"));
        }
        let version = u32::from_le_bytes(r.take(4)?.try_into().unwrap());
        if version != VERSION {
            return Err(Error::format(format!(
                "checkpoint: unsupported version {version}"
            )));
        }
        let stage = Stage::from_tag(r.take(1)?[0])
            .ok_or_else(|| Error::format("checkpoint: bad stage tag"))?;
        let dtype = Dtype::from_tag(r.take(1)?[0])
            .ok_or_else(|| Error::format("checkpoint: bad dtype tag"))?;
        let step = r.u64()?;
        let seed = r.u64()?;
        let adam_t = r.u64()?;
        let cfg_len = r.u64()? as usize;
        let config_toml = String::from_utf8(r.take(cfg_len)?.to_vec())
            .map_err(|_| Error::format("checkpoint: config not UTF-8"))?;
        let n_blobs = u32::from_le_bytes(r.take(4)?.try_into().unwrap());
        let mut blobs = Vec::with_capacity(n_blobs as usize);
        for _ in 0..n_blobs {
            let name = r.name()?;
            let len = r.u64()? as usize;
            blobs.push((name, r.take(len)?.to_vec()));
        }
        let n_tensors = u32::from_le_bytes(r.take(4)?.try_into().unwrap());
        let width = match dtype {
            Dtype::F32 => 4,
            Dtype::F64 => 8,
        };
        let mut tensors = Vec::with_capacity(n_tensors as usize);
        for _ in 0..n_tensors {
            let name = r.name()?;
            let ndim = r.take(1)?[0] as usize;
            let mut shape = Vec::with_capacity(ndim);
            for _ in 0..ndim {
                shape.push(r.u64()? as usize);
            }
            let numel: usize = shape.iter().product();
            let data = r.take(numel * width)?.to_vec();
            tensors.push(TensorEntry { name, shape, data });
        }
        Ok(Checkpoint {
            stage,
            dtype,
            step,
            seed,
            adam_t,
            config_toml,
            blobs,
            tensors,
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)?.read_to_end(&mut bytes)?;
        Self::from_bytes(&bytes)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::format("checkpoint: truncated file"));
        }
        let out = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn name(&mut self) -> Result<String> {
        let len = u16::from_le_bytes(self.take(2)?.try_into().unwrap()) as usize;
        String::from_utf8(self.take(len)?.to_vec())
            .map_err(|_| Error::format("checkpoint: name not UTF-8"))
    }
}

/// Hex SHA-256 of a file (used by the surgery-leaves-source-intact audit).
pub fn file_sha256(path: &Path) -> Result<String> {
    use sha2::{Digest, Sha256};
    let mut hasher = Sha256::new();
    let mut f = std::fs::File::open(path)?;
    std::io::copy(&mut f, &mut hasher)?;
    Ok(hex::encode(hasher.finalize()))
}
