//! Versioned binary tensor archive: a magic header, a JSON metadata block,
//! and named little-endian tensor entries. The byte layout is fixed so
//! archives are bit-stable across platforms.

use crate::error::{Error, Result};
use crate::nn::ParamStore;
use crate::scalar::{Dtype, Scalar, Tensor};
use ndarray::IxDyn;
use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

const MAGIC: &[u8; 4] = b"VTCK";
const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct TensorEntry {
    pub dtype: Dtype,
    pub shape: Vec<usize>,
    /// raw little-endian element bytes
    pub data: Vec<u8>,
}

/// In-memory checkpoint: metadata plus named tensors, stored sorted by
/// name so serialization is order-independent.
#[derive(Debug, Clone, Default)]
pub struct CheckpointArchive {
    pub metadata: serde_json::Value,
    pub tensors: BTreeMap<String, TensorEntry>,
}

impl CheckpointArchive {
    pub fn new(metadata: serde_json::Value) -> Self {
        CheckpointArchive {
            metadata,
            tensors: BTreeMap::new(),
        }
    }

    pub fn put<F: Scalar>(&mut self, name: impl Into<String>, t: &Tensor<F>) {
        let mut data = Vec::with_capacity(t.len() * F::DTYPE.size());
        for v in t.iter() {
            match F::DTYPE {
                Dtype::F32 => data.extend_from_slice(&(v.to_f64_() as f32).to_le_bytes()),
                Dtype::F64 => data.extend_from_slice(&v.to_f64_().to_le_bytes()),
            }
        }
        self.tensors.insert(
            name.into(),
            TensorEntry {
                dtype: F::DTYPE,
                shape: t.shape().to_vec(),
                data,
            },
        );
    }

    pub fn get<F: Scalar>(&self, name: &str) -> Result<Tensor<F>> {
        let e = self
            .tensors
            .get(name)
            .ok_or_else(|| Error::Checkpoint(format!("missing tensor '{name}'")))?;
        if e.dtype != F::DTYPE {
            return Err(Error::Checkpoint(format!(
                "tensor '{name}' has dtype code {}, expected {}",
                e.dtype.code(),
                F::DTYPE.code()
            )));
        }
        let n: usize = e.shape.iter().product();
        let mut v = Vec::with_capacity(n);
        let sz = e.dtype.size();
        for i in 0..n {
            let b = &e.data[i * sz..(i + 1) * sz];
            let x = match e.dtype {
                Dtype::F32 => f32::from_le_bytes(b.try_into().unwrap()) as f64,
                Dtype::F64 => f64::from_le_bytes(b.try_into().unwrap()),
            };
            v.push(F::of(x));
        }
        Tensor::from_shape_vec(IxDyn(&e.shape), v)
            .map_err(|_| Error::Checkpoint(format!("tensor '{name}' shape/data mismatch")))
    }

    /// Store every parameter under `prefix.name`.
    pub fn put_params<F: Scalar>(&mut self, prefix: &str, params: &ParamStore<F>) {
        for (name, t) in params.iter() {
            self.put(format!("{prefix}.{name}"), t);
        }
    }

    /// Load parameters back into an existing store with matching names and
    /// shapes (the store defines the expected structure).
    pub fn load_params<F: Scalar>(&self, prefix: &str, params: &mut ParamStore<F>) -> Result<()> {
        let mut loaded = Vec::new();
        for (name, t) in params.iter() {
            let full = format!("{prefix}.{name}");
            let stored = self.get::<F>(&full)?;
            if stored.shape() != t.shape() {
                return Err(Error::Checkpoint(format!(
                    "tensor '{full}' shape {:?} does not match expected {:?}",
                    stored.shape(),
                    t.shape()
                )));
            }
            loaded.push((name.to_string(), stored));
        }
        for (name, t) in params.tensors_mut() {
            let (_, stored) = loaded.iter().find(|(n, _)| n == name).unwrap();
            *t = stored.clone();
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut buf = Vec::new();
        buf.extend_from_slice(MAGIC);
        buf.extend_from_slice(&VERSION.to_le_bytes());
        let meta = serde_json::to_vec(&self.metadata)?;
        buf.extend_from_slice(&(meta.len() as u64).to_le_bytes());
        buf.extend_from_slice(&meta);
        buf.extend_from_slice(&(self.tensors.len() as u64).to_le_bytes());
        for (name, e) in &self.tensors {
            let nb = name.as_bytes();
            buf.extend_from_slice(&(nb.len() as u16).to_le_bytes());
            buf.extend_from_slice(nb);
            buf.push(e.dtype.code());
            buf.push(e.shape.len() as u8);
            for &d in &e.shape {
                buf.extend_from_slice(&(d as u64).to_le_bytes());
            }
            buf.extend_from_slice(&e.data);
        }
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&buf).map_err(|e| Error::io(path, e))?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut buf = Vec::new();
        std::fs::File::open(path)
            .and_then(|mut f| f.read_to_end(&mut buf))
            .map_err(|e| Error::io(path, e))?;
        let mut pos = 0usize;
        let take = |pos: &mut usize, n: usize| -> Result<&[u8]> {
            if *pos + n > buf.len() {
                return Err(Error::Checkpoint("truncated archive".into()));
            }
            let s = &buf[*pos..*pos + n];
            *pos += n;
            Ok(s)
        };
        if take(&mut pos, 4)? != MAGIC {
            return Err(Error::Checkpoint("bad magic".into()));
        }
        let version = u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap());
        if version != VERSION {
            return Err(Error::Checkpoint(format!("unsupported version {version}")));
        }
        let meta_len = u64::from_le_bytes(take(&mut pos, 8)?.try_into().unwrap()) as usize;
        let metadata: serde_json::Value = serde_json::from_slice(take(&mut pos, meta_len)?)?;
        let n_tensors = u64::from_le_bytes(take(&mut pos, 8)?.try_into().unwrap()) as usize;
        let mut tensors = BTreeMap::new();
        for _ in 0..n_tensors {
            let name_len = u16::from_le_bytes(take(&mut pos, 2)?.try_into().unwrap()) as usize;
            let name = String::from_utf8(take(&mut pos, name_len)?.to_vec())
                .map_err(|_| Error::Checkpoint("non-utf8 tensor name".into()))?;
            let dtype = Dtype::from_code(take(&mut pos, 1)?[0])
                .ok_or_else(|| Error::Checkpoint("unknown dtype code".into()))?;
            let ndim = take(&mut pos, 1)?[0] as usize;
            let mut shape = Vec::with_capacity(ndim);
            for _ in 0..ndim {
                shape.push(u64::from_le_bytes(take(&mut pos, 8)?.try_into().unwrap()) as usize);
            }
            let n: usize = shape.iter().product();
            let data = take(&mut pos, n * dtype.size())?.to_vec();
            tensors.insert(name, TensorEntry { dtype, shape, data });
        }
        if pos != buf.len() {
            return Err(Error::Checkpoint("trailing bytes after archive".into()));
        }
        Ok(CheckpointArchive { metadata, tensors })
    }
}
