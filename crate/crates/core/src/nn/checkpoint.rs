//! Versioned binary checkpoint container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic    8 bytes  "PPGCKPT\0"
//! version  u32
//! hdr_len  u32, followed by hdr_len bytes of UTF-8 JSON (model config)
//! count    u32
//! count × { name_len u32, name bytes, ndim u32, ndim × u32 dims, numel × f32 payload }
//! ```

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use serde_json::Value;

use super::ParamStore;
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 8] = b"PPGCKPT\0";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub header: Value,
    pub tensors: Vec<Tensor>,
}

impl Checkpoint {
    pub fn new(header: Value) -> Self {
        Self { header, tensors: Vec::new() }
    }

    pub fn push(&mut self, name: impl Into<String>, shape: &[usize], data: &[f64]) {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        self.tensors.push(Tensor {
            name: name.into(),
            shape: shape.to_vec(),
            data: data.iter().map(|&v| v as f32).collect(),
        });
    }

    /// Adds every parameter of `store`, each name prefixed with `prefix`.
    pub fn push_store(&mut self, prefix: &str, store: &ParamStore) {
        for spec in store.specs() {
            let data = &store.values()[spec.offset..spec.offset + spec.numel()];
            self.push(format!("{prefix}{}", spec.name), &spec.shape, data);
        }
    }

    pub fn tensor(&self, name: &str) -> Option<&Tensor> {
        self.tensors.iter().find(|t| t.name == name)
    }

    /// Copies tensors named `prefix + param` into `store`, checking shapes.
    pub fn load_store(&self, prefix: &str, store: &mut ParamStore) -> Result<()> {
        let specs = store.specs().to_vec();
        let values = store.values_mut();
        for spec in specs {
            let name = format!("{prefix}{}", spec.name);
            let t = self
                .tensor(&name)
                .ok_or_else(|| Error::Format(format!("checkpoint is missing tensor `{name}`")))?;
            if t.shape != spec.shape {
                return Err(Error::Format(format!(
                    "tensor `{name}` has shape {:?}, model expects {:?}",
                    t.shape, spec.shape
                )));
            }
            for (dst, &src) in values[spec.offset..spec.offset + spec.numel()].iter_mut().zip(&t.data) {
                *dst = src as f64;
            }
        }
        Ok(())
    }

    pub fn load_vec(&self, name: &str, dst: &mut [f64]) -> Result<()> {
        let t = self
            .tensor(name)
            .ok_or_else(|| Error::Format(format!("checkpoint is missing tensor `{name}`")))?;
        if t.data.len() != dst.len() {
            return Err(Error::Format(format!("tensor `{name}` has {} values, expected {}", t.data.len(), dst.len())));
        }
        for (d, &s) in dst.iter_mut().zip(&t.data) {
            *d = s as f64;
        }
        Ok(())
    }

    pub fn write_to<W: Write>(&self, mut w: W) -> Result<()> {
        w.write_all(MAGIC)?;
        w.write_all(&VERSION.to_le_bytes())?;
        let hdr = serde_json::to_vec(&self.header).map_err(|e| Error::Format(e.to_string()))?;
        w.write_all(&(hdr.len() as u32).to_le_bytes())?;
        w.write_all(&hdr)?;
        w.write_all(&(self.tensors.len() as u32).to_le_bytes())?;
        for t in &self.tensors {
            w.write_all(&(t.name.len() as u32).to_le_bytes())?;
            w.write_all(t.name.as_bytes())?;
            w.write_all(&(t.shape.len() as u32).to_le_bytes())?;
            for &d in &t.shape {
                w.write_all(&(d as u32).to_le_bytes())?;
            }
            let mut buf = Vec::with_capacity(t.data.len() * 4);
            for v in &t.data {
                buf.extend_from_slice(&v.to_le_bytes());
            }
            w.write_all(&buf)?;
        }
        Ok(())
    }

    pub fn read_from<R: Read>(mut r: R) -> Result<Self> {
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(Error::Format("not a checkpoint file (bad magic)".into()));
        }
        let version = read_u32(&mut r)?;
        if version != VERSION {
            return Err(Error::Format(format!("unsupported checkpoint version {version}")));
        }
        let hdr_len = read_u32(&mut r)? as usize;
        let mut hdr = vec![0u8; hdr_len];
        r.read_exact(&mut hdr)?;
        let header = serde_json::from_slice(&hdr).map_err(|e| Error::Format(format!("checkpoint header: {e}")))?;
        let count = read_u32(&mut r)? as usize;
        let mut tensors = Vec::with_capacity(count);
        for _ in 0..count {
            let name_len = read_u32(&mut r)? as usize;
            let mut name = vec![0u8; name_len];
            r.read_exact(&mut name)?;
            let name = String::from_utf8(name).map_err(|_| Error::Format("tensor name is not UTF-8".into()))?;
            let ndim = read_u32(&mut r)? as usize;
            let shape = (0..ndim).map(|_| read_u32(&mut r).map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let numel: usize = shape.iter().product();
            let mut raw = vec![0u8; numel * 4];
            r.read_exact(&mut raw)?;
            let data = raw.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
            tensors.push(Tensor { name, shape, data });
        }
        Ok(Self { header, tensors })
    }

    /// Writes to a sibling temp file, then renames over `path`.
    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            if !dir.as_os_str().is_empty() {
                fs::create_dir_all(dir)?;
            }
        }
        let tmp = path.with_extension("tmp");
        {
            let mut f = std::io::BufWriter::new(fs::File::create(&tmp)?);
            self.write_to(&mut f)?;
            f.flush()?;
        }
        fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let f = fs::File::open(path).map_err(|e| match e.kind() {
            std::io::ErrorKind::NotFound => Error::DataNotFound(path.display().to_string()),
            _ => Error::Io(e),
        })?;
        Self::read_from(std::io::BufReader::new(f))
    }
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}
