//! The `STMW` weight file format.
//!
//! Layout (all integers little-endian): magic `STMW`, version `u32`, tensor
//! count `u32`, then per tensor: name length `u16`, UTF-8 name, dtype `u8`
//! (0 = f32), rank `u8`, extents as `u64`, and the raw f32 payload. Tensors
//! appear in model enumeration order.

use std::io::Write;
use std::path::Path;

use crate::arch::{Model, ModelConfig};
use crate::error::{Error, Result};
use crate::nn::Module;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"STMW";
pub const VERSION: u32 = 1;
const DTYPE_F32: u8 = 0;

/// Ordered named tensor table.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Checkpoint {
    pub tensors: Vec<(String, Tensor)>,
}

impl Checkpoint {
    pub fn from_module(module: &dyn Module) -> Self {
        let mut tensors = Vec::new();
        module.visit("", &mut |name, t| tensors.push((name.to_string(), t.clone())));
        Self { tensors }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        let count = u32::try_from(self.tensors.len()).map_err(|_| Error::Checkpoint("too many tensors".into()))?;
        out.extend_from_slice(&count.to_le_bytes());
        for (name, t) in &self.tensors {
            let len = u16::try_from(name.len()).map_err(|_| Error::Checkpoint(format!("tensor name too long: {name}")))?;
            out.extend_from_slice(&len.to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.push(DTYPE_F32);
            let rank = u8::try_from(t.rank()).map_err(|_| Error::Checkpoint(format!("rank of {name} too large")))?;
            out.push(rank);
            for &d in t.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4, "magic")? != MAGIC {
            return Err(Error::Checkpoint("bad magic: not an STMW checkpoint".into()));
        }
        let version = r.u32("version")?;
        if version != VERSION {
            return Err(Error::Checkpoint(format!("unsupported version {version} (expected {VERSION})")));
        }
        let count = r.u32("tensor count")?;
        let mut tensors = Vec::new();
        for i in 0..count {
            let len = u16::from_le_bytes(r.take(2, "name length")?.try_into().unwrap()) as usize;
            let name = std::str::from_utf8(r.take(len, "name")?)
                .map_err(|_| Error::Checkpoint(format!("tensor {i}: name is not UTF-8")))?
                .to_string();
            let dtype = r.take(1, "dtype")?[0];
            if dtype != DTYPE_F32 {
                return Err(Error::Checkpoint(format!("tensor `{name}`: unsupported dtype code {dtype}")));
            }
            let rank = r.take(1, "rank")?[0] as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                let d = u64::from_le_bytes(r.take(8, "extent")?.try_into().unwrap());
                shape.push(usize::try_from(d).map_err(|_| Error::Checkpoint(format!("tensor `{name}`: extent overflow")))?);
            }
            let numel = shape
                .iter()
                .try_fold(1usize, |acc, &d| acc.checked_mul(d))
                .filter(|&n| n <= bytes.len() / 4)
                .ok_or_else(|| Error::Checkpoint(format!("truncated or corrupt file: tensor `{name}` payload")))?;
            let payload = r.take(numel * 4, &name)?;
            let data = payload.chunks_exact(4).map(|b| f32::from_le_bytes(b.try_into().unwrap())).collect();
            let t = Tensor::new(&shape, data).map_err(|e| Error::Checkpoint(format!("tensor `{name}`: {e}")))?;
            tensors.push((name, t));
        }
        if r.pos != bytes.len() {
            return Err(Error::Checkpoint(format!("{} trailing bytes after last tensor", bytes.len() - r.pos)));
        }
        Ok(Self { tensors })
    }

    /// Writes atomically: a temporary file in the target directory renamed
    /// into place.
    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_bytes()?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }

    /// Copies the table into `module`, which must enumerate exactly the same
    /// names and shapes in the same order.
    pub fn apply_to(&self, module: &mut dyn Module) -> Result<()> {
        let mut i = 0usize;
        let mut err = None;
        module.visit_mut("", &mut |name, t| {
            if err.is_some() {
                return;
            }
            match self.tensors.get(i) {
                None => err = Some(Error::Checkpoint(format!("checkpoint is missing tensor `{name}`"))),
                Some((n, _)) if n != name => {
                    err = Some(Error::Checkpoint(format!("tensor name mismatch: expected `{name}`, found `{n}`")))
                }
                Some((_, src_t)) if src_t.shape() != t.shape() => {
                    err = Some(Error::Checkpoint(format!(
                        "shape mismatch for tensor `{name}`: model expects {:?}, checkpoint has {:?}",
                        t.shape(),
                        src_t.shape()
                    )))
                }
                Some((_, src)) => *t = src.clone(),
            }
            i += 1;
        });
        if let Some(e) = err {
            return Err(e);
        }
        if i != self.tensors.len() {
            return Err(Error::Checkpoint(format!(
                "checkpoint has unexpected tensor `{}`",
                self.tensors[i].0
            )));
        }
        Ok(())
    }
}

/// Builds a model for `config` and fills it from a checkpoint.
pub fn load_model(config: &ModelConfig, checkpoint: &Checkpoint) -> Result<Model> {
    let mut model = Model::build(config, 0)?;
    checkpoint.apply_to(&mut model)?;
    Ok(model)
}

struct Reader<'b> {
    bytes: &'b [u8],
    pos: usize,
}

impl<'b> Reader<'b> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'b [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        match end {
            Some(end) => {
                let s = &self.bytes[self.pos..end];
                self.pos = end;
                Ok(s)
            }
            None => Err(Error::Checkpoint(format!("truncated or corrupt file while reading {what} at byte {}", self.pos))),
        }
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }
}

/// Writes `bytes` to `path` through a temporary file in the same directory.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
    tmp.write_all(bytes)?;
    tmp.as_file().sync_all()?;
    tmp.persist(path).map_err(|e| Error::Io(e.error))?;
    Ok(())
}
