//! Binary checkpoint: config snapshot, step counter, latent scale and named f32 tensors.
//!
//! Layout (little-endian): `DFCK`, u32 version, u32 config length, config
//! text, u64 global step, u8 scale flag, f64 scale, u32 tensor count, then per
//! tensor u32 name length, name, u32 rank, u64 dims, f32 values.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use crate::error::{bail, Error, Result};
use crate::nn::Module;
use crate::optim::{AdamW, Moments};

pub const MAGIC: &[u8; 4] = b"DFCK";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct StoredTensor {
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Checkpoint {
    pub config_text: String,
    pub global_step: u64,
    pub latent_scale: Option<f64>,
    pub tensors: BTreeMap<String, StoredTensor>,
}

fn truncated(what: &str) -> impl Fn(std::io::Error) -> Error + '_ {
    move |e| {
        if e.kind() == std::io::ErrorKind::UnexpectedEof {
            Error::Format(format!("checkpoint truncated while reading {what}"))
        } else {
            Error::Io(e)
        }
    }
}

fn read_u32(r: &mut impl Read, what: &str) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b).map_err(truncated(what))?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64(r: &mut impl Read, what: &str) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b).map_err(truncated(what))?;
    Ok(u64::from_le_bytes(b))
}

fn read_bytes(r: &mut impl Read, len: usize, what: &str) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    r.take(len as u64).read_to_end(&mut buf)?;
    if buf.len() != len {
        bail!(Format, "checkpoint truncated while reading {what}");
    }
    Ok(buf)
}

fn utf8(bytes: Vec<u8>, what: &str) -> Result<String> {
    String::from_utf8(bytes).map_err(|_| Error::Format(format!("checkpoint {what} is not UTF-8")))
}

impl Checkpoint {
    pub fn write_to(&self, w: &mut impl Write) -> Result<()> {
        w.write_all(MAGIC)?;
        w.write_all(&VERSION.to_le_bytes())?;
        w.write_all(&(self.config_text.len() as u32).to_le_bytes())?;
        w.write_all(self.config_text.as_bytes())?;
        w.write_all(&self.global_step.to_le_bytes())?;
        w.write_all(&[self.latent_scale.is_some() as u8])?;
        w.write_all(&self.latent_scale.unwrap_or(0.0).to_le_bytes())?;
        w.write_all(&(self.tensors.len() as u32).to_le_bytes())?;
        for (name, t) in &self.tensors {
            w.write_all(&(name.len() as u32).to_le_bytes())?;
            w.write_all(name.as_bytes())?;
            w.write_all(&(t.shape.len() as u32).to_le_bytes())?;
            for &d in &t.shape {
                w.write_all(&(d as u64).to_le_bytes())?;
            }
            let mut buf = Vec::with_capacity(t.data.len() * 4);
            for v in &t.data {
                buf.extend_from_slice(&v.to_le_bytes());
            }
            w.write_all(&buf)?;
        }
        Ok(())
    }

    pub fn read_from(r: &mut impl Read) -> Result<Self> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic).map_err(truncated("magic"))?;
        if &magic != MAGIC {
            bail!(Format, "not a checkpoint (magic {magic:?})");
        }
        let version = read_u32(r, "version")?;
        if version != VERSION {
            bail!(Format, "unsupported checkpoint version {version} (expected {VERSION})");
        }
        let len = read_u32(r, "config length")? as usize;
        let config_text = utf8(read_bytes(r, len, "config")?, "config")?;
        let global_step = read_u64(r, "global step")?;
        let mut flag = [0u8; 1];
        r.read_exact(&mut flag).map_err(truncated("scale flag"))?;
        let scale = f64::from_bits(read_u64(r, "latent scale")?);
        let latent_scale = match flag[0] {
            0 => None,
            1 => Some(scale),
            f => bail!(Format, "bad latent scale flag {f}"),
        };
        let count = read_u32(r, "tensor count")?;
        let mut tensors = BTreeMap::new();
        for _ in 0..count {
            let len = read_u32(r, "tensor name")? as usize;
            let name = utf8(read_bytes(r, len, "tensor name")?, "tensor name")?;
            let rank = read_u32(r, "tensor rank")? as usize;
            if rank > 8 {
                bail!(Format, "tensor {name} has implausible rank {rank}");
            }
            let shape = (0..rank).map(|_| read_u64(r, "tensor shape").map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let numel = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d));
            let Some(numel) = numel.and_then(|n| n.checked_mul(4)) else {
                bail!(Format, "tensor {name} has implausible shape {shape:?}");
            };
            let bytes = read_bytes(r, numel, &name)?;
            let data = bytes.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
            tensors.insert(name, StoredTensor { shape, data });
        }
        let mut rest = [0u8; 1];
        if r.read(&mut rest)? != 0 {
            bail!(Format, "trailing bytes after the last tensor");
        }
        Ok(Self { config_text, global_step, latent_scale, tensors })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
        self.write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = std::fs::File::open(path).map_err(|e| Error::Input(format!("{}: {e}", path.display())))?;
        Self::read_from(&mut std::io::BufReader::new(file)).map_err(|e| match e {
            Error::Format(m) => Error::Format(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    /// Stores every parameter of `module` under `prefix.`.
    pub fn insert_module(&mut self, prefix: &str, module: &dyn Module<f32>) {
        module.visit_params(prefix, &mut |name, t| {
            self.tensors.insert(name, StoredTensor { shape: t.shape().to_vec(), data: t.data().to_vec() });
        });
    }

    /// Overwrites the parameters of `module` with the tensors under `prefix.`.
    pub fn load_module(&self, prefix: &str, module: &mut dyn Module<f32>) -> Result<()> {
        let mut problem = None;
        module.visit_params_mut(prefix, &mut |name, t| match self.tensors.get(&name) {
            Some(s) if s.shape == t.shape() => t.update_data(|d| d.copy_from_slice(&s.data)),
            Some(s) => problem = Some(format!("{name} has shape {:?}, model expects {:?}", s.shape, t.shape())),
            None => problem = Some(format!("{name} is missing")),
        });
        match problem {
            Some(p) => bail!(Input, "checkpoint does not match the model: {p}"),
            None => Ok(()),
        }
    }

    pub fn insert_optimizer(&mut self, opt: &AdamW<f32>) {
        for (name, mo) in opt.state() {
            for (kind, vals) in [("m", &mo.m), ("v", &mo.v)] {
                self.tensors
                    .insert(format!("opt.{kind}.{name}"), StoredTensor { shape: mo.shape.clone(), data: vals.clone() });
            }
        }
    }

    /// Moments saved by [`insert_optimizer`](Self::insert_optimizer).
    pub fn optimizer_state(&self) -> Result<BTreeMap<String, Moments<f32>>> {
        let mut out = BTreeMap::new();
        for (key, m) in &self.tensors {
            let Some(name) = key.strip_prefix("opt.m.") else { continue };
            let Some(v) = self.tensors.get(&format!("opt.v.{name}")) else {
                bail!(Format, "optimizer moment {key} has no matching second moment");
            };
            out.insert(name.to_string(), Moments { shape: m.shape.clone(), m: m.data.clone(), v: v.data.clone() });
        }
        Ok(out)
    }

    pub fn has_prefix(&self, prefix: &str) -> bool {
        let p = format!("{prefix}.");
        self.tensors.keys().any(|k| k.starts_with(&p))
    }
}
