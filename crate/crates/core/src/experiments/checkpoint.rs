//! BTCK checkpoint files (little-endian).
//!
//! ```text
//! "BTCK" | version u32 | config length u32 | config JSON
//! tensor count u32 | { name len u16 | name | ndim u8 | dims u32×ndim | f64 data }*
//! buffer count u32 | { same tensor envelope }*
//! rng count u32    | { name len u16 | name | state u64 }*
//! epoch u32 | step u64
//! ```

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

pub const BTCK_MAGIC: &[u8; 4] = b"BTCK";
pub const BTCK_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub version: u32,
    pub config_json: String,
    /// Model parameters and batch-norm running statistics.
    pub tensors: Vec<NamedTensor>,
    /// Optimizer momentum buffers.
    pub buffers: Vec<NamedTensor>,
    pub rng_states: Vec<(String, u64)>,
    /// Completed epochs.
    pub epoch: u32,
    /// Optimizer steps taken.
    pub step: u64,
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, section: &str) -> Result<&'a [u8]> {
        let available = self.bytes.len() - self.pos;
        if n > available {
            return Err(Error::Truncated {
                section: section.to_string(),
                needed: n,
                available,
            });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self, section: &str) -> Result<u8> {
        Ok(self.take(1, section)?[0])
    }

    fn u16(&mut self, section: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(
            self.take(2, section)?.try_into().unwrap(),
        ))
    }

    fn u32(&mut self, section: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(
            self.take(4, section)?.try_into().unwrap(),
        ))
    }

    fn u64(&mut self, section: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(
            self.take(8, section)?.try_into().unwrap(),
        ))
    }

    fn name(&mut self, section: &str) -> Result<String> {
        let len = self.u16(section)? as usize;
        let raw = self.take(len, section)?;
        String::from_utf8(raw.to_vec())
            .map_err(|_| Error::Format(format!("{section}: name is not UTF-8")))
    }

    fn tensors(&mut self, section: &str) -> Result<Vec<NamedTensor>> {
        let count = self.u32(section)? as usize;
        let mut out = Vec::with_capacity(count.min(1 << 16));
        for _ in 0..count {
            let name = self.name(section)?;
            let ndim = self.u8(section)? as usize;
            let mut shape = Vec::with_capacity(ndim);
            for _ in 0..ndim {
                shape.push(self.u32(section)? as usize);
            }
            let numel: usize = shape.iter().product();
            let raw = self.take(numel.saturating_mul(8), section)?;
            let data = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            out.push(NamedTensor { name, shape, data });
        }
        Ok(out)
    }
}

fn put_name(out: &mut Vec<u8>, name: &str) -> Result<()> {
    let len =
        u16::try_from(name.len()).map_err(|_| Error::Format(format!("name too long: {name}")))?;
    out.extend_from_slice(&len.to_le_bytes());
    out.extend_from_slice(name.as_bytes());
    Ok(())
}

fn put_tensors(out: &mut Vec<u8>, tensors: &[NamedTensor]) -> Result<()> {
    out.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for t in tensors {
        put_name(out, &t.name)?;
        if t.shape.len() > u8::MAX as usize || t.shape.iter().product::<usize>() != t.data.len() {
            return Err(Error::Format(format!(
                "tensor `{}` has an inconsistent shape",
                t.name
            )));
        }
        out.push(t.shape.len() as u8);
        for &d in &t.shape {
            let d = u32::try_from(d)
                .map_err(|_| Error::Format(format!("dimension too large in `{}`", t.name)))?;
            out.extend_from_slice(&d.to_le_bytes());
        }
        for v in &t.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(())
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(BTCK_MAGIC);
        out.extend_from_slice(&self.version.to_le_bytes());
        out.extend_from_slice(&(self.config_json.len() as u32).to_le_bytes());
        out.extend_from_slice(self.config_json.as_bytes());
        put_tensors(&mut out, &self.tensors)?;
        put_tensors(&mut out, &self.buffers)?;
        out.extend_from_slice(&(self.rng_states.len() as u32).to_le_bytes());
        for (name, state) in &self.rng_states {
            put_name(&mut out, name)?;
            out.extend_from_slice(&state.to_le_bytes());
        }
        out.extend_from_slice(&self.epoch.to_le_bytes());
        out.extend_from_slice(&self.step.to_le_bytes());
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4, "magic")? != BTCK_MAGIC {
            return Err(Error::Format("bad magic, expected \"BTCK\"".into()));
        }
        let version = r.u32("header")?;
        if version != BTCK_VERSION {
            return Err(Error::Format(format!(
                "checkpoint version {version} is not supported (expected {BTCK_VERSION})"
            )));
        }
        let len = r.u32("config")? as usize;
        let config_json = String::from_utf8(r.take(len, "config")?.to_vec())
            .map_err(|_| Error::Format("config section is not UTF-8".into()))?;
        let tensors = r.tensors("tensors")?;
        let buffers = r.tensors("optimizer buffers")?;
        let count = r.u32("rng states")? as usize;
        let mut rng_states = Vec::with_capacity(count.min(1 << 16));
        for _ in 0..count {
            let name = r.name("rng states")?;
            rng_states.push((name, r.u64("rng states")?));
        }
        let epoch = r.u32("trailer")?;
        let step = r.u64("trailer")?;
        if r.pos != bytes.len() {
            return Err(Error::Format(format!(
                "{} trailing bytes",
                bytes.len() - r.pos
            )));
        }
        Ok(Checkpoint {
            version,
            config_json,
            tensors,
            buffers,
            rng_states,
            epoch,
            step,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Checkpoint::from_bytes(&fs::read(path)?)
    }

    pub fn tensor(&self, name: &str) -> Result<&NamedTensor> {
        self.tensors
            .iter()
            .find(|t| t.name == name)
            .ok_or_else(|| Error::Format(format!("checkpoint is missing tensor `{name}`")))
    }

    pub fn buffer(&self, name: &str) -> Result<&NamedTensor> {
        self.buffers.iter().find(|t| t.name == name).ok_or_else(|| {
            Error::Format(format!("checkpoint is missing optimizer buffer `{name}`"))
        })
    }

    pub fn rng_state(&self, name: &str) -> Result<u64> {
        self.rng_states
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, s)| *s)
            .ok_or_else(|| Error::Format(format!("checkpoint is missing rng state `{name}`")))
    }
}
