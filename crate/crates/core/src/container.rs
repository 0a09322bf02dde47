//! Binary tensor container shared by checkpoints, feature caches and
//! statistics files.
//!
//! Layout, all integers little-endian `u64`:
//! magic `DISCVC01`, config length + UTF-8 `key=value` text, tensor count,
//! then per tensor: name length + name, rank, dims, raw `f32` data.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"DISCVC01";

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Container {
    /// Ordered `key=value` entries.
    pub config: Vec<(String, String)>,
    pub tensors: Vec<(String, Tensor)>,
}

impl Container {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn set(&mut self, key: impl Into<String>, value: impl ToString) {
        let key = key.into();
        let value = value.to_string();
        match self.config.iter_mut().find(|(k, _)| *k == key) {
            Some(slot) => slot.1 = value,
            None => self.config.push((key, value)),
        }
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.config
            .iter()
            .find(|(k, _)| k == key)
            .map(|(_, v)| v.as_str())
    }

    /// Parsed value of a required key.
    pub fn parse<V: std::str::FromStr>(&self, key: &str) -> Result<V> {
        let raw = self
            .get(key)
            .ok_or_else(|| Error::Checkpoint(format!("missing key {key}")))?;
        raw.parse()
            .map_err(|_| Error::Checkpoint(format!("bad value for {key}: {raw:?}")))
    }

    pub fn push(&mut self, name: impl Into<String>, tensor: Tensor) {
        self.tensors.push((name.into(), tensor));
    }

    pub fn tensor(&self, name: &str) -> Result<&Tensor> {
        self.tensors
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t)
            .ok_or_else(|| Error::Checkpoint(format!("missing tensor {name}")))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        let mut text = String::new();
        for (k, v) in &self.config {
            text.push_str(k);
            text.push('=');
            text.push_str(v);
            text.push('\n');
        }
        put_u64(&mut out, text.len() as u64);
        out.extend_from_slice(text.as_bytes());
        put_u64(&mut out, self.tensors.len() as u64);
        for (name, t) in &self.tensors {
            put_u64(&mut out, name.len() as u64);
            out.extend_from_slice(name.as_bytes());
            put_u64(&mut out, t.rank() as u64);
            for &d in t.shape() {
                put_u64(&mut out, d as u64);
            }
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = bytes;
        let mut magic = [0u8; 8];
        read_exact(&mut r, &mut magic)?;
        if &magic != MAGIC {
            return Err(Error::Checkpoint(format!(
                "bad magic {:?}, expected {:?}",
                String::from_utf8_lossy(&magic),
                std::str::from_utf8(MAGIC).unwrap()
            )));
        }
        let text_len = get_len(&mut r, bytes.len())?;
        let mut text = vec![0u8; text_len];
        read_exact(&mut r, &mut text)?;
        let text = String::from_utf8(text)
            .map_err(|_| Error::Checkpoint("config blob is not UTF-8".into()))?;
        let mut config = Vec::new();
        for line in text.lines() {
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Checkpoint(format!("bad config line {line:?}")))?;
            config.push((k.to_string(), v.to_string()));
        }
        let count = get_len(&mut r, bytes.len())?;
        let mut tensors = Vec::with_capacity(count);
        for _ in 0..count {
            let name_len = get_len(&mut r, bytes.len())?;
            let mut name = vec![0u8; name_len];
            read_exact(&mut r, &mut name)?;
            let name = String::from_utf8(name)
                .map_err(|_| Error::Checkpoint("tensor name is not UTF-8".into()))?;
            let rank = get_len(&mut r, 64)?;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(get_len(&mut r, bytes.len())?);
            }
            let numel: usize = shape.iter().product();
            if numel.saturating_mul(4) > r.len() {
                return Err(Error::Checkpoint(format!("tensor {name} truncated")));
            }
            let mut data = Vec::with_capacity(numel);
            for _ in 0..numel {
                let mut b = [0u8; 4];
                read_exact(&mut r, &mut b)?;
                data.push(f32::from_le_bytes(b));
            }
            let t = Tensor::new(shape, data)
                .map_err(|e| Error::Checkpoint(format!("tensor {name}: {e}")))?;
            tensors.push((name, t));
        }
        if !r.is_empty() {
            return Err(Error::Checkpoint(format!("{} trailing bytes", r.len())));
        }
        Ok(Container { config, tensors })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut f = fs::File::create(path)?;
        f.write_all(&self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let mut bytes = Vec::new();
        fs::File::open(path)?.read_to_end(&mut bytes)?;
        Self::from_bytes(&bytes)
    }
}

fn put_u64(out: &mut Vec<u8>, v: u64) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn read_exact(r: &mut &[u8], buf: &mut [u8]) -> Result<()> {
    r.read_exact(buf)
        .map_err(|_| Error::Checkpoint("unexpected end of file".into()))
}

/// A `u64` length that must not exceed `limit`.
fn get_len(r: &mut &[u8], limit: usize) -> Result<usize> {
    let mut b = [0u8; 8];
    read_exact(r, &mut b)?;
    let v = u64::from_le_bytes(b);
    if v > limit as u64 {
        return Err(Error::Checkpoint(format!("implausible length {v}")));
    }
    Ok(v as usize)
}
