//! Versioned binary model checkpoints.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic "LMLCCCKP" | u32 version
//! u32 config_len | config bytes (UTF-8 key=value text) | 32-byte SHA-256 of config
//! u32 n_tensors, each: u32 name_len | name | u32 ndim | u64 dims.. | f32 data..
//! u8 has_adam, then: u64 step | f64 lr, beta1, beta2, eps | u32 n_slots,
//!     each: u64 len | f32 m.. | f32 v..
//! ```
//!
//! Values are stored as 32-bit floats, so an `f32` model round-trips bit for bit.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use sha2::{Digest, Sha256};

use super::optim::{Adam, AdamConfig};
use super::tensor::Tensor;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

const MAGIC: &[u8; 8] = b"LMLCCCKP";
const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint<T> {
    pub config: String,
    pub tensors: Vec<(String, Tensor<T>)>,
    pub adam: Option<Adam<T>>,
}

impl<T: Scalar> Checkpoint<T> {
    pub fn tensor(&self, name: &str) -> Option<&Tensor<T>> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }
}

pub fn config_digest(config: &str) -> [u8; 32] {
    let d = Sha256::digest(config.as_bytes());
    let mut out = [0u8; 32];
    out.copy_from_slice(d.as_slice());
    out
}

fn put_u32(buf: &mut Vec<u8>, v: u32) {
    buf.extend_from_slice(&v.to_le_bytes());
}

fn put_u64(buf: &mut Vec<u8>, v: u64) {
    buf.extend_from_slice(&v.to_le_bytes());
}

fn put_f32s<T: Scalar>(buf: &mut Vec<u8>, data: &[T]) {
    for v in data {
        buf.extend_from_slice(&(v.to_f64_lossy() as f32).to_le_bytes());
    }
}

pub fn encode_checkpoint<T: Scalar>(ck: &Checkpoint<T>) -> Vec<u8> {
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    put_u32(&mut buf, VERSION);
    put_u32(&mut buf, ck.config.len() as u32);
    buf.extend_from_slice(ck.config.as_bytes());
    buf.extend_from_slice(&config_digest(&ck.config));
    put_u32(&mut buf, ck.tensors.len() as u32);
    for (name, t) in &ck.tensors {
        put_u32(&mut buf, name.len() as u32);
        buf.extend_from_slice(name.as_bytes());
        put_u32(&mut buf, t.shape().len() as u32);
        for &d in t.shape() {
            put_u64(&mut buf, d as u64);
        }
        put_f32s(&mut buf, t.data());
    }
    match &ck.adam {
        None => buf.push(0),
        Some(a) => {
            buf.push(1);
            put_u64(&mut buf, a.step);
            for v in [a.config.lr, a.config.beta1, a.config.beta2, a.config.eps] {
                buf.extend_from_slice(&v.to_le_bytes());
            }
            put_u32(&mut buf, a.m.len() as u32);
            for (m, v) in a.m.iter().zip(&a.v) {
                put_u64(&mut buf, m.len() as u64);
                put_f32s(&mut buf, m);
                put_f32s(&mut buf, v);
            }
        }
    }
    buf
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| Error::Format(format!("checkpoint truncated at byte {}", self.pos)))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f32s<T: Scalar>(&mut self, n: usize) -> Result<Vec<T>> {
        let bytes = self.take(n.checked_mul(4).ok_or_else(|| Error::Format("tensor too large".into()))?)?;
        Ok(bytes
            .chunks_exact(4)
            .map(|c| T::lit(f32::from_le_bytes(c.try_into().unwrap()) as f64))
            .collect())
    }

    fn string(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| Error::Format("checkpoint string is not UTF-8".into()))
    }
}

pub fn decode_checkpoint<T: Scalar>(buf: &[u8]) -> Result<Checkpoint<T>> {
    let mut c = Cursor { buf, pos: 0 };
    if c.take(8)? != MAGIC {
        return Err(Error::Format("not a checkpoint (bad magic)".into()));
    }
    let version = c.u32()?;
    if version != VERSION {
        return Err(Error::Format(format!("unsupported checkpoint version {version}")));
    }
    let config = c.string()?;
    let digest = c.take(32)?;
    if digest != config_digest(&config) {
        return Err(Error::Format("checkpoint config digest mismatch".into()));
    }
    let n = c.u32()? as usize;
    let mut tensors = Vec::with_capacity(n);
    for _ in 0..n {
        let name = c.string()?;
        let ndim = c.u32()? as usize;
        let shape = (0..ndim).map(|_| c.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        let len = shape.iter().product();
        let data = c.f32s(len)?;
        tensors.push((name, Tensor::new(shape, data)?));
    }
    let adam = match c.u8()? {
        0 => None,
        1 => {
            let step = c.u64()?;
            let config = AdamConfig {
                lr: c.f64()?,
                beta1: c.f64()?,
                beta2: c.f64()?,
                eps: c.f64()?,
            };
            let slots = c.u32()? as usize;
            let mut a = Adam::new(config);
            a.step = step;
            for _ in 0..slots {
                let len = c.u64()? as usize;
                a.m.push(c.f32s(len)?);
                a.v.push(c.f32s(len)?);
            }
            Some(a)
        }
        other => return Err(Error::Format(format!("bad optimizer flag {other}"))),
    };
    if c.pos != buf.len() {
        return Err(Error::Format("trailing bytes after checkpoint".into()));
    }
    Ok(Checkpoint { config, tensors, adam })
}

pub fn save_checkpoint<T: Scalar>(path: impl AsRef<Path>, ck: &Checkpoint<T>) -> Result<()> {
    let path = path.as_ref();
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&encode_checkpoint(ck)).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint<T: Scalar>(path: impl AsRef<Path>) -> Result<Checkpoint<T>> {
    let path = path.as_ref();
    let mut buf = Vec::new();
    fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut buf))
        .map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&buf)
}
