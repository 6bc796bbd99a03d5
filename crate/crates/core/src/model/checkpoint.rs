//! SKCK1 checkpoint files.
//!
//! Layout: `"SKCK"`, version `u8 = 1`, `u32` tensor count, then per tensor a
//! `u16` name length and UTF-8 name, `u8` dtype, `u8` rank, `u32` dims and
//! raw little-endian data; a trailing `u64` FNV-1a hash of every preceding
//! byte. The model config travels as the `u8` tensor `meta.config`.

use std::path::Path;

use crate::error::{Error, Result};
use crate::fsutil::write_atomic;
use crate::kv::{self, KvFile};
use crate::numerics::{ParamMap, Tensor};
use crate::skeldata::ModalityKind;

use super::config::ModelConfig;
use super::params::ModelParams;

pub const MAGIC: &[u8; 4] = b"SKCK";
pub const VERSION: u8 = 1;
pub const CONFIG_KEY: &str = "meta.config";

const DTYPE_F32: u8 = 0;
const DTYPE_F64: u8 = 1;
const DTYPE_U8: u8 = 2;

pub fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// A tensor as stored on disk.
#[derive(Debug, Clone, PartialEq)]
pub enum StoredTensor {
    F32(Tensor<f32>),
    F64(Tensor<f64>),
    U8 { shape: Vec<usize>, data: Vec<u8> },
}

impl StoredTensor {
    fn dtype(&self) -> u8 {
        match self {
            StoredTensor::F32(_) => DTYPE_F32,
            StoredTensor::F64(_) => DTYPE_F64,
            StoredTensor::U8 { .. } => DTYPE_U8,
        }
    }

    fn shape(&self) -> &[usize] {
        match self {
            StoredTensor::F32(t) => t.shape(),
            StoredTensor::F64(t) => t.shape(),
            StoredTensor::U8 { shape, .. } => shape,
        }
    }
}

pub fn encode(tensors: &[(String, StoredTensor)]) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.push(VERSION);
    out.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for (name, t) in tensors {
        let nb = name.as_bytes();
        let len = u16::try_from(nb.len()).map_err(|_| Error::Config(format!("tensor name too long: {name}")))?;
        out.extend_from_slice(&len.to_le_bytes());
        out.extend_from_slice(nb);
        out.push(t.dtype());
        let shape = t.shape();
        out.push(u8::try_from(shape.len()).map_err(|_| Error::Config(format!("rank of {name} exceeds 255")))?);
        for &d in shape {
            let d = u32::try_from(d).map_err(|_| Error::Config(format!("dimension of {name} exceeds u32")))?;
            out.extend_from_slice(&d.to_le_bytes());
        }
        match t {
            StoredTensor::F32(t) => t.data().iter().for_each(|v| out.extend_from_slice(&v.to_le_bytes())),
            StoredTensor::F64(t) => t.data().iter().for_each(|v| out.extend_from_slice(&v.to_le_bytes())),
            StoredTensor::U8 { data, .. } => out.extend_from_slice(data),
        }
    }
    let h = fnv1a(&out);
    out.extend_from_slice(&h.to_le_bytes());
    Ok(out)
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::Format { offset: self.pos, msg: format!("truncated {what}") });
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().unwrap()))
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }
}

pub fn decode(buf: &[u8]) -> Result<Vec<(String, StoredTensor)>> {
    if buf.len() < 4 + 1 + 4 + 8 {
        return Err(Error::Format { offset: buf.len(), msg: "file too short for a checkpoint".into() });
    }
    if &buf[..4] != MAGIC {
        return Err(Error::Format { offset: 0, msg: "bad magic, expected SKCK".into() });
    }
    let body = &buf[..buf.len() - 8];
    let stored = u64::from_le_bytes(buf[buf.len() - 8..].try_into().unwrap());
    if fnv1a(body) != stored {
        return Err(Error::Format { offset: buf.len() - 8, msg: "checksum mismatch".into() });
    }
    let mut r = Reader { buf: body, pos: 4 };
    let version = r.u8("version")?;
    if version != VERSION {
        return Err(Error::Format { offset: 4, msg: format!("unsupported version {version}") });
    }
    let count = r.u32("tensor count")? as usize;
    let mut out = Vec::with_capacity(count.min(1 << 16));
    for _ in 0..count {
        let at = r.pos;
        let len = r.u16("name length")? as usize;
        let name = std::str::from_utf8(r.take(len, "name")?)
            .map_err(|_| Error::Format { offset: at + 2, msg: "tensor name is not UTF-8".into() })?
            .to_string();
        let dtype_at = r.pos;
        let dtype = r.u8("dtype")?;
        let rank = r.u8("rank")? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u32("dimension")? as usize);
        }
        let n: usize = shape.iter().product();
        let t = match dtype {
            DTYPE_F32 => {
                let raw = r.take(n * 4, "tensor data")?;
                let data = raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
                StoredTensor::F32(Tensor::from_vec(&shape, data)?)
            }
            DTYPE_F64 => {
                let raw = r.take(n * 8, "tensor data")?;
                let data = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
                StoredTensor::F64(Tensor::from_vec(&shape, data)?)
            }
            DTYPE_U8 => StoredTensor::U8 { data: r.take(n, "tensor data")?.to_vec(), shape },
            other => return Err(Error::Format { offset: dtype_at, msg: format!("unknown dtype code {other}") }),
        };
        out.push((name, t));
    }
    if r.pos != body.len() {
        return Err(Error::Format { offset: r.pos, msg: "trailing bytes before checksum".into() });
    }
    Ok(out)
}

/// Model weights plus the config and input stream they were trained on.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: ModelConfig,
    pub modality: ModalityKind,
    pub params: ModelParams<f32>,
}

impl Checkpoint {
    fn meta_text(&self) -> String {
        let mut s = String::new();
        kv::push(&mut s, "modality", self.modality);
        self.config.write_kv(&mut s);
        s
    }

    fn parse_meta(text: &str) -> Result<(ModelConfig, ModalityKind)> {
        let mut kv = KvFile::parse(text)?;
        let modality = kv.take("modality")?.unwrap_or(ModalityKind::Joint);
        let mut cfg = ModelConfig::desk(2);
        cfg.read_kv(&mut kv)?;
        kv.finish()?;
        cfg.validate()?;
        Ok((cfg, modality))
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let text = self.meta_text().into_bytes();
        let mut tensors = vec![(CONFIG_KEY.to_string(), StoredTensor::U8 { shape: vec![text.len()], data: text })];
        tensors.extend(self.params.tensors.iter().map(|(k, t)| (k.clone(), StoredTensor::F32(t.clone()))));
        encode(&tensors)
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Self> {
        let mut meta = None;
        let mut map = ParamMap::new();
        for (name, t) in decode(buf)? {
            match (name.as_str(), t) {
                (CONFIG_KEY, StoredTensor::U8 { data, .. }) => {
                    let text = String::from_utf8(data).map_err(|_| Error::Config("checkpoint config is not UTF-8".into()))?;
                    meta = Some(Self::parse_meta(&text)?);
                }
                (_, StoredTensor::F32(t)) => {
                    map.insert(name, t);
                }
                (_, StoredTensor::F64(t)) => {
                    map.insert(name, t.cast());
                }
                (_, StoredTensor::U8 { .. }) => return Err(Error::Config(format!("unexpected byte tensor {name}"))),
            }
        }
        let (config, modality) = meta.ok_or_else(|| Error::Config(format!("checkpoint has no {CONFIG_KEY}")))?;
        let params = ModelParams { tensors: map };
        params.check_against(&config)?;
        Ok(Self { config, modality, params })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_bytes()?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}
