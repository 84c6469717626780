//! Binary checkpoints.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! "AUGCN"                      5 bytes
//! version                      u32
//! config JSON                  u32 length + UTF-8 bytes
//! stage                        u8   (1 or 2)
//! epoch                        u32  (epochs completed)
//! rng seed, stream, word_pos   u64, u64, u128
//! tensor count                 u32
//! per tensor:
//!   name                       u32 length + UTF-8 bytes
//!   rank                       u32
//!   dims                       u64 × rank
//!   values                     f64 × Π dims
//! ```
//!
//! Tensor names are `param/<name>`, then `velocity/<name>`, then
//! `graph/adjacency` when present.

use std::io::{Read, Write};
use std::path::Path;

use crate::autodiff::ParamStore;
use crate::config::TrainConfig;
use crate::error::{Error, Result};
use crate::rng::RngState;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 5] = b"AUGCN";
pub const VERSION: u32 = 1;

const PARAM: &str = "param/";
const VELOCITY: &str = "velocity/";
const ADJACENCY: &str = "graph/adjacency";

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: TrainConfig,
    pub stage: u8,
    pub epoch: u32,
    pub rng: RngState,
    pub params: ParamStore,
    /// Momentum buffers, by parameter name.
    pub velocity: Vec<(String, Tensor)>,
    /// The (possibly normalized) graph used in stage 2.
    pub adjacency: Option<Tensor>,
}

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_str(out: &mut Vec<u8>, s: &str) {
    put_u32(out, s.len() as u32);
    out.extend_from_slice(s.as_bytes());
}

fn put_tensor(out: &mut Vec<u8>, name: &str, t: &Tensor) {
    put_str(out, name);
    put_u32(out, t.shape().len() as u32);
    for &d in t.shape() {
        out.extend_from_slice(&(d as u64).to_le_bytes());
    }
    for v in t.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let end = end.ok_or_else(|| Error::Checkpoint(format!("truncated at byte {}", self.pos)))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn array<const N: usize>(&mut self) -> Result<[u8; N]> {
        Ok(self.take(N)?.try_into().expect("length checked"))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.array()?))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.array()?))
    }

    fn string(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|e| Error::Checkpoint(format!("invalid UTF-8: {e}")))
    }

    fn tensor(&mut self) -> Result<(String, Tensor)> {
        let name = self.string()?;
        let rank = self.u32()? as usize;
        let shape = (0..rank).map(|_| Ok(self.u64()? as usize)).collect::<Result<Vec<_>>>()?;
        let len: usize = shape.iter().product();
        let bytes = self.take(len.checked_mul(8).ok_or_else(|| Error::Checkpoint("tensor too large".into()))?)?;
        let data = bytes
            .chunks_exact(8)
            .map(|b| f64::from_le_bytes(b.try_into().expect("8 bytes")))
            .collect();
        Ok((name, Tensor::new(shape, data)?))
    }
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        put_u32(&mut out, VERSION);
        put_str(&mut out, &self.config.to_json());
        out.push(self.stage);
        put_u32(&mut out, self.epoch);
        out.extend_from_slice(&self.rng.seed.to_le_bytes());
        out.extend_from_slice(&self.rng.stream.to_le_bytes());
        out.extend_from_slice(&self.rng.word_pos.to_le_bytes());
        let count = self.params.len() + self.velocity.len() + usize::from(self.adjacency.is_some());
        put_u32(&mut out, count as u32);
        for (name, p) in self.params.iter() {
            put_tensor(&mut out, &format!("{PARAM}{name}"), &p.value);
        }
        for (name, v) in &self.velocity {
            put_tensor(&mut out, &format!("{VELOCITY}{name}"), v);
        }
        if let Some(g) = &self.adjacency {
            put_tensor(&mut out, ADJACENCY, g);
        }
        out
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Self> {
        let mut c = Cursor { buf, pos: 0 };
        if c.take(MAGIC.len())? != MAGIC {
            return Err(Error::Checkpoint("bad magic bytes".into()));
        }
        let version = c.u32()?;
        if version != VERSION {
            return Err(Error::Checkpoint(format!("unsupported version {version}")));
        }
        let config: TrainConfig = serde_json::from_str(&c.string()?)?;
        let stage = c.array::<1>()?[0];
        let epoch = c.u32()?;
        let seed = c.u64()?;
        let stream = c.u64()?;
        let word_pos = u128::from_le_bytes(c.array()?);
        let count = c.u32()?;
        let mut params = ParamStore::new();
        let mut velocity = Vec::new();
        let mut adjacency = None;
        for _ in 0..count {
            let (name, t) = c.tensor()?;
            if let Some(p) = name.strip_prefix(PARAM) {
                params.insert(p, t);
            } else if let Some(v) = name.strip_prefix(VELOCITY) {
                velocity.push((v.to_string(), t));
            } else if name == ADJACENCY {
                adjacency = Some(t);
            } else {
                return Err(Error::Checkpoint(format!("unknown tensor `{name}`")));
            }
        }
        if c.pos != buf.len() {
            return Err(Error::Checkpoint(format!("{} trailing bytes", buf.len() - c.pos)));
        }
        Ok(Self {
            config,
            stage,
            epoch,
            rng: RngState { seed, stream, word_pos },
            params,
            velocity,
            adjacency,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path)?;
        f.write_all(&self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut buf = Vec::new();
        std::fs::File::open(path)?.read_to_end(&mut buf)?;
        Self::from_bytes(&buf)
    }
}
