//! Versioned binary checkpoint.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic "BFLOWCKP" | version u32 | config length u64 | config text
//! step u64 | parameter count u64
//! per parameter: name length u32 | name | group length u32 | group
//!                rank u32 | extents u64 × rank | values f64 × numel
//!                moments flag u8 [| moment step u64 | m f64 × numel | v f64 × numel]
//! ```

use std::io::{Read, Write};
use std::path::Path;

use bf_tensor::Tensor;

use super::config::RunConfig;
use crate::dit::params::{Group, ParamStore};
use crate::dit::train::{AdamW, Moments, Trainer};
use crate::{Error, Result};

pub const MAGIC: &[u8; 8] = b"BFLOWCKP";
pub const VERSION: u32 = 1;

fn bad(msg: impl Into<String>) -> Error {
    Error::Format {
        kind: "checkpoint",
        msg: msg.into(),
    }
}

fn put_u32(buf: &mut Vec<u8>, v: u32) {
    buf.extend_from_slice(&v.to_le_bytes());
}

fn put_u64(buf: &mut Vec<u8>, v: u64) {
    buf.extend_from_slice(&v.to_le_bytes());
}

fn put_str(buf: &mut Vec<u8>, s: &str) {
    put_u32(buf, s.len() as u32);
    buf.extend_from_slice(s.as_bytes());
}

fn put_f64s(buf: &mut Vec<u8>, vs: &[f64]) {
    for v in vs {
        buf.extend_from_slice(&v.to_le_bytes());
    }
}

struct Cursor<'a> {
    data: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.data.len()).ok_or_else(|| bad("truncated"))?;
        let s = &self.data[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn len(&mut self) -> Result<usize> {
        usize::try_from(self.u64()?).map_err(|_| bad("length overflow"))
    }

    fn string(&mut self, n: usize) -> Result<String> {
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| bad("invalid UTF-8"))
    }

    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        let bytes = self.take(n.checked_mul(8).ok_or_else(|| bad("length overflow"))?)?;
        Ok(bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect())
    }
}

pub fn encode(config: &RunConfig, trainer: &Trainer) -> Vec<u8> {
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    put_u32(&mut buf, VERSION);
    let text = config.to_text();
    put_u64(&mut buf, text.len() as u64);
    buf.extend_from_slice(text.as_bytes());
    put_u64(&mut buf, trainer.step);
    put_u64(&mut buf, trainer.params.len() as u64);
    for (p, mo) in trainer.params.params().iter().zip(&trainer.optimizer.moments) {
        put_str(&mut buf, &p.name);
        put_str(&mut buf, p.group.name());
        put_u32(&mut buf, p.value.shape().len() as u32);
        for &e in p.value.shape() {
            put_u64(&mut buf, e as u64);
        }
        put_f64s(&mut buf, p.value.data());
        match mo {
            None => buf.push(0),
            Some(mo) => {
                buf.push(1);
                put_u64(&mut buf, mo.t);
                put_f64s(&mut buf, &mo.m);
                put_f64s(&mut buf, &mo.v);
            }
        }
    }
    buf
}

pub fn decode(bytes: &[u8]) -> Result<(RunConfig, Trainer)> {
    let mut c = Cursor { data: bytes, pos: 0 };
    if c.take(MAGIC.len()).map_err(|_| bad("missing magic"))? != MAGIC {
        return Err(bad("bad magic"));
    }
    let version = c.u32()?;
    if version != VERSION {
        return Err(bad(format!("unsupported version {version}")));
    }
    let n = c.len()?;
    let config = RunConfig::parse(&c.string(n)?)?;
    let step = c.u64()?;
    let count = c.len()?;
    let mut params = ParamStore::new();
    let mut moments = Vec::with_capacity(count.min(1 << 16));
    for _ in 0..count {
        let n = c.u32()? as usize;
        let name = c.string(n)?;
        let n = c.u32()? as usize;
        let group = Group::from_name(&c.string(n)?)?;
        let rank = c.u32()? as usize;
        if rank > 8 {
            return Err(bad(format!("rank {rank} of '{name}'")));
        }
        let shape = (0..rank).map(|_| c.len()).collect::<Result<Vec<_>>>()?;
        let numel = shape
            .iter()
            .try_fold(1usize, |a, &e| a.checked_mul(e))
            .ok_or_else(|| bad("shape overflow"))?;
        let value = Tensor::new(shape, c.f64s(numel)?).map_err(|e| bad(format!("'{name}': {e}")))?;
        params.insert(name, group, value)?;
        moments.push(match c.u8()? {
            0 => None,
            1 => Some(Moments {
                t: c.u64()?,
                m: c.f64s(numel)?,
                v: c.f64s(numel)?,
            }),
            f => return Err(bad(format!("bad moments flag {f}"))),
        });
    }
    if c.pos != bytes.len() {
        return Err(bad("trailing bytes"));
    }
    let trainer = Trainer {
        model: config.model.clone(),
        train: config.train.clone(),
        params,
        optimizer: AdamW { moments },
        step,
    };
    Ok((config, trainer))
}

pub fn save(path: impl AsRef<Path>, config: &RunConfig, trainer: &Trainer) -> Result<()> {
    let mut f = std::fs::File::create(path)?;
    f.write_all(&encode(config, trainer))?;
    Ok(f.sync_all()?)
}

pub fn load(path: impl AsRef<Path>) -> Result<(RunConfig, Trainer)> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    decode(&bytes)
}
