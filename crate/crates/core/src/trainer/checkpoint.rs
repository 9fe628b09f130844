//! DPCK: named-tensor checkpoints.
//!
//! ```text
//! "DPCK"  u8 version=1  u8 stage  u64 step  u32 count  tensor × count
//!         u8 has_moments  [u64 adam_t  u32 count  tensor × count  u32 count  tensor × count]
//! tensor: u32 name_len  name (UTF-8)  u32 rank  u32 × rank dims  f32 × product(dims)
//! ```
//! All integers and floats are little-endian. Tensors are written in name order.

use std::fs;
use std::path::Path;

use crate::error::{Error, FormatError, Result};
use crate::nn::ParamSet;
use crate::tensor::TensorMap;

pub const MAGIC: [u8; 4] = *b"DPCK";
pub const VERSION: u8 = 1;

/// First and second Adam moments plus the number of updates applied.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Moments {
    pub t: u64,
    pub m: ParamSet,
    pub v: ParamSet,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    /// 1, 2 or 3 for the transfer stages; 0 when untagged.
    pub stage: u8,
    pub step: u64,
    pub params: ParamSet,
    pub moments: Option<Moments>,
}

fn quantized(p: &ParamSet) -> ParamSet {
    p.iter().map(|(k, v)| (k.to_string(), v.clone().quantize_f32())).collect()
}

impl Checkpoint {
    /// Rounds every tensor to f32, so the result survives a save/load cycle bit-exactly.
    pub fn new(stage: u8, step: u64, params: &ParamSet, moments: Option<&Moments>) -> Self {
        Self {
            stage,
            step,
            params: quantized(params),
            moments: moments.map(|m| Moments { t: m.t, m: quantized(&m.m), v: quantized(&m.v) }),
        }
    }

    pub fn encode(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(&MAGIC);
        out.push(VERSION);
        out.push(self.stage);
        out.extend_from_slice(&self.step.to_le_bytes());
        put_set(&mut out, &self.params)?;
        match &self.moments {
            None => out.push(0),
            Some(m) => {
                out.push(1);
                out.extend_from_slice(&m.t.to_le_bytes());
                put_set(&mut out, &m.m)?;
                put_set(&mut out, &m.v)?;
            }
        }
        Ok(out)
    }

    pub fn decode(bytes: &[u8]) -> Result<Self, FormatError> {
        let mut r = Reader { bytes, at: 0 };
        let magic: [u8; 4] = r.take(4)?.try_into().expect("4 bytes");
        if magic != MAGIC {
            return Err(FormatError::BadMagic { found: magic, expected: MAGIC });
        }
        let version = r.u8()?;
        if version != VERSION {
            return Err(FormatError::UnsupportedVersion(version));
        }
        let stage = r.u8()?;
        if stage > 3 {
            return Err(FormatError::Malformed(format!("stage tag {stage}")));
        }
        let step = r.u64()?;
        let params = r.set()?;
        let moments = match r.u8()? {
            0 => None,
            1 => {
                let t = r.u64()?;
                Some(Moments { t, m: r.set()?, v: r.set()? })
            }
            f => return Err(FormatError::Malformed(format!("moment flag {f}"))),
        };
        if r.at < bytes.len() {
            return Err(FormatError::TrailingBytes((bytes.len() - r.at) as u64));
        }
        Ok(Self { stage, step, params, moments })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.encode()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::decode(&bytes).map_err(|e| Error::format(path, e))
    }
}

fn put_u32(out: &mut Vec<u8>, v: usize, what: &str) -> Result<()> {
    let v = u32::try_from(v).map_err(|_| Error::shape(format!("{what} {v} does not fit in u32")))?;
    out.extend_from_slice(&v.to_le_bytes());
    Ok(())
}

fn put_set(out: &mut Vec<u8>, set: &ParamSet) -> Result<()> {
    put_u32(out, set.len(), "tensor count")?;
    for (name, t) in set.iter() {
        put_u32(out, name.len(), "name length")?;
        out.extend_from_slice(name.as_bytes());
        put_u32(out, t.rank(), "rank")?;
        for &d in t.shape() {
            put_u32(out, d, "extent")?;
        }
        for &v in t.data() {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    Ok(())
}

struct Reader<'a> {
    bytes: &'a [u8],
    at: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: u64) -> Result<&'a [u8], FormatError> {
        let left = (self.bytes.len() - self.at) as u64;
        if n > left {
            return Err(FormatError::Truncated { expected: self.at as u64 + n, found: self.bytes.len() as u64 });
        }
        let s = &self.bytes[self.at..self.at + n as usize];
        self.at += n as usize;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8, FormatError> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32, FormatError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64, FormatError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn set(&mut self) -> Result<ParamSet, FormatError> {
        let count = self.u32()?;
        let mut set = ParamSet::new();
        for _ in 0..count {
            let len = self.u32()?;
            let name = std::str::from_utf8(self.take(len as u64)?).map_err(|_| FormatError::BadName)?.to_string();
            let rank = self.u32()?;
            let mut shape = Vec::with_capacity(rank.min(8) as usize);
            let mut n: u64 = 1;
            for _ in 0..rank {
                let d = self.u32()?;
                n = n.checked_mul(d as u64).ok_or_else(|| FormatError::DimensionOverflow(name.clone()))?;
                shape.push(d as usize);
            }
            let bytes = n.checked_mul(4).ok_or_else(|| FormatError::DimensionOverflow(name.clone()))?;
            let data = self.take(bytes)?.chunks_exact(4).map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes")) as f64).collect();
            let t = TensorMap::new(shape, data).map_err(|e| FormatError::Malformed(e.to_string()))?;
            if set.insert(name.clone(), t).is_some() {
                return Err(FormatError::Malformed(format!("duplicate tensor `{name}`")));
            }
        }
        Ok(set)
    }
}
