//! FMAP: a little-endian float map container.
//!
//! ```text
//! "FMAP"  u8 version=1  u32 width  u32 height  u32 channels  f32 × (height·width·channels)
//! ```
//! Values are row-major with channels interleaved.

use std::fs;
use std::path::Path;

use crate::error::{Error, FormatError, Result};
use crate::tensor::TensorMap;

pub const MAGIC: [u8; 4] = *b"FMAP";
pub const VERSION: u8 = 1;
/// Magic, version byte and three u32 extents.
pub const HEADER_LEN: usize = 17;

/// Encodes an (H, W, C) map. Values are stored as f32.
pub fn encode(t: &TensorMap) -> Result<Vec<u8>> {
    let [h, w, c] = <[usize; 3]>::try_from(t.shape())
        .map_err(|_| Error::shape(format!("FMAP stores (H, W, C) maps, got {:?}", t.shape())))?;
    let dim = |v: usize| u32::try_from(v).map_err(|_| Error::shape(format!("extent {v} does not fit in u32")));
    let mut out = Vec::with_capacity(HEADER_LEN + 4 * t.len());
    out.extend_from_slice(&MAGIC);
    out.push(VERSION);
    out.extend_from_slice(&dim(w)?.to_le_bytes());
    out.extend_from_slice(&dim(h)?.to_le_bytes());
    out.extend_from_slice(&dim(c)?.to_le_bytes());
    for &v in t.data() {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
    Ok(out)
}

fn u32_at(b: &[u8], at: usize) -> u32 {
    u32::from_le_bytes(b[at..at + 4].try_into().expect("4 bytes"))
}

pub fn decode(bytes: &[u8]) -> Result<TensorMap, FormatError> {
    if bytes.len() < 4 {
        return Err(FormatError::Truncated { expected: HEADER_LEN as u64, found: bytes.len() as u64 });
    }
    let found: [u8; 4] = bytes[..4].try_into().expect("4 bytes");
    if found != MAGIC {
        return Err(FormatError::BadMagic { found, expected: MAGIC });
    }
    if bytes.len() < HEADER_LEN {
        return Err(FormatError::Truncated { expected: HEADER_LEN as u64, found: bytes.len() as u64 });
    }
    if bytes[4] != VERSION {
        return Err(FormatError::UnsupportedVersion(bytes[4]));
    }
    let (w, h, c) = (u32_at(bytes, 5) as u64, u32_at(bytes, 9) as u64, u32_at(bytes, 13) as u64);
    let payload = w
        .checked_mul(h)
        .and_then(|n| n.checked_mul(c))
        .and_then(|n| n.checked_mul(4))
        .filter(|&n| usize::try_from(n).is_ok())
        .ok_or_else(|| FormatError::DimensionOverflow(format!("{w}x{h}x{c}")))?;
    let body = (bytes.len() - HEADER_LEN) as u64;
    if body < payload {
        return Err(FormatError::Truncated { expected: HEADER_LEN as u64 + payload, found: bytes.len() as u64 });
    }
    if body > payload {
        return Err(FormatError::TrailingBytes(body - payload));
    }
    let data = bytes[HEADER_LEN..]
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes")) as f64)
        .collect();
    Ok(TensorMap::new(vec![h as usize, w as usize, c as usize], data).expect("length checked"))
}

pub fn write(path: &Path, t: &TensorMap) -> Result<()> {
    fs::write(path, encode(t)?).map_err(|e| Error::io(path, e))
}

pub fn read(path: &Path) -> Result<TensorMap> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes).map_err(|e| Error::format(path, e))
}
