//! `SMAP1` binary container: `b"SMAP"`, little-endian `u32`
//! `[version = 1, channels, height, width]`, then `channels·height·width`
//! little-endian `f32` values, channel-major then row-major.

use std::path::Path;

use super::ScoreMap;
use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"SMAP";
const VERSION: u32 = 1;
const HEADER_LEN: usize = 20;

pub fn encode_smap(m: &ScoreMap) -> Vec<u8> {
    let mut out = Vec::with_capacity(HEADER_LEN + 4 * m.data().len());
    out.extend_from_slice(MAGIC);
    for v in [VERSION, m.channels() as u32, m.height() as u32, m.width() as u32] {
        out.extend_from_slice(&v.to_le_bytes());
    }
    for v in m.data() {
        out.extend_from_slice(&(*v as f32).to_le_bytes());
    }
    out
}

fn format_err(offset: usize, message: impl Into<String>) -> Error {
    Error::Format {
        format: "SMAP1",
        offset,
        message: message.into(),
    }
}

pub fn decode_smap(bytes: &[u8]) -> Result<ScoreMap> {
    if bytes.len() < HEADER_LEN {
        return Err(format_err(bytes.len(), "truncated header"));
    }
    if &bytes[..4] != MAGIC {
        return Err(format_err(0, "bad magic"));
    }
    let word = |i: usize| u32::from_le_bytes(bytes[4 + 4 * i..8 + 4 * i].try_into().unwrap());
    if word(0) != VERSION {
        return Err(format_err(4, format!("unsupported version {}", word(0))));
    }
    let (c, h, w) = (word(1) as usize, word(2) as usize, word(3) as usize);
    let n = c
        .checked_mul(h)
        .and_then(|v| v.checked_mul(w))
        .ok_or_else(|| format_err(8, "dimensions overflow"))?;
    let expected = HEADER_LEN + 4 * n;
    if bytes.len() != expected {
        return Err(format_err(
            bytes.len().min(expected),
            format!("expected {expected} bytes, found {}", bytes.len()),
        ));
    }
    let data = bytes[HEADER_LEN..]
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes(b.try_into().unwrap()) as f64)
        .collect();
    ScoreMap::from_vec(c, h, w, data)
}

pub fn write_smap(path: impl AsRef<Path>, m: &ScoreMap) -> Result<()> {
    std::fs::write(path.as_ref(), encode_smap(m)).map_err(|e| Error::io(path, e))
}

pub fn read_smap(path: impl AsRef<Path>) -> Result<ScoreMap> {
    let bytes = std::fs::read(path.as_ref()).map_err(|e| Error::io(&path, e))?;
    decode_smap(&bytes)
}
