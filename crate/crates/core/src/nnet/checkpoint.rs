//! `TNET1` parameter checkpoints.
//!
//! Layout (little-endian): `b"TNET"`, `u32` version = 1, `u32` layer count,
//! then per layer a `u8` kind tag followed by its shape words and `f32`
//! parameters:
//!
//! | tag | layer        | shape `u32`s                                  | parameters        |
//! |-----|--------------|-----------------------------------------------|-------------------|
//! | 0   | conv2d       | kh, kw, cin, cout, stride, padding (0 = same) | weight, then bias |
//! | 1   | relu         | none                                          | none              |
//! | 2   | upsample ×2  | none                                          | none              |
//! | 3   | sigmoid-like | none                                          | w, b              |

use std::path::Path;

use super::{Conv2d, Layer, Padding, TinyNet};
use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"TNET";
const VERSION: u32 = 1;

pub fn encode_tnet(net: &TinyNet) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(net.layers.len() as u32).to_le_bytes());
    let put_u32 = |out: &mut Vec<u8>, v: usize| out.extend_from_slice(&(v as u32).to_le_bytes());
    let put_f32 = |out: &mut Vec<u8>, v: f64| out.extend_from_slice(&(v as f32).to_le_bytes());
    for l in &net.layers {
        match l {
            Layer::Conv2d(c) => {
                out.push(0);
                for v in [c.kh, c.kw, c.cin, c.cout, c.stride] {
                    put_u32(&mut out, v);
                }
                put_u32(&mut out, if c.padding == Padding::Same { 0 } else { 1 });
                for v in c.weight.iter().chain(&c.bias) {
                    put_f32(&mut out, *v);
                }
            }
            Layer::Relu => out.push(1),
            Layer::Upsample2x => out.push(2),
            Layer::SigmoidLike { w, b } => {
                out.push(3);
                put_f32(&mut out, *w);
                put_f32(&mut out, *b);
            }
        }
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Reader<'_> {
    fn err(&self, message: impl Into<String>) -> Error {
        Error::Format {
            format: "TNET1",
            offset: self.pos,
            message: message.into(),
        }
    }

    fn take(&mut self, n: usize) -> Result<&[u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(self.err("unexpected end of data"));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<usize> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()) as usize)
    }

    fn f32s(&mut self, n: usize) -> Result<Vec<f64>> {
        let bytes = self.take(n.checked_mul(4).ok_or_else(|| self.err("size overflow"))?)?;
        Ok(bytes
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().unwrap()) as f64)
            .collect())
    }
}

pub fn decode_tnet(bytes: &[u8]) -> Result<TinyNet> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4)? != MAGIC {
        r.pos = 0;
        return Err(r.err("bad magic"));
    }
    let version = r.u32()?;
    if version as u32 != VERSION {
        return Err(r.err(format!("unsupported version {version}")));
    }
    let count = r.u32()?;
    let mut layers = Vec::with_capacity(count.min(1024));
    for _ in 0..count {
        let tag = r.u8()?;
        let layer = match tag {
            0 => {
                let dims: Vec<usize> = (0..6).map(|_| r.u32()).collect::<Result<_>>()?;
                let [kh, kw, cin, cout, stride, pad] = dims[..] else { unreachable!() };
                let padding = match pad {
                    0 => Padding::Same,
                    1 => Padding::Valid,
                    _ => return Err(r.err(format!("unknown padding code {pad}"))),
                };
                if stride == 0 || (padding == Padding::Same && (kh % 2 == 0 || kw % 2 == 0)) {
                    return Err(r.err("invalid convolution geometry"));
                }
                let mut c = Conv2d::new(kh, kw, cin, cout, stride, padding);
                c.weight = r.f32s(cout * cin * kh * kw)?;
                c.bias = r.f32s(cout)?;
                Layer::Conv2d(c)
            }
            1 => Layer::Relu,
            2 => Layer::Upsample2x,
            3 => {
                let p = r.f32s(2)?;
                Layer::SigmoidLike { w: p[0], b: p[1] }
            }
            t => return Err(r.err(format!("unknown layer tag {t}"))),
        };
        layers.push(layer);
    }
    if r.pos != bytes.len() {
        return Err(r.err("trailing bytes"));
    }
    TinyNet::new(layers)
}

pub fn write_tnet(path: impl AsRef<Path>, net: &TinyNet) -> Result<()> {
    std::fs::write(path.as_ref(), encode_tnet(net)).map_err(|e| Error::io(path, e))
}

pub fn read_tnet(path: impl AsRef<Path>) -> Result<TinyNet> {
    let bytes = std::fs::read(path.as_ref()).map_err(|e| Error::io(&path, e))?;
    decode_tnet(&bytes)
}
