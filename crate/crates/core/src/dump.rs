//! Binary tensor dump: `b"IRPE"`, version byte `0x01`, three little-endian
//! `u32` dimensions `(tokens, h, w)`, then `tokens*h*w` little-endian `f32`
//! values in token-major, row-major order.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::heatmap::Tensor3;

pub const MAGIC: &[u8; 4] = b"IRPE";
pub const VERSION: u8 = 0x01;
const HEADER_LEN: usize = 4 + 1 + 12;

pub fn encode(tensor: &Tensor3) -> Vec<u8> {
    let (t, h, w) = tensor.dims();
    let mut out = Vec::with_capacity(HEADER_LEN + 4 * tensor.values().len());
    out.extend_from_slice(MAGIC);
    out.push(VERSION);
    for d in [t, h, w] {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for v in tensor.values() {
        out.extend_from_slice(&(*v as f32).to_le_bytes());
    }
    out
}

pub fn decode(bytes: &[u8]) -> Result<Tensor3> {
    if bytes.len() < HEADER_LEN {
        return Err(Error::Input(format!(
            "tensor dump too short: {} bytes",
            bytes.len()
        )));
    }
    if &bytes[..4] != MAGIC {
        return Err(Error::Input("tensor dump has wrong magic".into()));
    }
    if bytes[4] != VERSION {
        return Err(Error::Input(format!(
            "unsupported tensor dump version {}",
            bytes[4]
        )));
    }
    let dim = |i: usize| {
        let off = 5 + 4 * i;
        u32::from_le_bytes(bytes[off..off + 4].try_into().unwrap()) as usize
    };
    let (t, h, w) = (dim(0), dim(1), dim(2));
    let expected = t
        .checked_mul(h)
        .and_then(|n| n.checked_mul(w))
        .and_then(|n| n.checked_mul(4))
        .ok_or_else(|| Error::Input("tensor dump dimensions overflow".into()))?;
    let body = &bytes[HEADER_LEN..];
    if body.len() != expected {
        return Err(Error::Input(format!(
            "tensor dump body holds {} bytes, header implies {expected}",
            body.len()
        )));
    }
    let values = body
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
        .collect();
    Tensor3::new(t, h, w, values)
}

pub fn write(path: &Path, tensor: &Tensor3) -> Result<()> {
    fs::write(path, encode(tensor)).map_err(|e| Error::io(path, e))
}

pub fn read(path: &Path) -> Result<Tensor3> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes).map_err(|e| Error::format(path, e.to_string()))
}
