//! Bridge frames: one JSON object per line.
//!
//! Tensors travel as base64 of little-endian `f32`, masks as base64 of a
//! row-major bit stream packed most-significant bit first, with the final
//! byte zero-padded.

use std::io::{self, BufRead, Write};

use base64::engine::general_purpose::STANDARD;
use base64::Engine;
use serde::{Deserialize, Serialize};

use super::{BackendError, BackendRequest, BackendResponse, MaskMode};
use crate::heatmap::{BinaryMask, Tensor3};

pub const PROTOCOL_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "lowercase")]
pub enum Frame {
    Hello(Hello),
    Forward(ForwardFrame),
    Result(ResultFrame),
    Error { message: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Hello {
    pub version: u32,
    /// `[h, w]`; only present in the server's reply.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub latent: Option<[usize; 2]>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub capabilities: Option<Vec<String>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MaskPayload {
    pub h: usize,
    pub w: usize,
    pub bits: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorPayload {
    pub shape: [usize; 3],
    pub data: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ForwardFrame {
    pub image: String,
    pub tokens: Vec<String>,
    pub mask: MaskPayload,
    pub mask_mode: MaskMode,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultFrame {
    pub latent: [usize; 2],
    pub image_size: [usize; 2],
    pub itm: f64,
    pub attention: TensorPayload,
    pub gradients: TensorPayload,
}

fn malformed(msg: impl Into<String>) -> BackendError {
    BackendError::MalformedFrame(msg.into())
}

pub fn encode_mask(mask: &BinaryMask) -> MaskPayload {
    let bits = mask.bits();
    let mut bytes = vec![0u8; bits.len().div_ceil(8)];
    for (i, _) in bits.iter().enumerate().filter(|(_, b)| **b) {
        bytes[i / 8] |= 0x80 >> (i % 8);
    }
    MaskPayload {
        h: mask.height(),
        w: mask.width(),
        bits: STANDARD.encode(bytes),
    }
}

pub fn decode_mask(payload: &MaskPayload) -> Result<BinaryMask, BackendError> {
    let bytes = STANDARD
        .decode(&payload.bits)
        .map_err(|e| malformed(format!("mask bits: {e}")))?;
    let n = payload.h * payload.w;
    if bytes.len() != n.div_ceil(8) {
        return Err(malformed(format!(
            "mask {}x{} needs {} bytes, got {}",
            payload.h,
            payload.w,
            n.div_ceil(8),
            bytes.len()
        )));
    }
    let bits = (0..n).map(|i| bytes[i / 8] & (0x80 >> (i % 8)) != 0).collect();
    BinaryMask::new(payload.h, payload.w, bits).map_err(|e| malformed(e.to_string()))
}

pub fn encode_tensor(tensor: &Tensor3) -> TensorPayload {
    let mut bytes = Vec::with_capacity(tensor.values().len() * 4);
    for v in tensor.values() {
        bytes.extend_from_slice(&(*v as f32).to_le_bytes());
    }
    let (t, h, w) = tensor.dims();
    TensorPayload {
        shape: [t, h, w],
        data: STANDARD.encode(bytes),
    }
}

pub fn decode_tensor(payload: &TensorPayload) -> Result<Tensor3, BackendError> {
    let bytes = STANDARD
        .decode(&payload.data)
        .map_err(|e| malformed(format!("tensor data: {e}")))?;
    let [t, h, w] = payload.shape;
    let n = t
        .checked_mul(h)
        .and_then(|x| x.checked_mul(w))
        .ok_or_else(|| malformed("tensor shape overflows"))?;
    if bytes.len() != n * 4 {
        return Err(malformed(format!(
            "tensor {:?} needs {} bytes, got {}",
            payload.shape,
            n * 4,
            bytes.len()
        )));
    }
    let values = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
        .collect();
    Tensor3::new(t, h, w, values).map_err(|e| malformed(e.to_string()))
}

pub fn request_frame(request: &BackendRequest) -> Frame {
    Frame::Forward(ForwardFrame {
        image: request.image.clone(),
        tokens: request.tokens.clone(),
        mask: encode_mask(&request.mask),
        mask_mode: request.mask_mode,
    })
}

pub fn request_from_frame(frame: &ForwardFrame) -> Result<BackendRequest, BackendError> {
    Ok(BackendRequest {
        image: frame.image.clone(),
        tokens: frame.tokens.clone(),
        mask: decode_mask(&frame.mask)?,
        mask_mode: frame.mask_mode,
    })
}

pub fn result_frame(response: &BackendResponse) -> Frame {
    Frame::Result(ResultFrame {
        latent: [response.latent.0, response.latent.1],
        image_size: [response.image_size.0, response.image_size.1],
        itm: response.itm,
        attention: encode_tensor(&response.attention),
        gradients: encode_tensor(&response.gradients),
    })
}

pub fn response_from_frame(frame: &ResultFrame) -> Result<BackendResponse, BackendError> {
    Ok(BackendResponse {
        attention: decode_tensor(&frame.attention)?,
        gradients: decode_tensor(&frame.gradients)?,
        itm: frame.itm,
        latent: (frame.latent[0], frame.latent[1]),
        image_size: (frame.image_size[0], frame.image_size[1]),
    })
}

pub(crate) fn io_error(e: io::Error) -> BackendError {
    match e.kind() {
        io::ErrorKind::WouldBlock | io::ErrorKind::TimedOut => BackendError::Timeout,
        _ => BackendError::Transport(e),
    }
}

pub fn write_frame<W: Write + ?Sized>(out: &mut W, frame: &Frame) -> Result<(), BackendError> {
    let mut line = serde_json::to_vec(frame).map_err(|e| malformed(e.to_string()))?;
    line.push(b'\n');
    out.write_all(&line).map_err(io_error)?;
    out.flush().map_err(io_error)
}

/// Reads one frame. `Ok(None)` on a clean end of stream.
pub fn read_frame<R: BufRead + ?Sized>(input: &mut R) -> Result<Option<Frame>, BackendError> {
    let mut line = Vec::new();
    let n = input.read_until(b'\n', &mut line).map_err(io_error)?;
    if n == 0 {
        return Ok(None);
    }
    if line.last() != Some(&b'\n') {
        return Err(malformed("stream ended inside a frame"));
    }
    let text = std::str::from_utf8(&line).map_err(|e| malformed(e.to_string()))?;
    serde_json::from_str(text.trim_end())
        .map(Some)
        .map_err(|e| malformed(e.to_string()))
}
