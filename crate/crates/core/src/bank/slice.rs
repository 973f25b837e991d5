//! Binary slice files: a 48-byte little-endian header followed by Q, K and V
//! of every layer as `f32` in (token, head, dim) order.

use crate::error::{Error, Result};
use crate::model::{LayerQkv, QkvTensors};

pub const SLICE_MAGIC: &[u8; 4] = b"PQKV";
pub const SLICE_VERSION: u16 = 1;
pub const SLICE_HEADER_BYTES: usize = 48;

/// Serialized size of a slice with the given shape.
pub fn slice_byte_size(layers: usize, heads: usize, head_dim: usize, tokens: usize) -> u64 {
    (SLICE_HEADER_BYTES + 3 * layers * tokens * heads * head_dim * 4) as u64
}

pub fn encode_slice(tensors: &QkvTensors, content_hash: &[u8; 32]) -> Result<Vec<u8>> {
    let fits = |v: usize| u16::try_from(v).is_ok();
    if !fits(tensors.layer_count()) || !fits(tensors.heads()) || !fits(tensors.head_dim()) {
        return Err(Error::ShapeMismatch("slice dimensions exceed u16".into()));
    }
    let tokens = u32::try_from(tensors.token_count())
        .map_err(|_| Error::ShapeMismatch("slice token count exceeds u32".into()))?;
    let size = slice_byte_size(tensors.layer_count(), tensors.heads(), tensors.head_dim(), tensors.token_count());
    let mut out = Vec::with_capacity(size as usize);
    out.extend_from_slice(SLICE_MAGIC);
    out.extend_from_slice(&SLICE_VERSION.to_le_bytes());
    out.extend_from_slice(&(tensors.layer_count() as u16).to_le_bytes());
    out.extend_from_slice(&(tensors.heads() as u16).to_le_bytes());
    out.extend_from_slice(&(tensors.head_dim() as u16).to_le_bytes());
    out.extend_from_slice(&tokens.to_le_bytes());
    out.extend_from_slice(content_hash);
    for layer in &tensors.layers {
        for part in [&layer.q, &layer.k, &layer.v] {
            for x in part.iter() {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
    }
    Ok(out)
}

/// Parses a slice file, checking the header and the exact payload length.
pub fn decode_slice(bytes: &[u8], name: &str) -> Result<(QkvTensors, [u8; 32])> {
    let corrupt = |reason: &str| Error::CorruptSlice {
        name: name.to_string(),
        reason: reason.to_string(),
    };
    if bytes.len() < SLICE_HEADER_BYTES {
        return Err(corrupt("truncated header"));
    }
    if &bytes[0..4] != SLICE_MAGIC {
        return Err(corrupt("bad magic"));
    }
    let u16_at = |i: usize| u16::from_le_bytes([bytes[i], bytes[i + 1]]) as usize;
    if u16_at(4) != SLICE_VERSION as usize {
        return Err(corrupt("unsupported version"));
    }
    let (layers, heads, head_dim) = (u16_at(6), u16_at(8), u16_at(10));
    let tokens = u32::from_le_bytes(bytes[12..16].try_into().expect("4 bytes")) as usize;
    let mut hash = [0u8; 32];
    hash.copy_from_slice(&bytes[16..48]);
    if bytes.len() as u64 != slice_byte_size(layers, heads, head_dim, tokens) {
        return Err(corrupt("payload length does not match header"));
    }
    let n = tokens * heads * head_dim;
    let mut floats = bytes[SLICE_HEADER_BYTES..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")));
    let mut take = || floats.by_ref().take(n).collect::<Vec<f32>>();
    let layer_data = (0..layers)
        .map(|_| LayerQkv {
            q: take(),
            k: take(),
            v: take(),
        })
        .collect();
    Ok((QkvTensors::from_layers(heads, head_dim, tokens, layer_data)?, hash))
}
