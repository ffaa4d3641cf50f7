//! DTEN tensor files: `b"DTEN1"`, a u8 dimension count, the dimensions as
//! little-endian u32, then row-major little-endian f32 data.

use std::path::Path;

use enas_unet_core::Tensor;

use crate::error::{Error, IoContext, Result};
use crate::fsutil::write_atomic;

pub const MAGIC: &[u8; 5] = b"DTEN1";

pub fn encode(t: &Tensor<f32>) -> Vec<u8> {
    let shape = t.shape();
    let mut out = Vec::with_capacity(6 + 4 * shape.len() + 4 * t.len());
    out.extend_from_slice(MAGIC);
    out.push(u8::try_from(shape.len()).expect("tensor rank fits in a byte"));
    for &d in shape {
        out.extend_from_slice(&u32::try_from(d).expect("dimension fits in u32").to_le_bytes());
    }
    for &v in t.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn decode(bytes: &[u8]) -> std::result::Result<Tensor<f32>, String> {
    let rest = bytes.strip_prefix(MAGIC).ok_or("missing DTEN1 magic")?;
    let (&ndim, rest) = rest.split_first().ok_or("truncated header")?;
    let ndim = ndim as usize;
    if rest.len() < 4 * ndim {
        return Err("truncated shape".into());
    }
    let (dims, data) = rest.split_at(4 * ndim);
    let shape: Vec<usize> = dims
        .chunks_exact(4)
        .map(|c| u32::from_le_bytes(c.try_into().unwrap()) as usize)
        .collect();
    let n = shape
        .iter()
        .try_fold(1usize, |a, &d| a.checked_mul(d))
        .ok_or("element count overflows")?;
    if n.checked_mul(4) != Some(data.len()) {
        return Err(format!("shape {shape:?} needs {} data bytes, found {}", n.saturating_mul(4), data.len()));
    }
    let values = data.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
    Tensor::new(shape, values).map_err(|e| e.to_string())
}

pub fn write(path: &Path, t: &Tensor<f32>) -> Result<()> {
    write_atomic(path, &encode(t))
}

pub fn read(path: &Path) -> Result<Tensor<f32>> {
    let bytes = std::fs::read(path).at(path)?;
    decode(&bytes).map_err(|m| Error::format(path, m))
}

/// Class labels stored as f32 values.
pub fn write_labels(path: &Path, shape: &[usize], labels: &[u8]) -> Result<()> {
    let t = Tensor::new(shape.to_vec(), labels.iter().map(|&y| y as f32).collect())?;
    write(path, &t)
}

pub fn read_labels(path: &Path) -> Result<(Vec<usize>, Vec<u8>)> {
    let t = read(path)?;
    let labels = t
        .data()
        .iter()
        .map(|&v| {
            (v >= 0.0 && v <= u8::MAX as f32 && v.fract() == 0.0)
                .then_some(v as u8)
                .ok_or_else(|| Error::format(path, format!("label value {v} is not a class id")))
        })
        .collect::<Result<_>>()?;
    Ok((t.shape().to_vec(), labels))
}
