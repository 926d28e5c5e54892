//! PKCK checkpoint format.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic "PKCK" | version u16 | rng_seed u64 | layer_count u32
//! per layer:
//!   kind u8 (0 conv, 1 dense, 2 relu, 3 global_avg_pool, 4 flatten)
//!   conv:  stride u32 | padding u32 | has_bias u8 | prunable u8
//!          | shape (u32 count, u32 each) | weights f32* | bias f32*
//!          | mask bits | frozen bits
//!   dense: prunable u8 | shape (u32 count, u32 each) | weights f32*
//!          | bias f32* | mask bits | frozen bits
//! ```
//!
//! Mask/frozen vectors pack LSB-first, ceil(M/8) bytes. Round-trips are
//! bit-exact.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::layer::{ConvLayer, DenseLayer, Layer};
use crate::network::Network;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"PKCK";
pub const VERSION: u16 = 1;

const KIND_CONV: u8 = 0;
const KIND_DENSE: u8 = 1;
const KIND_RELU: u8 = 2;
const KIND_GAP: u8 = 3;
const KIND_FLATTEN: u8 = 4;

pub fn to_bytes(net: &Network) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&net.rng_seed.to_le_bytes());
    out.extend_from_slice(&(net.layers.len() as u32).to_le_bytes());
    for layer in &net.layers {
        match layer {
            Layer::Conv(conv) => {
                out.push(KIND_CONV);
                out.extend_from_slice(&(conv.stride as u32).to_le_bytes());
                out.extend_from_slice(&(conv.padding as u32).to_le_bytes());
                out.push(u8::from(conv.bias.is_some()));
                out.push(u8::from(conv.prunable));
                write_shape(&mut out, conv.filters.shape());
                write_f32s(&mut out, conv.filters.data());
                if let Some(b) = &conv.bias {
                    write_f32s(&mut out, b.data());
                }
                write_bits(&mut out, &conv.mask);
                write_bits(&mut out, &conv.frozen);
            }
            Layer::Dense(dense) => {
                out.push(KIND_DENSE);
                out.push(u8::from(dense.prunable));
                write_shape(&mut out, dense.weights.shape());
                write_f32s(&mut out, dense.weights.data());
                write_f32s(&mut out, dense.bias.data());
                write_bits(&mut out, &dense.mask);
                write_bits(&mut out, &dense.frozen);
            }
            Layer::Relu => out.push(KIND_RELU),
            Layer::GlobalAvgPool => out.push(KIND_GAP),
            Layer::Flatten => out.push(KIND_FLATTEN),
        }
    }
    out
}

pub fn from_bytes(bytes: &[u8]) -> Result<Network> {
    let mut r = Reader { bytes, pos: 0 };
    let magic = r.take(4)?;
    if magic != MAGIC {
        return Err(Error::Checkpoint(format!(
            "bad magic {magic:?}, expected {MAGIC:?}"
        )));
    }
    let version = r.u16()?;
    if version != VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported version {version}, expected {VERSION}"
        )));
    }
    let rng_seed = r.u64()?;
    let layer_count = r.u32()? as usize;
    let mut layers = Vec::with_capacity(layer_count);
    for _ in 0..layer_count {
        let kind = r.u8()?;
        match kind {
            KIND_CONV => {
                let stride = r.u32()? as usize;
                let padding = r.u32()? as usize;
                let has_bias = r.u8()? != 0;
                let prunable = r.u8()? != 0;
                let shape = r.shape()?;
                if shape.len() != 4 {
                    return Err(Error::Checkpoint(format!(
                        "conv filters must be rank 4, got {shape:?}"
                    )));
                }
                let filters = Tensor::from_vec(&shape, r.f32s(shape.iter().product())?)
                    .map_err(|e| Error::Checkpoint(e.to_string()))?;
                let m = shape[0];
                let bias = if has_bias {
                    Some(
                        Tensor::from_vec(&[m], r.f32s(m)?)
                            .map_err(|e| Error::Checkpoint(e.to_string()))?,
                    )
                } else {
                    None
                };
                let mask = r.bits(m)?;
                let frozen = r.bits(m)?;
                let mut conv = ConvLayer::new(filters, bias, stride, padding);
                conv.mask = mask;
                conv.frozen = frozen;
                conv.prunable = prunable;
                layers.push(Layer::Conv(conv));
            }
            KIND_DENSE => {
                let prunable = r.u8()? != 0;
                let shape = r.shape()?;
                if shape.len() != 2 {
                    return Err(Error::Checkpoint(format!(
                        "dense weights must be rank 2, got {shape:?}"
                    )));
                }
                let weights = Tensor::from_vec(&shape, r.f32s(shape.iter().product())?)
                    .map_err(|e| Error::Checkpoint(e.to_string()))?;
                let out_dim = shape[0];
                let bias = Tensor::from_vec(&[out_dim], r.f32s(out_dim)?)
                    .map_err(|e| Error::Checkpoint(e.to_string()))?;
                let mask = r.bits(out_dim)?;
                let frozen = r.bits(out_dim)?;
                let mut dense = DenseLayer::new(weights, bias);
                dense.mask = mask;
                dense.frozen = frozen;
                dense.prunable = prunable;
                layers.push(Layer::Dense(dense));
            }
            KIND_RELU => layers.push(Layer::Relu),
            KIND_GAP => layers.push(Layer::GlobalAvgPool),
            KIND_FLATTEN => layers.push(Layer::Flatten),
            other => {
                return Err(Error::Checkpoint(format!("unknown layer kind {other}")));
            }
        }
    }
    if r.pos != bytes.len() {
        return Err(Error::Checkpoint(format!(
            "{} trailing bytes after last layer",
            bytes.len() - r.pos
        )));
    }
    Network::new(layers, rng_seed)
}

pub fn write_checkpoint(net: &Network, path: &Path) -> Result<()> {
    fs::write(path, to_bytes(net))?;
    Ok(())
}

pub fn read_checkpoint(path: &Path) -> Result<Network> {
    let bytes = fs::read(path)?;
    from_bytes(&bytes)
}

fn write_shape(out: &mut Vec<u8>, shape: &[usize]) {
    out.extend_from_slice(&(shape.len() as u32).to_le_bytes());
    for d in shape {
        out.extend_from_slice(&(*d as u32).to_le_bytes());
    }
}

fn write_f32s(out: &mut Vec<u8>, vals: &[f32]) {
    for v in vals {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

fn write_bits(out: &mut Vec<u8>, bits: &[bool]) {
    let mut bytes = vec![0u8; bits.len().div_ceil(8)];
    for (i, b) in bits.iter().enumerate() {
        if *b {
            bytes[i / 8] |= 1 << (i % 8);
        }
    }
    out.extend_from_slice(&bytes);
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::Checkpoint(format!(
                "truncated: needed {n} bytes at offset {}, only {} remain",
                self.pos,
                self.bytes.len() - self.pos
            )));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn shape(&mut self) -> Result<Vec<usize>> {
        let rank = self.u32()? as usize;
        if rank > 8 {
            return Err(Error::Checkpoint(format!("implausible tensor rank {rank}")));
        }
        (0..rank).map(|_| Ok(self.u32()? as usize)).collect()
    }

    fn f32s(&mut self, n: usize) -> Result<Vec<f32>> {
        let raw = self.take(n * 4)?;
        Ok(raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }

    fn bits(&mut self, n: usize) -> Result<Vec<bool>> {
        let raw = self.take(n.div_ceil(8))?;
        Ok((0..n).map(|i| raw[i / 8] & (1 << (i % 8)) != 0).collect())
    }
}
