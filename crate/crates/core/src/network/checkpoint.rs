//! `LSM1` checkpoint files.
//!
//! Layout, little-endian throughout:
//!
//! ```text
//! magic        4 bytes  "LSM1"
//! layer count  u32
//! per layer:
//!   tag        u8       bits 0-1 kind (0 dense, 1 conv3x3, 2 conv3x3 strided),
//!                       bit 4 ReLU, bit 5 conv renormalization, bit 6 residual
//!   dim count  u32
//!   dims       u32 × dim count: weight shape (2 or 4 dims) then per-example input shape
//!   weights    f32 × product(weight shape), row-major
//!   biases     f32 × weight shape[0]
//! ```

use std::io::{Read, Write};

use crate::error::{Error, Result};
use crate::tensor::{DenseTensor, Scalar};

use super::{Activation, Layer, LayerKind, NetworkModel};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"LSM1";

const TAG_RELU: u8 = 1 << 4;
const TAG_RENORMALIZE: u8 = 1 << 5;
const TAG_RESIDUAL: u8 = 1 << 6;

pub fn write_checkpoint<S: Scalar, W: Write>(model: &NetworkModel<S>, mut w: W) -> Result<()> {
    w.write_all(CHECKPOINT_MAGIC)?;
    w.write_all(&(model.layers().len() as u32).to_le_bytes())?;
    for layer in model.layers() {
        let mut tag = layer.kind.tag();
        if layer.activation == Activation::Relu {
            tag |= TAG_RELU;
        }
        if layer.renormalize {
            tag |= TAG_RENORMALIZE;
        }
        if layer.residual {
            tag |= TAG_RESIDUAL;
        }
        w.write_all(&[tag])?;
        let dims: Vec<usize> = layer.weights.shape().iter().chain(&layer.input_shape).copied().collect();
        w.write_all(&(dims.len() as u32).to_le_bytes())?;
        for d in dims {
            w.write_all(&(d as u32).to_le_bytes())?;
        }
        let mut buf = Vec::with_capacity(4 * (layer.weights.len() + layer.bias.len()));
        for v in layer.weights.data().iter().chain(layer.bias.data()) {
            buf.extend_from_slice(&(v.as_f64() as f32).to_le_bytes());
        }
        w.write_all(&buf)?;
    }
    Ok(())
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Cursor<'_> {
    fn take(&mut self, n: usize, what: &str) -> Result<&[u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::Checkpoint(format!("truncated while reading {what} at byte {}", self.pos)));
        }
        let out = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }

    fn f32s<S: Scalar>(&mut self, n: usize, what: &str) -> Result<Vec<S>> {
        let raw = self.take(n.checked_mul(4).ok_or_else(|| Error::Checkpoint("size overflow".into()))?, what)?;
        Ok(raw
            .chunks_exact(4)
            .map(|c| S::of_f64(f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64))
            .collect())
    }
}

pub fn read_checkpoint<S: Scalar, R: Read>(mut r: R) -> Result<NetworkModel<S>> {
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes)?;
    let mut cur = Cursor { bytes: &bytes, pos: 0 };
    if cur.take(4, "magic")? != CHECKPOINT_MAGIC {
        return Err(Error::Checkpoint("bad magic, expected LSM1".into()));
    }
    let count = cur.u32("layer count")? as usize;
    let mut layers = Vec::with_capacity(count.min(1024));
    for i in 0..count {
        let tag = cur.take(1, "layer tag")?[0];
        let kind = LayerKind::from_tag(tag & 0x03)
            .ok_or_else(|| Error::Checkpoint(format!("layer {i}: unknown kind tag {tag:#04x}")))?;
        let ndims = cur.u32("dim count")? as usize;
        let weight_rank = if kind.is_conv() { 4 } else { 2 };
        if ndims <= weight_rank || ndims > weight_rank + 3 {
            return Err(Error::Checkpoint(format!("layer {i}: {ndims} dims for a {kind:?} layer")));
        }
        let dims: Vec<usize> = (0..ndims).map(|_| cur.u32("dims").map(|d| d as usize)).collect::<Result<_>>()?;
        let (wshape, input_shape) = dims.split_at(weight_rank);
        let wlen: usize = wshape.iter().product();
        let weights = DenseTensor::from_vec(wshape, cur.f32s(wlen, "weights")?)?;
        let bias = DenseTensor::from_vec(&[wshape[0]], cur.f32s(wshape[0], "biases")?)?;
        layers.push(Layer {
            kind,
            weights,
            bias,
            activation: if tag & TAG_RELU != 0 { Activation::Relu } else { Activation::None },
            residual: tag & TAG_RESIDUAL != 0,
            renormalize: tag & TAG_RENORMALIZE != 0,
            input_shape: input_shape.to_vec(),
        });
    }
    if cur.pos != bytes.len() {
        return Err(Error::Checkpoint(format!("{} trailing bytes", bytes.len() - cur.pos)));
    }
    NetworkModel::from_layers(layers).map_err(|e| Error::Checkpoint(e.to_string()))
}
