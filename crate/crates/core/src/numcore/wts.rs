//! The `.wts` weight file format.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic   "WTS1"  (4 bytes)
//! count   u32     number of layer records
//! records count times:
//!   kind    u8    0=linear 1=conv3x3 2=silu 3=softplus 4=concat_condition
//!   in_dim  u32
//!   out_dim u32
//!   weights f64-le, row-major; length implied by (kind, dims):
//!           linear out*in, conv3x3 out*in*9, others none
//!   biases  f64-le; linear/conv3x3 out, others none
//! ```
//!
//! Checkpoint files for the teachers reuse the same record encoding
//! behind a role byte (see `teachers::checkpoint`).

use std::io::{Read, Write};
use std::path::Path;

use super::{LayerKind, LayerSpec, Tensor};
use crate::{Error, Result};

pub const WTS_MAGIC: &[u8; 4] = b"WTS1";

fn kind_byte(kind: LayerKind) -> u8 {
    match kind {
        LayerKind::Linear => 0,
        LayerKind::Conv3x3 => 1,
        LayerKind::SiLU => 2,
        LayerKind::Softplus => 3,
        LayerKind::ConcatCondition => 4,
    }
}

fn byte_kind(b: u8) -> Result<LayerKind> {
    Ok(match b {
        0 => LayerKind::Linear,
        1 => LayerKind::Conv3x3,
        2 => LayerKind::SiLU,
        3 => LayerKind::Softplus,
        4 => LayerKind::ConcatCondition,
        other => return Err(Error::Format(format!("unknown layer kind byte {other}"))),
    })
}

pub fn write_u32(w: &mut impl Write, v: u32) -> Result<()> {
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

pub fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut buf = [0u8; 4];
    r.read_exact(&mut buf)?;
    Ok(u32::from_le_bytes(buf))
}

pub fn write_f64_slice(w: &mut impl Write, data: &[f64]) -> Result<()> {
    let mut buf = Vec::with_capacity(data.len() * 8);
    for v in data {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    w.write_all(&buf)?;
    Ok(())
}

pub fn read_f64_vec(r: &mut impl Read, n: usize) -> Result<Vec<f64>> {
    let mut buf = vec![0u8; n * 8];
    r.read_exact(&mut buf)?;
    Ok(buf
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect())
}

pub fn write_layer(w: &mut impl Write, layer: &LayerSpec) -> Result<()> {
    w.write_all(&[kind_byte(layer.kind)])?;
    write_u32(w, layer.in_dim as u32)?;
    write_u32(w, layer.out_dim as u32)?;
    write_f64_slice(w, layer.weights.data())?;
    write_f64_slice(w, layer.biases.data())?;
    Ok(())
}

pub fn read_layer(r: &mut impl Read) -> Result<LayerSpec> {
    let mut kb = [0u8; 1];
    r.read_exact(&mut kb)?;
    let kind = byte_kind(kb[0])?;
    let in_dim = read_u32(r)? as usize;
    let out_dim = read_u32(r)? as usize;
    let (w_shape, b_len): (Vec<usize>, usize) = match kind {
        LayerKind::Linear => (vec![out_dim, in_dim], out_dim),
        LayerKind::Conv3x3 => (vec![out_dim, in_dim, 3, 3], out_dim),
        _ => (vec![0], 0),
    };
    let w_len: usize = w_shape.iter().product();
    let weights = Tensor::from_vec(&w_shape, read_f64_vec(r, w_len)?)
        .map_err(|e| Error::Format(format!("bad weights payload: {e}")))?;
    let biases = Tensor::from_vec(&[b_len], read_f64_vec(r, b_len)?)
        .map_err(|e| Error::Format(format!("bad bias payload: {e}")))?;
    Ok(LayerSpec {
        kind,
        in_dim,
        out_dim,
        weights,
        biases,
    })
}

pub fn save_net(path: &Path, net: &[LayerSpec]) -> Result<()> {
    let mut buf = Vec::new();
    buf.extend_from_slice(WTS_MAGIC);
    write_u32(&mut buf, net.len() as u32)?;
    for layer in net {
        write_layer(&mut buf, layer)?;
    }
    std::fs::write(path, buf)?;
    Ok(())
}

pub fn load_net(path: &Path) -> Result<Vec<LayerSpec>> {
    let bytes = std::fs::read(path)?;
    let mut r = bytes.as_slice();
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != WTS_MAGIC {
        return Err(Error::Format(format!(
            "bad weight file magic {:?} (expected WTS1)",
            magic
        )));
    }
    let count = read_u32(&mut r)? as usize;
    (0..count).map(|_| read_layer(&mut r)).collect()
}
