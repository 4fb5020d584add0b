//! Binary parameter checkpoints.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! b"ALTC" | version: u32 | record count: u32
//! per record:
//!   layer index: u32 (two's-complement bits of an i32; embeddings are -1)
//!   name length: u32 | name: UTF-8 bytes
//!   rank: u64 | dims: rank x u64
//!   values: prod(dims) x f64
//! ```

use std::io::{Read, Write};

use crate::Scalar;

use super::{Tensor, TensorError};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"ALTC";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct CheckpointRecord<T> {
    pub layer: i32,
    pub name: String,
    pub tensor: Tensor<T>,
}

pub fn write_checkpoint<T: Scalar, W: Write>(
    mut w: W,
    records: &[CheckpointRecord<T>],
) -> Result<(), TensorError> {
    w.write_all(CHECKPOINT_MAGIC)?;
    w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
    let count = u32::try_from(records.len())
        .map_err(|_| TensorError::Checkpoint("too many records".into()))?;
    w.write_all(&count.to_le_bytes())?;
    for r in records {
        w.write_all(&(r.layer as u32).to_le_bytes())?;
        let name = r.name.as_bytes();
        w.write_all(&(name.len() as u32).to_le_bytes())?;
        w.write_all(name)?;
        let shape = r.tensor.shape();
        w.write_all(&(shape.len() as u64).to_le_bytes())?;
        for &d in shape {
            w.write_all(&(d as u64).to_le_bytes())?;
        }
        let mut buf = Vec::with_capacity(r.tensor.len() * 8);
        for &x in r.tensor.data() {
            buf.extend_from_slice(&x.as_f64().to_le_bytes());
        }
        w.write_all(&buf)?;
    }
    w.flush()?;
    Ok(())
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32, TensorError> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64<R: Read>(r: &mut R) -> Result<u64, TensorError> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

pub fn read_checkpoint<T: Scalar, R: Read>(
    mut r: R,
) -> Result<Vec<CheckpointRecord<T>>, TensorError> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(TensorError::Checkpoint(format!("bad magic {magic:?}")));
    }
    let version = read_u32(&mut r)?;
    if version != CHECKPOINT_VERSION {
        return Err(TensorError::Checkpoint(format!(
            "unsupported version {version}"
        )));
    }
    let count = read_u32(&mut r)? as usize;
    let mut records = Vec::with_capacity(count);
    for _ in 0..count {
        let layer = read_u32(&mut r)? as i32;
        let name_len = read_u32(&mut r)? as usize;
        let mut name = vec![0u8; name_len];
        r.read_exact(&mut name)?;
        let name = String::from_utf8(name).map_err(|e| TensorError::Checkpoint(e.to_string()))?;
        let rank = read_u64(&mut r)? as usize;
        if rank > 8 {
            return Err(TensorError::Checkpoint(format!(
                "rank {rank} of `{name}` too large"
            )));
        }
        let shape = (0..rank)
            .map(|_| read_u64(&mut r).map(|d| d as usize))
            .collect::<Result<Vec<_>, _>>()?;
        let n: usize = shape.iter().product();
        let mut raw = vec![0u8; n * 8];
        r.read_exact(&mut raw)?;
        let data = raw
            .chunks_exact(8)
            .map(|c| T::lit(f64::from_le_bytes(c.try_into().expect("8-byte chunk"))))
            .collect();
        records.push(CheckpointRecord {
            layer,
            name,
            tensor: Tensor::new(shape, data)?,
        });
    }
    Ok(records)
}
