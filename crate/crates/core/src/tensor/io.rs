//! Raw tensor dump: the 8-byte magic `QNTENSOR`, a little-endian `u32` rank,
//! `rank` little-endian `u32` extents, then the elements as little-endian
//! IEEE-754 values. The element width is not stored; readers are typed.

use std::io::{Read, Write};

use super::{Element, Shape, Tensor};
use crate::error::{Error, Result};

pub const TENSOR_MAGIC: &[u8; 8] = b"QNTENSOR";

pub fn write_tensor_dump<T: Element, W: Write>(out: &mut W, tensor: &Tensor<T>) -> Result<()> {
    let mut buf = Vec::with_capacity(16 + 4 * tensor.shape().rank() + T::WIDTH * tensor.numel());
    buf.extend_from_slice(TENSOR_MAGIC);
    buf.extend_from_slice(&(tensor.shape().rank() as u32).to_le_bytes());
    for &d in tensor.dims() {
        let d = u32::try_from(d).map_err(|_| Error::InvalidShape(format!("extent {d} exceeds u32")))?;
        buf.extend_from_slice(&d.to_le_bytes());
    }
    for &x in tensor.data() {
        x.write_le(&mut buf);
    }
    out.write_all(&buf)?;
    Ok(())
}

pub fn read_tensor_dump<T: Element, R: Read>(input: &mut R) -> Result<Tensor<T>> {
    let mut magic = [0u8; 8];
    input.read_exact(&mut magic)?;
    if &magic != TENSOR_MAGIC {
        return Err(Error::Format { offset: 0, message: "missing QNTENSOR magic".into() });
    }
    let rank = read_u32(input)? as usize;
    if rank == 0 || rank > 16 {
        return Err(Error::Format { offset: 8, message: format!("implausible rank {rank}") });
    }
    let dims = (0..rank).map(|_| read_u32(input).map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
    let shape = Shape::new(dims)?;
    let mut raw = vec![0u8; shape.numel() * T::WIDTH];
    input.read_exact(&mut raw)?;
    let data = raw.chunks_exact(T::WIDTH).map(T::read_le).collect();
    Ok(Tensor::from_parts(shape, data))
}

impl<T: Element> Tensor<T> {
    pub fn to_dump_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        write_tensor_dump(&mut out, self).expect("writing to a Vec cannot fail");
        out
    }

    /// Parses a complete dump; trailing bytes (e.g. a width mismatch) are an error.
    pub fn from_dump_bytes(bytes: &[u8]) -> Result<Self> {
        let mut cursor = bytes;
        let t = read_tensor_dump(&mut cursor)?;
        if !cursor.is_empty() {
            return Err(Error::Format {
                offset: bytes.len() - cursor.len(),
                message: format!("{} trailing bytes after {} tensor", cursor.len(), T::NAME),
            });
        }
        Ok(t)
    }
}

fn read_u32<R: Read>(input: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    input.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}
