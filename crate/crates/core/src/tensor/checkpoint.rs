//! Binary containers for parameters and single tensors. All integers and
//! floats are little-endian.
//!
//! Checkpoint (`.ckpt`):
//!
//! ```text
//! magic    8 bytes  "DBCKPT\0\0"
//! version  u32      1
//! count    u32      number of records
//! record   repeated `count` times, in lexicographic name order:
//!   name_len u32, name (UTF-8), rank u32, dims u64 x rank, values f64 x product(dims)
//! ```
//!
//! Raw tensor dump (`.tensor`):
//!
//! ```text
//! magic "DBTNSR\0\0", version u32 (1), rank u32, dims u64 x rank, values f64 x product(dims)
//! ```

use std::io::{Read, Write};

use super::{ParameterSet, Tensor};
use crate::error::{Error, Result};

const CKPT_MAGIC: &[u8; 8] = b"DBCKPT\0\0";
const TENSOR_MAGIC: &[u8; 8] = b"DBTNSR\0\0";
const VERSION: u32 = 1;

pub fn write_checkpoint<W: Write>(params: &ParameterSet, mut out: W) -> Result<()> {
    out.write_all(CKPT_MAGIC)?;
    out.write_all(&VERSION.to_le_bytes())?;
    out.write_all(&(params.len() as u32).to_le_bytes())?;
    for (name, t) in params.iter() {
        out.write_all(&(name.len() as u32).to_le_bytes())?;
        out.write_all(name.as_bytes())?;
        write_body(t, &mut out)?;
    }
    out.flush()?;
    Ok(())
}

pub fn read_checkpoint<R: Read>(mut input: R) -> Result<ParameterSet> {
    read_header(&mut input, CKPT_MAGIC, "checkpoint")?;
    let count = read_u32(&mut input)?;
    let mut params = ParameterSet::new();
    for _ in 0..count {
        let len = read_u32(&mut input)? as usize;
        if len > 4096 {
            return Err(Error::Load(format!(
                "implausible parameter name length {len}"
            )));
        }
        let mut name = vec![0u8; len];
        input.read_exact(&mut name).map_err(truncated)?;
        let name = String::from_utf8(name)
            .map_err(|_| Error::Load("parameter name is not UTF-8".into()))?;
        let tensor = read_body(&mut input)?;
        params
            .insert(name, tensor)
            .map_err(|e| Error::Load(e.to_string()))?;
    }
    Ok(params)
}

pub fn write_raw_tensor<W: Write>(tensor: &Tensor, mut out: W) -> Result<()> {
    out.write_all(TENSOR_MAGIC)?;
    out.write_all(&VERSION.to_le_bytes())?;
    write_body(tensor, &mut out)?;
    out.flush()?;
    Ok(())
}

pub fn read_raw_tensor<R: Read>(mut input: R) -> Result<Tensor> {
    read_header(&mut input, TENSOR_MAGIC, "tensor dump")?;
    read_body(&mut input)
}

fn write_body<W: Write>(t: &Tensor, out: &mut W) -> Result<()> {
    out.write_all(&(t.shape().len() as u32).to_le_bytes())?;
    for &d in t.shape() {
        out.write_all(&(d as u64).to_le_bytes())?;
    }
    for v in t.values() {
        out.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

fn read_body<R: Read>(input: &mut R) -> Result<Tensor> {
    let rank = read_u32(input)? as usize;
    if rank > 8 {
        return Err(Error::Load(format!("implausible tensor rank {rank}")));
    }
    let mut shape = Vec::with_capacity(rank);
    for _ in 0..rank {
        let mut b = [0u8; 8];
        input.read_exact(&mut b).map_err(truncated)?;
        shape.push(u64::from_le_bytes(b) as usize);
    }
    let n = shape
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .filter(|&n| n <= 1 << 32)
        .ok_or_else(|| Error::Load(format!("implausible tensor shape {shape:?}")))?;
    let mut raw = vec![0u8; n * 8];
    input.read_exact(&mut raw).map_err(truncated)?;
    let values = raw
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
        .collect();
    Tensor::new(shape, values).map_err(|e| Error::Load(e.to_string()))
}

fn read_header<R: Read>(input: &mut R, magic: &[u8; 8], what: &str) -> Result<()> {
    let mut m = [0u8; 8];
    input.read_exact(&mut m).map_err(truncated)?;
    if &m != magic {
        return Err(Error::Load(format!("not a {what} file (bad magic)")));
    }
    let version = read_u32(input)?;
    if version != VERSION {
        return Err(Error::Load(format!("unsupported {what} version {version}")));
    }
    Ok(())
}

fn read_u32<R: Read>(input: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    input.read_exact(&mut b).map_err(truncated)?;
    Ok(u32::from_le_bytes(b))
}

fn truncated(e: std::io::Error) -> Error {
    Error::Load(format!("truncated input: {e}"))
}
