//! `MTSR1` binary tensor format.
//!
//! Layout: magic `MTSR`, version byte `1`, dtype byte (`0` = f32, `1` = f64),
//! rank byte, `rank` little-endian `u32` extents, then the raw little-endian
//! values in row-major order.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::{numel, DType, Tensor};
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"MTSR";
pub const VERSION: u8 = 1;

fn dtype_code(d: DType) -> u8 {
    match d {
        DType::F32 => 0,
        DType::F64 => 1,
    }
}

/// Number of bytes [`write_tensor`] emits for `t`.
pub fn encoded_len(t: &Tensor) -> usize {
    4 + 1 + 1 + 1 + 4 * t.rank() + t.len() * t.dtype().byte_width()
}

pub fn write_tensor<W: Write>(w: &mut W, t: &Tensor) -> Result<()> {
    if t.rank() > u8::MAX as usize {
        return Err(Error::Format(format!("rank {} does not fit in a byte", t.rank())));
    }
    let mut buf = Vec::with_capacity(encoded_len(t));
    buf.extend_from_slice(MAGIC);
    buf.push(VERSION);
    buf.push(dtype_code(t.dtype()));
    buf.push(t.rank() as u8);
    for &e in t.shape() {
        let e = u32::try_from(e).map_err(|_| Error::Format(format!("extent {e} exceeds u32")))?;
        buf.extend_from_slice(&e.to_le_bytes());
    }
    match t.dtype() {
        DType::F32 => t.data().iter().for_each(|&v| buf.extend_from_slice(&(v as f32).to_le_bytes())),
        DType::F64 => t.data().iter().for_each(|&v| buf.extend_from_slice(&v.to_le_bytes())),
    }
    w.write_all(&buf)?;
    Ok(())
}

fn read_exact<R: Read>(r: &mut R, n: usize) -> Result<Vec<u8>> {
    let mut buf = vec![0u8; n];
    r.read_exact(&mut buf).map_err(|e| match e.kind() {
        std::io::ErrorKind::UnexpectedEof => Error::Format("truncated tensor record".into()),
        _ => Error::Io(e),
    })?;
    Ok(buf)
}

pub fn read_tensor<R: Read>(r: &mut R) -> Result<Tensor> {
    let head = read_exact(r, 7)?;
    if &head[..4] != MAGIC {
        return Err(Error::Format("bad magic, expected MTSR".into()));
    }
    if head[4] != VERSION {
        return Err(Error::Version { found: head[4], expected: VERSION });
    }
    let dtype = match head[5] {
        0 => DType::F32,
        1 => DType::F64,
        other => return Err(Error::Format(format!("unknown dtype code {other}"))),
    };
    let rank = head[6] as usize;
    let ext = read_exact(r, 4 * rank)?;
    let shape: Vec<usize> =
        ext.chunks_exact(4).map(|c| u32::from_le_bytes(c.try_into().unwrap()) as usize).collect();
    if shape.iter().any(|&e| e == 0) {
        return Err(Error::Format(format!("zero extent in shape {shape:?}")));
    }
    let n = numel(&shape);
    let raw = read_exact(r, n * dtype.byte_width())?;
    let data = match dtype {
        DType::F32 => raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64).collect(),
        DType::F64 => raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect(),
    };
    Tensor::new(&shape, data, dtype)
}

pub fn save_tensor(path: impl AsRef<Path>, t: &Tensor) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_tensor(&mut w, t)?;
    w.flush()?;
    Ok(())
}

pub fn load_tensor(path: impl AsRef<Path>) -> Result<Tensor> {
    let mut r = BufReader::new(File::open(path)?);
    read_tensor(&mut r)
}
