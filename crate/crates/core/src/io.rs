//! Little-endian binary container primitives shared by checkpoints and
//! feature caches.
//!
//! Every file starts with an 8-byte magic string followed by a `u32`
//! format version. Tensors are written with a shape prefix
//! (`u32` rank, then `u64` dims) followed by raw little-endian data.

use crate::error::{Error, Result};
use sha2::{Digest, Sha256};
use std::io::{Read, Write};

pub const FORMAT_VERSION: u32 = 1;

pub fn write_magic<W: Write>(w: &mut W, magic: &[u8; 8]) -> Result<()> {
    w.write_all(magic)?;
    w.write_all(&FORMAT_VERSION.to_le_bytes())?;
    Ok(())
}

pub fn read_magic<R: Read>(r: &mut R, magic: &[u8; 8]) -> Result<()> {
    let mut buf = [0u8; 8];
    r.read_exact(&mut buf)
        .map_err(|_| Error::Format("file too short for magic header".into()))?;
    if &buf != magic {
        return Err(Error::Format(format!(
            "bad magic: expected {:?}, found {:?}",
            String::from_utf8_lossy(magic),
            String::from_utf8_lossy(&buf)
        )));
    }
    let version = read_u32(r)?;
    if version != FORMAT_VERSION {
        return Err(Error::VersionMismatch {
            found: version,
            expected: FORMAT_VERSION,
        });
    }
    Ok(())
}

pub fn write_u32<W: Write>(w: &mut W, v: u32) -> Result<()> {
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

pub fn write_u64<W: Write>(w: &mut W, v: u64) -> Result<()> {
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

pub fn write_f64<W: Write>(w: &mut W, v: f64) -> Result<()> {
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

pub fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut buf = [0u8; 4];
    r.read_exact(&mut buf)
        .map_err(|_| Error::Format("unexpected end of file reading u32".into()))?;
    Ok(u32::from_le_bytes(buf))
}

pub fn read_u64<R: Read>(r: &mut R) -> Result<u64> {
    let mut buf = [0u8; 8];
    r.read_exact(&mut buf)
        .map_err(|_| Error::Format("unexpected end of file reading u64".into()))?;
    Ok(u64::from_le_bytes(buf))
}

pub fn read_f64<R: Read>(r: &mut R) -> Result<f64> {
    let mut buf = [0u8; 8];
    r.read_exact(&mut buf)
        .map_err(|_| Error::Format("unexpected end of file reading f64".into()))?;
    Ok(f64::from_le_bytes(buf))
}

/// Read a u64 that must fit in usize and stay under a sanity bound.
pub fn read_dim<R: Read>(r: &mut R, what: &str) -> Result<usize> {
    let v = read_u64(r)?;
    if v > (1 << 40) {
        return Err(Error::Format(format!("implausible {what}: {v}")));
    }
    Ok(v as usize)
}

/// Tensor with shape prefix: rank, dims, then f64 data in order.
pub fn write_tensor_f64<W: Write>(w: &mut W, shape: &[usize], data: &[f64]) -> Result<()> {
    debug_assert_eq!(shape.iter().product::<usize>(), data.len());
    write_u32(w, shape.len() as u32)?;
    for &d in shape {
        write_u64(w, d as u64)?;
    }
    for &v in data {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

/// Read a tensor and check its shape against the expectation.
pub fn read_tensor_f64<R: Read>(r: &mut R, expect_shape: &[usize]) -> Result<Vec<f64>> {
    let rank = read_u32(r)? as usize;
    if rank != expect_shape.len() {
        return Err(Error::Format(format!(
            "tensor rank {rank}, expected {}",
            expect_shape.len()
        )));
    }
    let mut n = 1usize;
    for (i, &want) in expect_shape.iter().enumerate() {
        let got = read_dim(r, "tensor dim")?;
        if got != want {
            return Err(Error::Format(format!(
                "tensor dim {i} is {got}, expected {want}"
            )));
        }
        n *= got;
    }
    let mut data = vec![0.0f64; n];
    let mut buf = [0u8; 8];
    for v in &mut data {
        r.read_exact(&mut buf)
            .map_err(|_| Error::Format("unexpected end of file in tensor data".into()))?;
        *v = f64::from_le_bytes(buf);
    }
    Ok(data)
}

/// Error unless the reader is exactly at end of file.
pub fn expect_eof<R: Read>(r: &mut R) -> Result<()> {
    let mut buf = [0u8; 1];
    match r.read(&mut buf)? {
        0 => Ok(()),
        _ => Err(Error::Format("trailing bytes after payload".into())),
    }
}

/// SHA-256 of a byte slice.
pub fn sha256(bytes: &[u8]) -> [u8; 32] {
    let mut hasher = Sha256::new();
    hasher.update(bytes);
    hasher.finalize().into()
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    sha256(bytes).iter().map(|b| format!("{b:02x}")).collect()
}
