//! Binary checkpoint serialization.
//!
//! Layout: magic `HFCK`, format version as little-endian u32, a metadata
//! block (u32 byte length, then the bytes; the caller decides what they
//! mean), then one record per tensor in collection order. Each record is
//! the name length (u32), the UTF-8 name bytes, the rank (u32), each extent
//! as u64, and the row-major data as IEEE-754 32-bit floats. All integers
//! and floats are little-endian. Records run to end of file; truncation is
//! an error.

use super::params::ParamSet;
use crate::{Error, Result};
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

pub const MAGIC: [u8; 4] = *b"HFCK";
pub const VERSION: u32 = 1;

/// Writes a metadata block and a parameter set to `path`.
pub fn write(path: &Path, meta: &[u8], params: &ParamSet<f32>) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(&MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&(meta.len() as u32).to_le_bytes())?;
    w.write_all(meta)?;
    for p in params.entries() {
        let name = p.name.as_bytes();
        w.write_all(&(name.len() as u32).to_le_bytes())?;
        w.write_all(name)?;
        w.write_all(&(p.shape.len() as u32).to_le_bytes())?;
        for &dim in &p.shape {
            w.write_all(&(dim as u64).to_le_bytes())?;
        }
        for &v in &p.data {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Reads a checkpoint written by [`write`], preserving tensor order.
pub fn read(path: &Path) -> Result<(Vec<u8>, ParamSet<f32>)> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)
        .map_err(|_| Error::Format("checkpoint shorter than its magic".into()))?;
    if magic != MAGIC {
        return Err(Error::Format(format!(
            "bad checkpoint magic {magic:?}, expected {MAGIC:?}"
        )));
    }
    let version = read_u32(&mut r).ok_or_else(|| Error::Format("missing version".into()))?;
    if version != VERSION {
        return Err(Error::Format(format!(
            "unsupported checkpoint version {version}, expected {VERSION}"
        )));
    }
    let meta_len =
        read_u32(&mut r).ok_or_else(|| Error::Format("missing metadata length".into()))? as usize;
    let mut meta = vec![0u8; meta_len];
    r.read_exact(&mut meta)
        .map_err(|_| Error::Format("truncated metadata block".into()))?;
    let mut params = ParamSet::new();
    loop {
        let name_len = match read_u32(&mut r) {
            Some(n) => n as usize,
            None => break,
        };
        let mut name_bytes = vec![0u8; name_len];
        r.read_exact(&mut name_bytes)
            .map_err(|_| Error::Format("truncated tensor name".into()))?;
        let name = String::from_utf8(name_bytes)
            .map_err(|_| Error::Format("tensor name is not UTF-8".into()))?;
        let rank = read_u32(&mut r).ok_or_else(|| truncated(&name))? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(read_u64(&mut r).ok_or_else(|| truncated(&name))? as usize);
        }
        let numel: usize = shape.iter().product();
        let mut data = Vec::with_capacity(numel);
        let mut buf = [0u8; 4];
        for _ in 0..numel {
            r.read_exact(&mut buf).map_err(|_| truncated(&name))?;
            data.push(f32::from_le_bytes(buf));
        }
        params.push(&name, shape, data)?;
    }
    Ok((meta, params))
}

fn truncated(name: &str) -> Error {
    Error::Format(format!("checkpoint truncated inside tensor {name}"))
}

fn read_u32<R: Read>(r: &mut R) -> Option<u32> {
    let mut buf = [0u8; 4];
    match r.read_exact(&mut buf) {
        Ok(()) => Some(u32::from_le_bytes(buf)),
        Err(_) => None,
    }
}

fn read_u64<R: Read>(r: &mut R) -> Option<u64> {
    let mut buf = [0u8; 8];
    match r.read_exact(&mut buf) {
        Ok(()) => Some(u64::from_le_bytes(buf)),
        Err(_) => None,
    }
}
