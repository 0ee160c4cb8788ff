//! Versioned little-endian binary container shared by dictionaries and
//! weight files.
//!
//! Layout: 8-byte magic `TRKBENCH`, `u32` version, `u32` kind, then a
//! kind-specific body of `u64` counts and `f64` values.

use std::io::{Read, Write};

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 8] = b"TRKBENCH";
pub const VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[repr(u32)]
pub enum Kind {
    Dictionary = 1,
    Weights = 2,
}

pub fn write_header<W: Write>(w: &mut W, kind: Kind) -> Result<()> {
    w.write_all(MAGIC)?;
    w.write_u32::<LittleEndian>(VERSION)?;
    w.write_u32::<LittleEndian>(kind as u32)?;
    Ok(())
}

pub fn read_header<R: Read>(r: &mut R, kind: Kind) -> Result<()> {
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::Container("bad magic".into()));
    }
    let version = r.read_u32::<LittleEndian>()?;
    if version != VERSION {
        return Err(Error::Container(format!("unsupported version {version}")));
    }
    let got = r.read_u32::<LittleEndian>()?;
    if got != kind as u32 {
        return Err(Error::Container(format!("expected kind {}, found {got}", kind as u32)));
    }
    Ok(())
}

pub fn write_f64s<W: Write>(w: &mut W, values: &[f64]) -> Result<()> {
    for &v in values {
        w.write_f64::<LittleEndian>(v)?;
    }
    Ok(())
}

pub fn read_f64s<R: Read>(r: &mut R, n: usize) -> Result<Vec<f64>> {
    let mut out = vec![0.0; n];
    r.read_f64_into::<LittleEndian>(&mut out)?;
    Ok(out)
}

pub fn write_u64<W: Write>(w: &mut W, v: u64) -> Result<()> {
    Ok(w.write_u64::<LittleEndian>(v)?)
}

pub fn read_u64<R: Read>(r: &mut R) -> Result<u64> {
    Ok(r.read_u64::<LittleEndian>()?)
}

/// Reads a count and rejects values that would not fit in memory.
pub fn read_len<R: Read>(r: &mut R, limit: u64) -> Result<usize> {
    let n = read_u64(r)?;
    if n > limit {
        return Err(Error::Container(format!("length {n} exceeds limit {limit}")));
    }
    Ok(n as usize)
}
