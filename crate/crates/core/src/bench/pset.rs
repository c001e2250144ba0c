//! PSET pattern-set files.
//!
//! Layout, all little-endian:
//!
//! | bytes | field |
//! |-------|-------|
//! | 8 | magic `PSET\0\x01\0\0` |
//! | 4 | pattern count (u32) |
//! | 4 | dimension (u32) |
//! | 1 | domain: 0 bipolar, 1 unit box |
//! | 1 | precision: 0 f32, 1 f64 |
//! | 2 | reserved, zero |
//! | … | row-major payload |
//!
//! Bipolar sets are always stored as f32.

use std::io::{Read, Write};

use thiserror::Error;

use crate::patterns::{Domain, PatternBatch, PatternError};

pub const MAGIC: [u8; 8] = *b"PSET\x00\x01\x00\x00";

#[derive(Debug, Error)]
pub enum PsetError {
    #[error("not a PSET file")]
    Magic,
    #[error("unknown domain tag {0}")]
    Domain(u8),
    #[error("unknown precision tag {0}")]
    Precision(u8),
    #[error("bipolar sets must be stored as 32-bit floats")]
    BipolarPrecision,
    #[error("payload is {got} bytes, header implies {expected}")]
    Truncated { expected: usize, got: usize },
    #[error("{0} trailing bytes after payload")]
    Trailing(usize),
    #[error("pattern set too large for the format")]
    TooLarge,
    #[error(transparent)]
    Pattern(#[from] PatternError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Payload precision.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Width {
    F32,
    F64,
}

pub fn encode(set: &PatternBatch, width: Width) -> Result<Vec<u8>, PsetError> {
    let width = match set.domain() {
        Domain::Bipolar if width != Width::F32 => return Err(PsetError::BipolarPrecision),
        _ => width,
    };
    let count = u32::try_from(set.len()).map_err(|_| PsetError::TooLarge)?;
    let dim = u32::try_from(set.dim()).map_err(|_| PsetError::TooLarge)?;
    let mut out = Vec::with_capacity(20 + set.as_slice().len() * 8);
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&count.to_le_bytes());
    out.extend_from_slice(&dim.to_le_bytes());
    out.push(match set.domain() {
        Domain::Bipolar => 0,
        Domain::UnitBox => 1,
    });
    out.push(match width {
        Width::F32 => 0,
        Width::F64 => 1,
    });
    out.extend_from_slice(&[0, 0]);
    for &v in set.as_slice() {
        match width {
            Width::F32 => out.extend_from_slice(&(v as f32).to_le_bytes()),
            Width::F64 => out.extend_from_slice(&v.to_le_bytes()),
        }
    }
    Ok(out)
}

pub fn decode(bytes: &[u8]) -> Result<(PatternBatch, Width), PsetError> {
    if bytes.len() < 20 || bytes[..8] != MAGIC {
        return Err(PsetError::Magic);
    }
    let count = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes")) as usize;
    let dim = u32::from_le_bytes(bytes[12..16].try_into().expect("4 bytes")) as usize;
    let domain = match bytes[16] {
        0 => Domain::Bipolar,
        1 => Domain::UnitBox,
        t => return Err(PsetError::Domain(t)),
    };
    let width = match bytes[17] {
        0 => Width::F32,
        1 => Width::F64,
        t => return Err(PsetError::Precision(t)),
    };
    if domain == Domain::Bipolar && width != Width::F32 {
        return Err(PsetError::BipolarPrecision);
    }
    let size = match width {
        Width::F32 => 4,
        Width::F64 => 8,
    };
    let payload = &bytes[20..];
    let expected = count.checked_mul(dim).and_then(|n| n.checked_mul(size)).ok_or(PsetError::TooLarge)?;
    if payload.len() < expected {
        return Err(PsetError::Truncated { expected, got: payload.len() });
    }
    if payload.len() > expected {
        return Err(PsetError::Trailing(payload.len() - expected));
    }
    let data: Vec<f64> = match width {
        Width::F32 => payload.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64).collect(),
        Width::F64 => payload.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect(),
    };
    Ok((PatternBatch::new(domain, dim, data)?, width))
}

pub fn write_to<W: Write>(mut w: W, set: &PatternBatch, width: Width) -> Result<(), PsetError> {
    w.write_all(&encode(set, width)?)?;
    Ok(())
}

pub fn read_from<R: Read>(mut r: R) -> Result<(PatternBatch, Width), PsetError> {
    let mut buf = Vec::new();
    r.read_to_end(&mut buf)?;
    decode(&buf)
}

pub fn load(path: &std::path::Path) -> Result<PatternBatch, PsetError> {
    Ok(decode(&std::fs::read(path)?)?.0)
}
