//! Minimal binary tensor file format.
//!
//! Layout: 4-byte magic `TNS1`, one rank byte (1 through 4), rank
//! little-endian u32 dimensions, then the elements as little-endian f32 in
//! row-major order. Values are stored at f32 width; reading widens back to
//! f64, so a round trip reproduces `v as f32 as f64` exactly.

use std::fs::File;
use std::io::{BufReader, BufWriter, ErrorKind, Read, Write};
use std::path::Path;

use thiserror::Error;

pub const TNS_MAGIC: [u8; 4] = *b"TNS1";
pub const TNS_MAX_RANK: usize = 4;
/// Upper bound on elements per file; rejects absurd headers before
/// allocating.
pub const TNS_MAX_ELEMS: usize = 1 << 28;

#[derive(Debug, Error)]
pub enum TnsError {
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("bad magic {found:?}, expected {TNS_MAGIC:?}")]
    BadMagic { found: [u8; 4] },
    #[error("rank {rank} outside 1..={TNS_MAX_RANK}")]
    BadRank { rank: u8 },
    #[error("dimension {dim} is zero or the element count exceeds {TNS_MAX_ELEMS}")]
    BadDims { dim: usize },
    #[error("file ends inside the {section}")]
    Truncated { section: &'static str },
    #[error("{extra} unexpected bytes after the payload")]
    TrailingData { extra: usize },
    #[error("shape {shape:?} does not match {len} data values")]
    ShapeMismatch { shape: Vec<usize>, len: usize },
    #[error("value at index {index} is not finite")]
    NonFinite { index: usize },
}

fn read_exact_or(
    r: &mut impl Read,
    buf: &mut [u8],
    section: &'static str,
) -> Result<(), TnsError> {
    r.read_exact(buf).map_err(|e| {
        if e.kind() == ErrorKind::UnexpectedEof {
            TnsError::Truncated { section }
        } else {
            TnsError::Io(e)
        }
    })
}

/// Writes `data` (interpreted against `shape`) to `path`, narrowing to f32.
pub fn write_tns<P: AsRef<Path>>(path: P, shape: &[usize], data: &[f64]) -> Result<(), TnsError> {
    if shape.is_empty() || shape.len() > TNS_MAX_RANK {
        return Err(TnsError::BadRank {
            rank: shape.len().min(u8::MAX as usize) as u8,
        });
    }
    let mut numel = 1usize;
    for &d in shape {
        if d == 0 || d > u32::MAX as usize {
            return Err(TnsError::BadDims { dim: d });
        }
        numel = numel
            .checked_mul(d)
            .filter(|n| *n <= TNS_MAX_ELEMS)
            .ok_or(TnsError::BadDims { dim: d })?;
    }
    if numel != data.len() {
        return Err(TnsError::ShapeMismatch {
            shape: shape.to_vec(),
            len: data.len(),
        });
    }
    if let Some(index) = data.iter().position(|v| !v.is_finite()) {
        return Err(TnsError::NonFinite { index });
    }
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(&TNS_MAGIC)?;
    w.write_all(&[shape.len() as u8])?;
    for &d in shape {
        w.write_all(&(d as u32).to_le_bytes())?;
    }
    for &v in data {
        w.write_all(&(v as f32).to_le_bytes())?;
    }
    w.flush()?;
    Ok(())
}

/// Reads a tensor file, returning its shape and values widened to f64.
pub fn read_tns<P: AsRef<Path>>(path: P) -> Result<(Vec<usize>, Vec<f64>), TnsError> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 4];
    read_exact_or(&mut r, &mut magic, "magic")?;
    if magic != TNS_MAGIC {
        return Err(TnsError::BadMagic { found: magic });
    }
    let mut rank_byte = [0u8; 1];
    read_exact_or(&mut r, &mut rank_byte, "rank")?;
    let rank = rank_byte[0];
    if rank == 0 || rank as usize > TNS_MAX_RANK {
        return Err(TnsError::BadRank { rank });
    }
    let mut shape = Vec::with_capacity(rank as usize);
    let mut numel = 1usize;
    for _ in 0..rank {
        let mut dim = [0u8; 4];
        read_exact_or(&mut r, &mut dim, "dimensions")?;
        let d = u32::from_le_bytes(dim) as usize;
        if d == 0 {
            return Err(TnsError::BadDims { dim: d });
        }
        numel = numel
            .checked_mul(d)
            .filter(|n| *n <= TNS_MAX_ELEMS)
            .ok_or(TnsError::BadDims { dim: d })?;
        shape.push(d);
    }
    let mut payload = vec![0u8; numel * 4];
    read_exact_or(&mut r, &mut payload, "payload")?;
    let data: Vec<f64> = payload
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64)
        .collect();
    let mut probe = [0u8; 1];
    match r.read(&mut probe)? {
        0 => Ok((shape, data)),
        _ => {
            let mut rest = Vec::new();
            r.read_to_end(&mut rest)?;
            Err(TnsError::TrailingData {
                extra: 1 + rest.len(),
            })
        }
    }
}
