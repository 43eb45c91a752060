//! Binary tensor snapshots.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "TSNP"  magic, 4 bytes
//! u8      dtype tag (1 = f32, 2 = f64)
//! u8      rank
//! u64[rank]  extents
//! bytes   elements, little-endian, row-major
//! ```
//!
//! Round-trips are bit-exact, including non-finite values. The reader never
//! panics on malformed input and validates sizes before allocating.

use super::{Scalar, Tensor};
use thiserror::Error;

pub const SNAPSHOT_MAGIC: [u8; 4] = *b"TSNP";
const MAX_RANK: usize = 8;
// refuse absurd element counts before allocation; generous for this crate
const MAX_ELEMENTS: u64 = 1 << 33;

#[derive(Debug, Error)]
pub enum SnapshotError {
    #[error("bad magic bytes, not a tensor snapshot")]
    BadMagic,
    #[error("unknown dtype tag {0}")]
    UnknownDtype(u8),
    #[error("dtype mismatch: snapshot holds tag {found}, reader expects tag {expected}")]
    DtypeMismatch { expected: u8, found: u8 },
    #[error("rank {0} exceeds the supported maximum of {MAX_RANK}")]
    RankTooLarge(u8),
    #[error("declared extents overflow or exceed the element limit")]
    ExtentOverflow,
    #[error("truncated snapshot: wanted {wanted} more bytes, had {had}")]
    Truncated { wanted: usize, had: usize },
    #[error("{0} trailing bytes after snapshot payload")]
    TrailingBytes(usize),
}

pub fn write_snapshot<T: Scalar>(t: &Tensor<T>, out: &mut Vec<u8>) {
    out.extend_from_slice(&SNAPSHOT_MAGIC);
    out.push(T::DTYPE);
    out.push(t.shape().len() as u8);
    for &e in t.shape() {
        out.extend_from_slice(&(e as u64).to_le_bytes());
    }
    for &v in t.data() {
        v.write_le(out);
    }
}

/// Decodes one snapshot from the front of `bytes`, returning the tensor and
/// the number of bytes consumed.
pub fn read_snapshot_prefix<T: Scalar>(bytes: &[u8]) -> Result<(Tensor<T>, usize), SnapshotError> {
    let need = |wanted: usize, had: usize| SnapshotError::Truncated {
        wanted,
        had,
    };
    if bytes.len() < 6 {
        return Err(need(6 - bytes.len(), bytes.len()));
    }
    if bytes[..4] != SNAPSHOT_MAGIC {
        return Err(SnapshotError::BadMagic);
    }
    let dtype = bytes[4];
    if dtype != 1 && dtype != 2 {
        return Err(SnapshotError::UnknownDtype(dtype));
    }
    if dtype != T::DTYPE {
        return Err(SnapshotError::DtypeMismatch {
            expected: T::DTYPE,
            found: dtype,
        });
    }
    let rank = bytes[5];
    if rank as usize > MAX_RANK {
        return Err(SnapshotError::RankTooLarge(rank));
    }
    let mut pos = 6;
    let mut shape = Vec::with_capacity(rank as usize);
    let mut count: u64 = 1;
    for _ in 0..rank {
        if bytes.len() < pos + 8 {
            return Err(need(pos + 8 - bytes.len(), bytes.len()));
        }
        let e = u64::from_le_bytes(bytes[pos..pos + 8].try_into().unwrap());
        pos += 8;
        count = count.checked_mul(e).ok_or(SnapshotError::ExtentOverflow)?;
        if count > MAX_ELEMENTS {
            return Err(SnapshotError::ExtentOverflow);
        }
        shape.push(e as usize);
    }
    let payload = (count as usize)
        .checked_mul(T::BYTES)
        .ok_or(SnapshotError::ExtentOverflow)?;
    if bytes.len() < pos + payload {
        return Err(need(pos + payload - bytes.len(), bytes.len()));
    }
    let mut data = Vec::with_capacity(count as usize);
    for i in 0..count as usize {
        data.push(T::read_le(&bytes[pos + i * T::BYTES..]));
    }
    pos += payload;
    Ok((Tensor::from_vec(&shape, data), pos))
}

/// Decodes a standalone snapshot; trailing bytes are an error.
pub fn read_snapshot<T: Scalar>(bytes: &[u8]) -> Result<Tensor<T>, SnapshotError> {
    let (t, used) = read_snapshot_prefix(bytes)?;
    if used != bytes.len() {
        return Err(SnapshotError::TrailingBytes(bytes.len() - used));
    }
    Ok(t)
}
