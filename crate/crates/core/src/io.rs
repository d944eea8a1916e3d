//! `.pmt` tensor files and PGM dumps.
//!
//! Layout: magic `PMT1`, one dtype byte (0 = f32 LE, 1 = u8), one rank byte,
//! `rank` little-endian u32 dims, then the row-major payload.

use std::fs;
use std::io::{ErrorKind, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::mask::Mask;
use crate::tensor::{checked_numel, Tensor};

pub const MAGIC: [u8; 4] = *b"PMT1";
pub const DTYPE_F32: u8 = 0;
pub const DTYPE_U8: u8 = 1;

/// A decoded `.pmt` payload.
#[derive(Clone, Debug, PartialEq)]
pub enum Pmt {
    F32(Tensor),
    U8 { dims: Vec<usize>, data: Vec<u8> },
}

fn header(dtype: u8, dims: &[usize]) -> Result<Vec<u8>> {
    let rank = u8::try_from(dims.len()).map_err(|_| Error::DimOverflow)?;
    let mut out = Vec::with_capacity(6 + 4 * dims.len());
    out.extend_from_slice(&MAGIC);
    out.push(dtype);
    out.push(rank);
    for &d in dims {
        let d = u32::try_from(d).map_err(|_| Error::DimOverflow)?;
        out.extend_from_slice(&d.to_le_bytes());
    }
    Ok(out)
}

pub fn encode_tensor(t: &Tensor) -> Result<Vec<u8>> {
    let mut out = header(DTYPE_F32, t.dims())?;
    out.reserve(4 * t.len());
    for &v in t.data() {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
    Ok(out)
}

pub fn encode_mask(m: &Mask) -> Result<Vec<u8>> {
    let mut out = header(DTYPE_U8, &[m.height(), m.width()])?;
    out.extend_from_slice(m.data());
    Ok(out)
}

pub fn decode(bytes: &[u8]) -> Result<Pmt> {
    if bytes.len() < 6 {
        return Err(Error::MalformedHeader(format!(
            "{} bytes is shorter than the fixed header",
            bytes.len()
        )));
    }
    if bytes[..4] != MAGIC {
        return Err(Error::MalformedHeader("bad magic".into()));
    }
    let dtype = bytes[4];
    let rank = bytes[5] as usize;
    let dims_end = 6 + 4 * rank;
    if bytes.len() < dims_end {
        return Err(Error::MalformedHeader(format!(
            "rank {rank} needs {dims_end} header bytes, file has {}",
            bytes.len()
        )));
    }
    let dims: Vec<usize> = bytes[6..dims_end]
        .chunks_exact(4)
        .map(|c| u32::from_le_bytes([c[0], c[1], c[2], c[3]]) as usize)
        .collect();
    let numel = checked_numel(&dims)?;
    let elem = match dtype {
        DTYPE_F32 => 4,
        DTYPE_U8 => 1,
        other => return Err(Error::MalformedHeader(format!("unknown dtype {other}"))),
    };
    let expected = numel.checked_mul(elem).ok_or(Error::DimOverflow)?;
    let payload = &bytes[dims_end..];
    if payload.len() < expected {
        return Err(Error::TruncatedPayload {
            expected,
            found: payload.len(),
        });
    }
    if payload.len() > expected {
        return Err(Error::MalformedHeader(format!(
            "{} trailing bytes after payload",
            payload.len() - expected
        )));
    }
    match dtype {
        DTYPE_F32 => {
            let data = payload
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
                .collect();
            Ok(Pmt::F32(Tensor::new(dims, data)?))
        }
        _ => Ok(Pmt::U8 {
            dims,
            data: payload.to_vec(),
        }),
    }
}

fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    let res = fs::File::create(path).and_then(|mut f| f.write_all(bytes));
    res.map_err(|e| match e.kind() {
        ErrorKind::StorageFull => Error::DiskFull(path.to_path_buf()),
        _ => Error::Io(e),
    })
}

pub fn write_tensor(path: impl AsRef<Path>, t: &Tensor) -> Result<()> {
    write_bytes(path.as_ref(), &encode_tensor(t)?)
}

pub fn read_tensor(path: impl AsRef<Path>) -> Result<Tensor> {
    match decode(&fs::read(path)?)? {
        Pmt::F32(t) => Ok(t),
        Pmt::U8 { .. } => Err(Error::MalformedHeader("expected f32 tensor, found u8".into())),
    }
}

pub fn write_mask(path: impl AsRef<Path>, m: &Mask) -> Result<()> {
    write_bytes(path.as_ref(), &encode_mask(m)?)
}

pub fn read_mask(path: impl AsRef<Path>) -> Result<Mask> {
    match decode(&fs::read(path)?)? {
        Pmt::U8 { dims, data } if dims.len() == 2 => Mask::new(dims[0], dims[1], data),
        Pmt::U8 { dims, .. } => Err(Error::MalformedHeader(format!(
            "mask must be rank 2, found {dims:?}"
        ))),
        Pmt::F32(_) => Err(Error::MalformedHeader("expected u8 mask, found f32".into())),
    }
}

/// Writes `t` to `path`, then reads it back.
pub fn tensor_io_roundtrip(t: &Tensor, path: impl AsRef<Path>) -> Result<Tensor> {
    write_tensor(path.as_ref(), t)?;
    read_tensor(path.as_ref())
}

/// Binary PGM (P5) of a rank-2 tensor, min-max scaled to 0..=255.
pub fn write_pgm(path: impl AsRef<Path>, t: &Tensor) -> Result<()> {
    let (h, w) = (t.rows(), t.cols());
    let lo = t.data().iter().copied().fold(f64::INFINITY, f64::min);
    let hi = t.data().iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let span = if hi > lo { hi - lo } else { 1.0 };
    let mut out = format!("P5\n{w} {h}\n255\n").into_bytes();
    out.extend(
        t.data()
            .iter()
            .map(|v| (((v - lo) / span) * 255.0).round() as u8),
    );
    write_bytes(path.as_ref(), &out)
}
