//! Little-endian helpers shared by the checkpoint and subspace formats.

use std::io::{Read, Write};

use nalgebra::DMatrix;

use crate::error::{Error, Result};

pub(crate) fn expect_magic(r: &mut impl Read, magic: &[u8; 4], path: &str) -> Result<()> {
    let mut buf = [0u8; 4];
    r.read_exact(&mut buf)?;
    if &buf != magic {
        return Err(Error::Format {
            path: path.into(),
            detail: format!(
                "bad magic {:?}, expected {:?}",
                String::from_utf8_lossy(&buf),
                String::from_utf8_lossy(magic)
            ),
        });
    }
    Ok(())
}

pub(crate) fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut buf = [0u8; 4];
    r.read_exact(&mut buf)?;
    Ok(u32::from_le_bytes(buf))
}

pub(crate) fn read_f64s(r: &mut impl Read, n: usize) -> Result<Vec<f64>> {
    let mut buf = [0u8; 8];
    (0..n)
        .map(|_| {
            r.read_exact(&mut buf)?;
            Ok(f64::from_le_bytes(buf))
        })
        .collect()
}

pub(crate) fn write_f64s(w: &mut impl Write, values: impl IntoIterator<Item = f64>) -> Result<()> {
    for v in values {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

pub(crate) fn write_row_major(w: &mut impl Write, m: &DMatrix<f64>) -> Result<()> {
    for row in m.row_iter() {
        write_f64s(w, row.iter().copied())?;
    }
    Ok(())
}

pub(crate) fn read_row_major(r: &mut impl Read, rows: usize, cols: usize) -> Result<DMatrix<f64>> {
    let values = read_f64s(r, rows * cols)?;
    Ok(DMatrix::from_row_slice(rows, cols, &values))
}
