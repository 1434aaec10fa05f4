//! Little-endian primitives for the binary container formats.

use std::io::{Read, Write};

use crate::error::{Error, Result};

pub(crate) fn write_u32(w: &mut impl Write, v: u32) -> Result<()> {
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

pub(crate) fn write_f32(w: &mut impl Write, v: f32) -> Result<()> {
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

pub(crate) fn write_str(w: &mut impl Write, s: &str) -> Result<()> {
    write_u32(w, len_u32(s.len())?)?;
    w.write_all(s.as_bytes())?;
    Ok(())
}

pub(crate) fn len_u32(n: usize) -> Result<u32> {
    u32::try_from(n).map_err(|_| Error::InvalidArgument(format!("length {n} does not fit in u32")))
}

fn read_exact<const N: usize>(r: &mut impl Read, what: &str) -> Result<[u8; N]> {
    let mut buf = [0u8; N];
    r.read_exact(&mut buf)
        .map_err(|e| Error::Corrupt(format!("truncated while reading {what}: {e}")))?;
    Ok(buf)
}

pub(crate) fn read_u8(r: &mut impl Read, what: &str) -> Result<u8> {
    Ok(read_exact::<1>(r, what)?[0])
}

pub(crate) fn read_u32(r: &mut impl Read, what: &str) -> Result<u32> {
    Ok(u32::from_le_bytes(read_exact::<4>(r, what)?))
}

pub(crate) fn read_f32(r: &mut impl Read, what: &str) -> Result<f32> {
    Ok(f32::from_le_bytes(read_exact::<4>(r, what)?))
}

/// Reads a length-prefixed UTF-8 string, refusing lengths above `max`.
pub(crate) fn read_str(r: &mut impl Read, max: usize, what: &str) -> Result<String> {
    let len = read_u32(r, what)? as usize;
    if len > max {
        return Err(Error::Corrupt(format!("{what}: length {len} exceeds {max}")));
    }
    let mut buf = vec![0u8; len];
    r.read_exact(&mut buf)
        .map_err(|e| Error::Corrupt(format!("truncated while reading {what}: {e}")))?;
    String::from_utf8(buf).map_err(|_| Error::Corrupt(format!("{what} is not UTF-8")))
}

pub(crate) fn expect_magic(r: &mut impl Read, magic: &[u8; 5]) -> Result<()> {
    let got = read_exact::<5>(r, "magic")?;
    if &got != magic {
        return Err(Error::Corrupt(format!(
            "bad magic {:?}, expected {:?}",
            String::from_utf8_lossy(&got),
            String::from_utf8_lossy(magic)
        )));
    }
    Ok(())
}
