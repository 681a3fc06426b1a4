//! Little-endian helpers shared by the checkpoint, noise and record formats.

use std::io::{Read, Write};

use crate::error::{Error, Result};

pub(crate) fn write_u32(w: &mut impl Write, v: u32) -> Result<()> {
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

pub(crate) fn write_u64(w: &mut impl Write, v: u64) -> Result<()> {
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

pub(crate) fn write_f64s(w: &mut impl Write, values: &[f64]) -> Result<()> {
    let mut buf = Vec::with_capacity(values.len() * 8);
    for v in values {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    w.write_all(&buf)?;
    Ok(())
}

pub(crate) fn read_exact_or_short(r: &mut impl Read, buf: &mut [u8], offset: &mut usize) -> Result<()> {
    let mut filled = 0;
    while filled < buf.len() {
        match r.read(&mut buf[filled..]) {
            Ok(0) => return Err(Error::ShortRead(*offset + filled)),
            Ok(n) => filled += n,
            Err(e) if e.kind() == std::io::ErrorKind::Interrupted => {}
            Err(e) => return Err(e.into()),
        }
    }
    *offset += buf.len();
    Ok(())
}

/// Sequential reader that tracks its byte offset for error reporting.
pub(crate) struct Reader<R> {
    inner: R,
    offset: usize,
}

impl<R: Read> Reader<R> {
    pub(crate) fn new(inner: R) -> Self {
        Self { inner, offset: 0 }
    }

    pub(crate) fn bytes(&mut self, n: usize) -> Result<Vec<u8>> {
        let mut buf = vec![0u8; n];
        read_exact_or_short(&mut self.inner, &mut buf, &mut self.offset)?;
        Ok(buf)
    }

    pub(crate) fn magic(&mut self, kind: &'static str, expected: &[u8; 4]) -> Result<()> {
        let got = self.bytes(4)?;
        if got != expected {
            return Err(Error::BadHeader {
                kind,
                reason: format!("magic {:?}, expected {:?}", String::from_utf8_lossy(&got), String::from_utf8_lossy(expected)),
            });
        }
        Ok(())
    }

    pub(crate) fn version(&mut self, kind: &'static str, expected: u32) -> Result<()> {
        let v = self.u32()?;
        if v != expected {
            return Err(Error::BadHeader {
                kind,
                reason: format!("version {v}, expected {expected}"),
            });
        }
        Ok(())
    }

    pub(crate) fn u32(&mut self) -> Result<u32> {
        let mut b = [0u8; 4];
        read_exact_or_short(&mut self.inner, &mut b, &mut self.offset)?;
        Ok(u32::from_le_bytes(b))
    }

    pub(crate) fn u32_be(&mut self) -> Result<u32> {
        let mut b = [0u8; 4];
        read_exact_or_short(&mut self.inner, &mut b, &mut self.offset)?;
        Ok(u32::from_be_bytes(b))
    }

    pub(crate) fn u64(&mut self) -> Result<u64> {
        let mut b = [0u8; 8];
        read_exact_or_short(&mut self.inner, &mut b, &mut self.offset)?;
        Ok(u64::from_le_bytes(b))
    }

    pub(crate) fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        let raw = self.bytes(n * 8)?;
        Ok(raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
            .collect())
    }

    /// Next four bytes, or `None` at a clean end of stream.
    pub(crate) fn optional_tag(&mut self) -> Result<Option<[u8; 4]>> {
        let mut b = [0u8; 4];
        let mut filled = 0;
        while filled < 4 {
            match self.inner.read(&mut b[filled..]) {
                Ok(0) if filled == 0 => return Ok(None),
                Ok(0) => return Err(Error::ShortRead(self.offset + filled)),
                Ok(n) => filled += n,
                Err(e) if e.kind() == std::io::ErrorKind::Interrupted => {}
                Err(e) => return Err(e.into()),
            }
        }
        self.offset += 4;
        Ok(Some(b))
    }
}
