//! Little-endian helpers shared by the binary artifact formats.

use byteorder::{ByteOrder, LittleEndian, WriteBytesExt};

use crate::error::{Error, Result};

/// Cursor over a byte buffer that reports failures against a named format.
pub(crate) struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    context: &'static str,
}

impl<'a> Reader<'a> {
    pub fn new(bytes: &'a [u8], context: &'static str) -> Self {
        Reader { bytes, pos: 0, context }
    }

    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        match end {
            Some(end) => {
                let out = &self.bytes[self.pos..end];
                self.pos = end;
                Ok(out)
            }
            None => Err(Error::parse(
                self.context,
                format!("truncated while reading {what} at offset {}", self.pos),
            )),
        }
    }

    pub fn magic(&mut self, expected: &[u8; 4]) -> Result<()> {
        let got = self.take(4, "magic")?;
        if got != expected {
            return Err(Error::parse(
                self.context,
                format!(
                    "bad magic {:?}, expected {:?}",
                    String::from_utf8_lossy(got),
                    String::from_utf8_lossy(expected)
                ),
            ));
        }
        Ok(())
    }

    pub fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(LittleEndian::read_u32(self.take(4, what)?))
    }

    pub fn f32s(&mut self, n: usize, what: &str) -> Result<Vec<f32>> {
        let bytes = n
            .checked_mul(4)
            .ok_or_else(|| Error::parse(self.context, format!("{what} length overflows")))?;
        let raw = self.take(bytes, what)?;
        let mut out = vec![0f32; n];
        LittleEndian::read_f32_into(raw, &mut out);
        Ok(out)
    }

    pub fn f64s(&mut self, n: usize, what: &str) -> Result<Vec<f64>> {
        let bytes = n
            .checked_mul(8)
            .ok_or_else(|| Error::parse(self.context, format!("{what} length overflows")))?;
        let raw = self.take(bytes, what)?;
        let mut out = vec![0f64; n];
        LittleEndian::read_f64_into(raw, &mut out);
        Ok(out)
    }

    pub fn bytes(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        self.take(n, what)
    }

    pub fn finish(self) -> Result<()> {
        if self.pos != self.bytes.len() {
            return Err(Error::parse(
                self.context,
                format!("{} trailing bytes", self.bytes.len() - self.pos),
            ));
        }
        Ok(())
    }

    pub fn error(&self, message: impl Into<String>) -> Error {
        Error::parse(self.context, message)
    }
}

pub(crate) fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.write_u32::<LittleEndian>(v).expect("vec write");
}

pub(crate) fn put_f32(out: &mut Vec<u8>, v: f32) {
    out.write_f32::<LittleEndian>(v).expect("vec write");
}

pub(crate) fn put_f64(out: &mut Vec<u8>, v: f64) {
    out.write_f64::<LittleEndian>(v).expect("vec write");
}

pub(crate) fn dim_u32(v: usize, what: &str) -> Result<u32> {
    u32::try_from(v).map_err(|_| Error::invalid(format!("{what} {v} does not fit in u32")))
}

/// Rejects non-finite payload values.
pub(crate) fn check_finite(values: &[f32], reader: &Reader<'_>, what: &str) -> Result<()> {
    if let Some(i) = values.iter().position(|v| !v.is_finite()) {
        return Err(reader.error(format!("{what}[{i}] is not finite")));
    }
    Ok(())
}
