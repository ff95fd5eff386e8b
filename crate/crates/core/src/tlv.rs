//! Tag-length-value records: 1-byte tag, 4-byte big-endian length, value.

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum TlvError {
    #[error("truncated input at offset {0}")]
    Truncated(usize),
    #[error("unexpected tag {found:#04x} (wanted {wanted:#04x})")]
    UnexpectedTag { found: u8, wanted: u8 },
    #[error("malformed field: {0}")]
    Malformed(&'static str),
}

pub fn put(out: &mut Vec<u8>, tag: u8, value: &[u8]) {
    out.push(tag);
    out.extend_from_slice(&(value.len() as u32).to_be_bytes());
    out.extend_from_slice(value);
}

/// Sequential reader over a byte slice.
pub struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    pub fn new(buf: &'a [u8]) -> Self {
        Self { buf, pos: 0 }
    }

    pub fn is_empty(&self) -> bool {
        self.pos >= self.buf.len()
    }

    pub fn position(&self) -> usize {
        self.pos
    }

    pub fn take(&mut self, n: usize) -> Result<&'a [u8], TlvError> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or(TlvError::Truncated(self.pos))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    pub fn u8(&mut self) -> Result<u8, TlvError> {
        Ok(self.take(1)?[0])
    }

    pub fn u16(&mut self) -> Result<u16, TlvError> {
        Ok(u16::from_be_bytes(self.take(2)?.try_into().unwrap()))
    }

    pub fn u32(&mut self) -> Result<u32, TlvError> {
        Ok(u32::from_be_bytes(self.take(4)?.try_into().unwrap()))
    }

    pub fn u64(&mut self) -> Result<u64, TlvError> {
        Ok(u64::from_be_bytes(self.take(8)?.try_into().unwrap()))
    }

    pub fn peek_tag(&self) -> Option<u8> {
        self.buf.get(self.pos).copied()
    }

    /// Reads one TLV item, returning `(tag, value)`.
    pub fn item(&mut self) -> Result<(u8, &'a [u8]), TlvError> {
        let tag = self.u8()?;
        let len = self.u32()? as usize;
        Ok((tag, self.take(len)?))
    }

    pub fn expect(&mut self, wanted: u8) -> Result<&'a [u8], TlvError> {
        let (found, v) = self.item()?;
        if found != wanted {
            return Err(TlvError::UnexpectedTag { found, wanted });
        }
        Ok(v)
    }
}
