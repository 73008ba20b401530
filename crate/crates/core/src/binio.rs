//! Little-endian primitives for the checkpoint and dataset containers.

use crate::error::{AmelError, Result};

#[derive(Default)]
pub(crate) struct ByteWriter {
    buf: Vec<u8>,
}

impl ByteWriter {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn bytes(&mut self, b: &[u8]) {
        self.buf.extend_from_slice(b);
    }

    pub fn u8(&mut self, v: u8) {
        self.buf.push(v);
    }

    pub fn u32(&mut self, v: u32) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    pub fn u64(&mut self, v: u64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    pub fn f32s(&mut self, values: &[f64]) {
        for &v in values {
            self.buf.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }

    /// `u32` length followed by the bytes.
    pub fn blob(&mut self, b: &[u8]) {
        self.u32(b.len() as u32);
        self.bytes(b);
    }

    pub fn into_inner(self) -> Vec<u8> {
        self.buf
    }
}

pub(crate) struct ByteReader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> ByteReader<'a> {
    pub fn new(buf: &'a [u8]) -> Self {
        Self { buf, pos: 0 }
    }

    pub fn take(&mut self, n: usize, section: &str) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(AmelError::UnexpectedEnd {
                section: section.to_string(),
            });
        }
        let out = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    pub fn magic(&mut self, expected: &'static str) -> Result<()> {
        let got = self
            .take(expected.len(), "magic")
            .map_err(|_| AmelError::BadMagic { expected })?;
        if got != expected.as_bytes() {
            return Err(AmelError::BadMagic { expected });
        }
        Ok(())
    }

    pub fn u8(&mut self, section: &str) -> Result<u8> {
        Ok(self.take(1, section)?[0])
    }

    pub fn u32(&mut self, section: &str) -> Result<u32> {
        let b = self.take(4, section)?;
        Ok(u32::from_le_bytes(b.try_into().unwrap()))
    }

    pub fn u64(&mut self, section: &str) -> Result<u64> {
        let b = self.take(8, section)?;
        Ok(u64::from_le_bytes(b.try_into().unwrap()))
    }

    pub fn f32s(&mut self, n: usize, section: &str) -> Result<Vec<f64>> {
        let b = self.take(n * 4, section)?;
        Ok(b
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect())
    }

    pub fn blob(&mut self, section: &str) -> Result<&'a [u8]> {
        let n = self.u32(section)? as usize;
        self.take(n, section)
    }

    pub fn is_at_end(&self) -> bool {
        self.pos == self.buf.len()
    }
}
