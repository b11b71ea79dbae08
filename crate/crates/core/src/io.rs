//! Little-endian binary helpers shared by the dataset, checkpoint and CAM
//! dump containers.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

pub(crate) struct Writer {
    buf: Vec<u8>,
}

impl Writer {
    pub fn new() -> Self {
        Self { buf: Vec::new() }
    }

    pub fn bytes(&mut self, b: &[u8]) {
        self.buf.extend_from_slice(b);
    }

    pub fn u32(&mut self, v: u32) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    pub fn u64(&mut self, v: u64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    pub fn f32s(&mut self, vs: &[f32]) {
        self.buf.reserve(vs.len() * 4);
        for v in vs {
            self.buf.extend_from_slice(&v.to_le_bytes());
        }
    }

    pub fn into_bytes(self) -> Vec<u8> {
        self.buf
    }

    pub fn finish(self, path: &Path) -> Result<()> {
        if path.as_os_str().is_empty() {
            return Err(Error::invalid("empty output path"));
        }
        if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
            fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        fs::write(path, self.buf).map_err(|e| Error::io(path, e))
    }
}

pub(crate) struct Reader {
    what: &'static str,
    buf: Vec<u8>,
    pos: usize,
}

impl Reader {
    pub fn open(path: &Path, what: &'static str) -> Result<Self> {
        if path.as_os_str().is_empty() {
            return Err(Error::invalid("empty input path"));
        }
        let buf = fs::read(path).map_err(|e| Error::io(path, e))?;
        Ok(Self { what, buf, pos: 0 })
    }

    #[cfg(test)]
    pub fn from_bytes(buf: Vec<u8>, what: &'static str) -> Self {
        Self { what, buf, pos: 0 }
    }

    pub fn fail(&self, msg: impl Into<String>) -> Error {
        Error::Format {
            what: self.what,
            pos: self.pos as u64,
            msg: msg.into(),
        }
    }

    pub fn remaining(&self) -> usize {
        self.buf.len() - self.pos
    }

    /// Fails with the current position unless `n` more bytes exist.
    pub fn need(&self, n: u128) -> Result<()> {
        if n > self.remaining() as u128 {
            return Err(self.fail(format!(
                "truncated: need {n} bytes, {} remain",
                self.remaining()
            )));
        }
        Ok(())
    }

    pub fn take(&mut self, n: usize) -> Result<&[u8]> {
        self.need(n as u128)?;
        let out = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    pub fn magic(&mut self, expected: &[u8; 8]) -> Result<()> {
        let start = self.pos;
        let got = self.take(8)?;
        if got != expected {
            let got = String::from_utf8_lossy(got).into_owned();
            self.pos = start;
            return Err(self.fail(format!(
                "bad magic {got:?}, expected {:?}",
                String::from_utf8_lossy(expected)
            )));
        }
        Ok(())
    }

    pub fn u32(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes(b.try_into().unwrap()))
    }

    pub fn u64(&mut self) -> Result<u64> {
        let b = self.take(8)?;
        Ok(u64::from_le_bytes(b.try_into().unwrap()))
    }

    pub fn f32s(&mut self, n: usize) -> Result<Vec<f32>> {
        let b = self.take(n.checked_mul(4).ok_or_else(|| self.fail("length overflow"))?)?;
        Ok(b.chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }

    pub fn finish(&self) -> Result<()> {
        if self.remaining() != 0 {
            return Err(self.fail(format!("{} trailing bytes", self.remaining())));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn truncation_reports_position() {
        let mut r = Reader::from_bytes(vec![1, 0, 0, 0, 7], "test");
        assert_eq!(r.u32().unwrap(), 1);
        match r.u32().unwrap_err() {
            Error::Format { pos, .. } => assert_eq!(pos, 4),
            e => panic!("{e}"),
        }
    }
}
