//! Little-endian framing shared by the dataset and checkpoint formats, plus
//! atomic file replacement.

use std::fs;
use std::io::Write;
use std::path::Path;

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum FormatError {
    #[error("not a {expected} file")]
    BadMagic { expected: &'static str },
    #[error("unsupported {format} version {found}")]
    UnsupportedVersion { format: &'static str, found: u32 },
    #[error("CRC mismatch: stored {stored:08x}, computed {computed:08x}")]
    Crc { stored: u32, computed: u32 },
    #[error("truncated file: needed {needed} more bytes at offset {offset}")]
    Truncated { offset: usize, needed: usize },
    #[error("malformed file: {0}")]
    Malformed(String),
}

#[derive(Debug, Default)]
pub struct Writer {
    buf: Vec<u8>,
}

impl Writer {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn bytes(&mut self, b: &[u8]) {
        self.buf.extend_from_slice(b);
    }

    pub fn u8(&mut self, v: u8) {
        self.buf.push(v);
    }

    pub fn u16(&mut self, v: u16) {
        self.bytes(&v.to_le_bytes());
    }

    pub fn u32(&mut self, v: u32) {
        self.bytes(&v.to_le_bytes());
    }

    pub fn u64(&mut self, v: u64) {
        self.bytes(&v.to_le_bytes());
    }

    pub fn f32(&mut self, v: f32) {
        self.bytes(&v.to_le_bytes());
    }

    pub fn f64(&mut self, v: f64) {
        self.bytes(&v.to_le_bytes());
    }

    pub fn buf_mut(&mut self) -> &mut Vec<u8> {
        &mut self.buf
    }

    /// Appends the IEEE CRC32 of everything after the first `skip` bytes.
    pub fn finish_with_crc(mut self, skip: usize) -> Vec<u8> {
        let crc = crc32fast::hash(&self.buf[skip..]);
        self.u32(crc);
        self.buf
    }
}

pub struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    pub fn new(buf: &'a [u8]) -> Self {
        Self { buf, pos: 0 }
    }

    pub fn position(&self) -> usize {
        self.pos
    }

    pub fn remaining(&self) -> usize {
        self.buf.len() - self.pos
    }

    pub fn take(&mut self, n: usize) -> Result<&'a [u8], FormatError> {
        if self.remaining() < n {
            return Err(FormatError::Truncated {
                offset: self.pos,
                needed: n - self.remaining(),
            });
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    pub fn u8(&mut self) -> Result<u8, FormatError> {
        Ok(self.take(1)?[0])
    }

    pub fn u16(&mut self) -> Result<u16, FormatError> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    pub fn u32(&mut self) -> Result<u32, FormatError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    pub fn u64(&mut self) -> Result<u64, FormatError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    pub fn f32(&mut self) -> Result<f32, FormatError> {
        Ok(f32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    pub fn f64(&mut self) -> Result<f64, FormatError> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

/// Byte length of `shape` elements of `elem` bytes each, rejecting sizes
/// that overflow (a corrupted header must not panic the decoder).
pub fn checked_size(shape: &[usize], elem: usize) -> Result<usize, FormatError> {
    shape
        .iter()
        .try_fold(elem, |acc, &d| acc.checked_mul(d))
        .ok_or_else(|| FormatError::Malformed(format!("tensor of shape {shape:?} overflows")))
}

/// Checks the 4-byte magic at the start of `bytes`.
pub fn expect_magic<'a>(bytes: &'a [u8], magic: &'static [u8; 4], name: &'static str) -> Result<Reader<'a>, FormatError> {
    if bytes.len() < 4 && magic.starts_with(bytes) {
        return Err(FormatError::Truncated {
            offset: bytes.len(),
            needed: 4 - bytes.len(),
        });
    }
    if bytes.len() < 4 || &bytes[..4] != magic {
        return Err(FormatError::BadMagic { expected: name });
    }
    let mut r = Reader::new(bytes);
    r.take(4)?;
    Ok(r)
}

/// Consumes the trailing CRC32 and checks it against everything between the
/// magic and the reader's position. The CRC must be the last 4 bytes.
pub fn finish_crc(mut r: Reader<'_>) -> Result<(), FormatError> {
    let end = r.position();
    let stored = r.u32()?;
    if r.remaining() != 0 {
        return Err(FormatError::Malformed(format!("{} trailing bytes", r.remaining())));
    }
    let computed = crc32fast::hash(&r.buf[4..end]);
    if stored != computed {
        return Err(FormatError::Crc { stored, computed });
    }
    Ok(())
}

/// Writes to `<path>.tmp` then renames over `path`, so readers never observe
/// a partially written file.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> std::io::Result<()> {
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = std::path::PathBuf::from(tmp);
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)
}
