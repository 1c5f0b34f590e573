//! `GLDNVOL1` volume files.
//!
//! ```text
//! magic    8 bytes  "GLDNVOL1"
//! version  u32 LE   1
//! rank     u32 LE
//! extents  u32 LE x rank
//! dtype    u8       0 = f32 LE
//! payload  row-major values
//! ```

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const VOLUME_MAGIC: &[u8; 8] = b"GLDNVOL1";
pub const VOLUME_VERSION: u32 = 1;
pub const DTYPE_F32: u8 = 0;
const MAX_RANK: u32 = 8;

pub fn encode_volume(v: &Tensor<f32>) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + 4 + 4 + 4 * v.rank() + 1 + 4 * v.len());
    out.extend_from_slice(VOLUME_MAGIC);
    out.extend_from_slice(&VOLUME_VERSION.to_le_bytes());
    out.extend_from_slice(&(v.rank() as u32).to_le_bytes());
    for &e in v.shape() {
        out.extend_from_slice(&(e as u32).to_le_bytes());
    }
    out.push(DTYPE_F32);
    for x in v.data() {
        out.extend_from_slice(&x.to_le_bytes());
    }
    out
}

/// Little-endian cursor reporting byte offsets in its errors.
pub(crate) struct Reader<'a> {
    pub(crate) bytes: &'a [u8],
    pub(crate) pos: usize,
}

impl<'a> Reader<'a> {
    pub(crate) fn new(bytes: &'a [u8]) -> Self {
        Reader { bytes, pos: 0 }
    }

    pub(crate) fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::format(
                self.pos as u64,
                format!(
                    "truncated {what}: need {n} bytes, {} left",
                    self.bytes.len() - self.pos
                ),
            ));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    pub(crate) fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(
            self.take(4, what)?.try_into().expect("4 bytes"),
        ))
    }

    pub(crate) fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    pub(crate) fn f32s(&mut self, n: usize, what: &str) -> Result<Vec<f32>> {
        let bytes = n
            .checked_mul(4)
            .ok_or_else(|| Error::format(self.pos as u64, format!("{what} length overflows")))?;
        let raw = self.take(bytes, what)?;
        Ok(raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect())
    }

    /// Reads `rank` and the extents, rejecting zero extents and overflow.
    pub(crate) fn shape(&mut self) -> Result<(Vec<usize>, usize)> {
        let at = self.pos as u64;
        let rank = self.u32("rank")?;
        if rank == 0 || rank > MAX_RANK {
            return Err(Error::format(
                at,
                format!("rank {rank} outside 1..={MAX_RANK}"),
            ));
        }
        let mut shape = Vec::with_capacity(rank as usize);
        let mut count: usize = 1;
        for _ in 0..rank {
            let at = self.pos as u64;
            let e = self.u32("extent")? as usize;
            if e == 0 {
                return Err(Error::format(at, "zero extent"));
            }
            count = count
                .checked_mul(e)
                .ok_or_else(|| Error::format(at, "element count overflows"))?;
            shape.push(e);
        }
        Ok((shape, count))
    }

    pub(crate) fn expect_magic(&mut self, magic: &[u8; 8]) -> Result<()> {
        let got = self.take(8, "magic")?;
        if got != magic {
            return Err(Error::format(
                0,
                format!(
                    "bad magic {:?}, expected {:?}",
                    String::from_utf8_lossy(got),
                    String::from_utf8_lossy(magic)
                ),
            ));
        }
        Ok(())
    }

    pub(crate) fn expect_version(&mut self, version: u32) -> Result<()> {
        let at = self.pos as u64;
        let v = self.u32("version")?;
        if v != version {
            return Err(Error::format(
                at,
                format!("unsupported version {v}, expected {version}"),
            ));
        }
        Ok(())
    }

    pub(crate) fn at_end(&self) -> bool {
        self.pos == self.bytes.len()
    }
}

pub fn decode_volume(bytes: &[u8]) -> Result<Tensor<f32>> {
    let mut r = Reader::new(bytes);
    r.expect_magic(VOLUME_MAGIC)?;
    r.expect_version(VOLUME_VERSION)?;
    let (shape, count) = r.shape()?;
    let at = r.pos as u64;
    let dtype = r.u8("dtype")?;
    if dtype != DTYPE_F32 {
        return Err(Error::format(at, format!("unknown dtype code {dtype}")));
    }
    let remaining = (bytes.len() - r.pos) as u64;
    if remaining != 4 * count as u64 {
        return Err(Error::format(
            r.pos as u64,
            format!(
                "payload of {remaining} bytes does not match extents {shape:?} ({} bytes)",
                4 * count as u64
            ),
        ));
    }
    let data = r.f32s(count, "payload")?;
    Tensor::new(&shape, data)
}

pub fn write_volume(v: &Tensor<f32>, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode_volume(v)).map_err(|e| Error::io(path, e))
}

pub fn read_volume(path: impl AsRef<Path>) -> Result<Tensor<f32>> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_volume(&bytes)
}
