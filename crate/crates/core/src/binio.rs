//! Little-endian helpers shared by the binary file formats.

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};

pub(crate) struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    pub(crate) fn new(bytes: &'a [u8]) -> Self {
        Reader { bytes, pos: 0 }
    }

    pub(crate) fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(|| {
            Error::format(format!("truncated: need {n} bytes at offset {}", self.pos))
        })?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    pub(crate) fn u16(&mut self) -> Result<u16> {
        let b = self.take(2)?;
        Ok(u16::from_le_bytes([b[0], b[1]]))
    }

    pub(crate) fn u32(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes(b.try_into().unwrap()))
    }

    pub(crate) fn u64(&mut self) -> Result<u64> {
        let b = self.take(8)?;
        Ok(u64::from_le_bytes(b.try_into().unwrap()))
    }

    pub(crate) fn magic(&mut self, expect: &[u8; 4]) -> Result<()> {
        let m = self.take(4)?;
        if m != expect {
            return Err(Error::format(format!(
                "bad magic {:?}, expected {:?}",
                String::from_utf8_lossy(m),
                String::from_utf8_lossy(expect)
            )));
        }
        Ok(())
    }

    pub(crate) fn version(&mut self, expect: u16) -> Result<()> {
        let v = self.u16()?;
        if v != expect {
            return Err(Error::format(format!("unsupported version {v}")));
        }
        Ok(())
    }

    pub(crate) fn f32s(&mut self, n: usize) -> Result<Vec<f32>> {
        let bytes = self.take(n.checked_mul(4).ok_or_else(|| Error::format("length overflow"))?)?;
        Ok(bytes.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect())
    }

    pub(crate) fn finish(&self) -> Result<()> {
        if self.pos != self.bytes.len() {
            return Err(Error::format(format!("{} trailing bytes", self.bytes.len() - self.pos)));
        }
        Ok(())
    }
}

pub(crate) fn put_f32s(out: &mut Vec<u8>, values: &[f32]) {
    for v in values {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

/// Write via a sibling temp file and rename, so readers never see a partial file.
pub(crate) fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = std::path::PathBuf::from(tmp);
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

/// Flat f32 parameter file: magic, version, optional u64 prefix fields,
/// parameter count, values.
pub(crate) fn encode_params(magic: &[u8; 4], version: u16, prefix: &[u64], values: &[f32]) -> Vec<u8> {
    let mut out = Vec::with_capacity(6 + 8 * (prefix.len() + 1) + 4 * values.len());
    out.extend_from_slice(magic);
    out.extend_from_slice(&version.to_le_bytes());
    for p in prefix {
        out.extend_from_slice(&p.to_le_bytes());
    }
    out.extend_from_slice(&(values.len() as u64).to_le_bytes());
    put_f32s(&mut out, values);
    out
}

pub(crate) fn decode_params(bytes: &[u8], magic: &[u8; 4], version: u16, prefix: usize) -> Result<(Vec<u64>, Vec<f32>)> {
    let mut r = Reader::new(bytes);
    r.magic(magic)?;
    r.version(version)?;
    let pre = (0..prefix).map(|_| r.u64()).collect::<Result<Vec<_>>>()?;
    let n = usize::try_from(r.u64()?).map_err(|_| Error::format("parameter count overflow"))?;
    let values = r.f32s(n)?;
    r.finish()?;
    Ok((pre, values))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn params_round_trip_and_reject_damage() {
        let vals = [1.5f32, -0.0, f32::MIN_POSITIVE, 3.0];
        let b = encode_params(b"TEST", 1, &[42], &vals);
        assert_eq!(b.len(), 4 + 2 + 8 + 8 + 16);
        let (pre, back) = decode_params(&b, b"TEST", 1, 1).unwrap();
        assert_eq!(pre, vec![42]);
        assert_eq!(encode_params(b"TEST", 1, &pre, &back), b);
        assert!(decode_params(&b, b"NOPE", 1, 1).is_err());
        assert!(decode_params(&b, b"TEST", 2, 1).is_err());
        assert!(decode_params(&b[..b.len() - 1], b"TEST", 1, 1).is_err());
        let mut extra = b.clone();
        extra.push(0);
        assert!(decode_params(&extra, b"TEST", 1, 1).is_err());
    }
}
