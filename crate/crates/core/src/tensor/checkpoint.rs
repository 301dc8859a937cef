//! Versioned binary container for named tensors.
//!
//! Layout: the 8-byte magic `BEVLOOP1`, then records until end of file.
//! Each record is `u64 name_len | name (UTF-8) | u64 rank | rank x u64 dims
//! | prod(dims) x f64 values`, all little-endian.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::Tensor;
use crate::error::{Error, Result};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"BEVLOOP1";

/// Named tensors in file order.
pub type Checkpoint = Vec<(String, Tensor)>;

pub fn write_checkpoint(path: impl AsRef<Path>, records: &[(String, Tensor)]) -> Result<()> {
    let path = path.as_ref();
    let mut w = BufWriter::new(File::create(path)?);
    encode(&mut w, records)?;
    w.flush()?;
    Ok(())
}

pub fn read_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    let path = path.as_ref();
    let mut bytes = Vec::new();
    BufReader::new(File::open(path)?).read_to_end(&mut bytes)?;
    decode(&bytes).map_err(|msg| Error::format(path, msg))
}

pub(crate) fn encode(w: &mut impl Write, records: &[(String, Tensor)]) -> std::io::Result<()> {
    w.write_all(CHECKPOINT_MAGIC)?;
    for (name, t) in records {
        w.write_all(&(name.len() as u64).to_le_bytes())?;
        w.write_all(name.as_bytes())?;
        w.write_all(&(t.rank() as u64).to_le_bytes())?;
        for &d in t.shape() {
            w.write_all(&(d as u64).to_le_bytes())?;
        }
        for &v in t.data() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    Ok(())
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &str) -> std::result::Result<&'a [u8], String> {
        if self.bytes.len() - self.pos < n {
            return Err(format!("truncated {what} at byte {}", self.pos));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u64(&mut self, what: &str) -> std::result::Result<u64, String> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }
}

pub(crate) fn decode(bytes: &[u8]) -> std::result::Result<Checkpoint, String> {
    if bytes.len() < 8 || &bytes[..8] != CHECKPOINT_MAGIC {
        return Err("missing BEVLOOP1 magic".into());
    }
    let mut c = Cursor { bytes, pos: 8 };
    let mut out = Vec::new();
    while c.pos < bytes.len() {
        let start = c.pos;
        let name_len = c.u64("identifier length")? as usize;
        let name = std::str::from_utf8(c.take(name_len, "identifier")?)
            .map_err(|e| format!("identifier at byte {start}: {e}"))?
            .to_owned();
        let rank = c.u64("rank")? as usize;
        if rank == 0 {
            return Err(format!("record {name:?} has rank 0"));
        }
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(c.u64("shape")? as usize);
        }
        let n = shape
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .filter(|&n| n > 0)
            .ok_or_else(|| format!("record {name:?} has invalid shape {shape:?}"))?;
        let raw = c.take(n.checked_mul(8).ok_or("shape overflow")?, "values")?;
        let data = raw
            .chunks_exact(8)
            .map(|b| f64::from_le_bytes(b.try_into().unwrap()))
            .collect();
        out.push((name, Tensor::from_parts(shape, data)));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn layout_is_bit_exact() {
        let t = Tensor::new([1, 2], vec![1.5, -0.0]).unwrap();
        let mut buf = Vec::new();
        encode(&mut buf, &[("ab".to_string(), t)]).unwrap();
        let mut want = b"BEVLOOP1".to_vec();
        want.extend(2u64.to_le_bytes());
        want.extend(b"ab");
        want.extend(2u64.to_le_bytes());
        want.extend(1u64.to_le_bytes());
        want.extend(2u64.to_le_bytes());
        want.extend(1.5f64.to_le_bytes());
        want.extend((-0.0f64).to_le_bytes());
        assert_eq!(buf, want);
    }

    #[test]
    fn rejects_bad_input() {
        assert!(decode(b"BEVLOOP0").is_err());
        assert!(decode(b"BEVLOOP1").unwrap().is_empty());
        let mut buf = Vec::new();
        encode(&mut buf, &[("x".to_string(), Tensor::zeros([3]))]).unwrap();
        buf.pop();
        let err = decode(&buf).unwrap_err();
        assert!(err.contains("truncated values"), "{err}");
    }
}
