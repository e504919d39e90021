//! `RDT1` binary container: magic, then repeated
//! `name_len:u32 | name | rank:u32 | extents:u32… | values:f64…`, all little-endian.

use std::io::{Read, Write};

use super::Tensor;
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"RDT1";

pub fn write_tensors<'a, W, I>(mut out: W, tensors: I) -> Result<()>
where
    W: Write,
    I: IntoIterator<Item = (&'a str, &'a Tensor)>,
{
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    for (name, t) in tensors {
        let len = u32::try_from(name.len()).map_err(|_| Error::Checkpoint(format!("name too long: {name}")))?;
        buf.extend_from_slice(&len.to_le_bytes());
        buf.extend_from_slice(name.as_bytes());
        buf.extend_from_slice(&(t.rank() as u32).to_le_bytes());
        for &d in t.shape() {
            let d = u32::try_from(d).map_err(|_| Error::Checkpoint(format!("extent too large in {name}")))?;
            buf.extend_from_slice(&d.to_le_bytes());
        }
        for v in t.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    out.write_all(&buf).map_err(|e| Error::Checkpoint(format!("write failed: {e}")))
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::Checkpoint(format!("truncated file while reading {what}")));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }
}

/// Reads every tensor in file order.
pub fn read_tensors<R: Read>(mut input: R) -> Result<Vec<(String, Tensor)>> {
    let mut bytes = Vec::new();
    input
        .read_to_end(&mut bytes)
        .map_err(|e| Error::Checkpoint(format!("read failed: {e}")))?;
    if bytes.len() < 4 || &bytes[..4] != MAGIC {
        return Err(Error::Checkpoint("unknown magic; expected RDT1".into()));
    }
    let mut cur = Cursor { bytes: &bytes, pos: 4 };
    let mut out = Vec::new();
    while cur.pos < bytes.len() {
        let len = cur.u32("name length")? as usize;
        let name = std::str::from_utf8(cur.take(len, "name")?)
            .map_err(|_| Error::Checkpoint("tensor name is not UTF-8".into()))?
            .to_string();
        let rank = cur.u32("rank")? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(cur.u32("extent")? as usize);
        }
        let n: usize = shape.iter().product();
        let raw = cur.take(n * 8, &format!("values of {name}"))?;
        let data = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
        let t = Tensor::new(shape, data).map_err(|e| Error::Checkpoint(format!("{name}: {e}")))?;
        out.push((name, t));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn layout_is_little_endian_and_exact() {
        let t = Tensor::new(vec![2], vec![1.0, -0.5]).unwrap();
        let mut buf = Vec::new();
        write_tensors(&mut buf, [("ab", &t)]).unwrap();
        let mut want = b"RDT1".to_vec();
        want.extend_from_slice(&2u32.to_le_bytes());
        want.extend_from_slice(b"ab");
        want.extend_from_slice(&1u32.to_le_bytes());
        want.extend_from_slice(&2u32.to_le_bytes());
        want.extend_from_slice(&1.0f64.to_le_bytes());
        want.extend_from_slice(&(-0.5f64).to_le_bytes());
        assert_eq!(buf, want);
        let back = read_tensors(&buf[..]).unwrap();
        assert_eq!(back, vec![("ab".to_string(), t)]);
    }

    #[test]
    fn rejects_bad_magic_and_truncation() {
        assert!(matches!(read_tensors(&b"RDT2"[..]), Err(Error::Checkpoint(_))));
        let t = Tensor::new(vec![3], vec![1.0, 2.0, 3.0]).unwrap();
        let mut buf = Vec::new();
        write_tensors(&mut buf, [("x", &t)]).unwrap();
        buf.truncate(buf.len() - 3);
        let err = read_tensors(&buf[..]).unwrap_err().to_string();
        assert!(err.contains("truncated"), "{err}");
    }
}
