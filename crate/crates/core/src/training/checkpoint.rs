//! Binary parameter snapshots.
//!
//! Layout (little-endian): magic `ESPK`, version byte, `u32` header length
//! and UTF-8 header, `u32` tensor count, then per tensor a `u32` rank, the
//! `u32` extents and the `f64` values.

use std::path::Path;

use crate::error::{Error, Result};
use crate::files::write_atomic;
use crate::tensor::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"ESPK";
pub const CHECKPOINT_VERSION: u8 = 1;

pub fn encode_checkpoint(header: &str, tensors: &[Tensor]) -> Vec<u8> {
    let mut buf = Vec::new();
    buf.extend_from_slice(CHECKPOINT_MAGIC);
    buf.push(CHECKPOINT_VERSION);
    buf.extend_from_slice(&(header.len() as u32).to_le_bytes());
    buf.extend_from_slice(header.as_bytes());
    buf.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for t in tensors {
        buf.extend_from_slice(&(t.rank() as u32).to_le_bytes());
        for &d in t.shape() {
            buf.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for v in t.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    buf
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> std::result::Result<&'a [u8], String> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| format!("truncated at byte {}", self.pos))?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u32(&mut self) -> std::result::Result<usize, String> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()) as usize)
    }
}

pub fn decode_checkpoint(bytes: &[u8]) -> std::result::Result<(String, Vec<Tensor>), String> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4)? != CHECKPOINT_MAGIC {
        return Err("not a checkpoint (bad magic)".into());
    }
    let version = r.take(1)?[0];
    if version != CHECKPOINT_VERSION {
        return Err(format!("unsupported checkpoint version {version}"));
    }
    let len = r.u32()?;
    let header = String::from_utf8(r.take(len)?.to_vec()).map_err(|e| e.to_string())?;
    let count = r.u32()?;
    let mut tensors = Vec::with_capacity(count);
    for _ in 0..count {
        let rank = r.u32()?;
        let shape = (0..rank)
            .map(|_| r.u32())
            .collect::<std::result::Result<Vec<_>, _>>()?;
        let n: usize = shape.iter().product();
        let raw = r.take(n.checked_mul(8).ok_or("tensor too large")?)?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        tensors.push(Tensor::new(&shape, data).map_err(|e| e.to_string())?);
    }
    if r.pos != bytes.len() {
        return Err(format!("{} trailing bytes", bytes.len() - r.pos));
    }
    Ok((header, tensors))
}

pub fn save_checkpoint(path: impl AsRef<Path>, header: &str, tensors: &[Tensor]) -> Result<()> {
    write_atomic(path, &encode_checkpoint(header, tensors))
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<(String, Vec<Tensor>)> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes).map_err(|reason| Error::Format {
        path: path.to_path_buf(),
        reason,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_and_corruption() {
        let tensors = vec![
            Tensor::from_fn(&[2, 3], |i| i as f64 / 7.0),
            Tensor::scalar(-0.1),
        ];
        let bytes = encode_checkpoint("kind=espresso\n", &tensors);
        let (header, back) = decode_checkpoint(&bytes).unwrap();
        assert_eq!(header, "kind=espresso\n");
        assert_eq!(back, tensors);
        assert!(decode_checkpoint(&bytes[..bytes.len() - 1]).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(decode_checkpoint(&bad).is_err());
        let mut bad = bytes;
        bad[4] = 9;
        assert!(decode_checkpoint(&bad).unwrap_err().contains("version"));
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.espk");
        save_checkpoint(&path, "", &[Tensor::ones(&[4])]).unwrap();
        assert_eq!(load_checkpoint(&path).unwrap().1, vec![Tensor::ones(&[4])]);
        assert!(matches!(
            load_checkpoint(dir.path().join("nope")),
            Err(Error::Io { .. })
        ));
    }
}
