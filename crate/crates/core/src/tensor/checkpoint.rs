//! `FTN1` checkpoint files.
//!
//! Layout, all integers little-endian `u32`:
//!
//! ```text
//! "FTN1" | count | count × ( name_len | name (UTF-8) | rank | rank × extent | extent product × f32 )
//! ```

use std::path::Path;

use super::{Real, Tensor};
use crate::error::{io_err, FtnError, Result};

const MAGIC: &[u8; 4] = b"FTN1";

pub fn encode_checkpoint<T: Real>(tensors: &[(&str, &Tensor<T>)]) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for (name, t) in tensors {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
        for &e in t.shape() {
            out.extend_from_slice(&(e as u32).to_le_bytes());
        }
        for v in t.data() {
            out.extend_from_slice(&(v.f64() as f32).to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(FtnError::Checkpoint(format!("truncated at byte {}", self.pos)));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<Vec<(String, Tensor<f32>)>> {
    let mut r = Reader { buf: bytes, pos: 0 };
    if r.take(4)? != MAGIC {
        return Err(FtnError::Checkpoint("bad magic, expected FTN1".into()));
    }
    let count = r.u32()? as usize;
    let mut out = Vec::with_capacity(count.min(1 << 16));
    for _ in 0..count {
        let len = r.u32()? as usize;
        let name = std::str::from_utf8(r.take(len)?)
            .map_err(|e| FtnError::Checkpoint(format!("tensor name is not UTF-8: {e}")))?
            .to_string();
        let rank = r.u32()? as usize;
        let shape = (0..rank).map(|_| r.u32().map(|v| v as usize)).collect::<Result<Vec<_>>>()?;
        let numel: usize = shape.iter().product();
        let raw = r.take(numel * 4)?;
        let data = raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes"))).collect();
        let t = Tensor::new(&shape, data).map_err(|e| FtnError::Checkpoint(format!("`{name}`: {e}")))?;
        out.push((name, t));
    }
    if r.pos != bytes.len() {
        return Err(FtnError::Checkpoint(format!("{} trailing bytes", bytes.len() - r.pos)));
    }
    Ok(out)
}

pub fn save_checkpoint<T: Real>(path: &Path, tensors: &[(&str, &Tensor<T>)]) -> Result<()> {
    std::fs::write(path, encode_checkpoint(tensors)).map_err(io_err(path))
}

pub fn load_checkpoint(path: &Path) -> Result<Vec<(String, Tensor<f32>)>> {
    let bytes = std::fs::read(path).map_err(io_err(path))?;
    decode_checkpoint(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn byte_layout_is_exact() {
        let t = Tensor::<f32>::from_f64(&[2], &[1.0, -2.5]).unwrap();
        let bytes = encode_checkpoint(&[("ab", &t)]);
        let mut expected = b"FTN1".to_vec();
        expected.extend_from_slice(&[1, 0, 0, 0, 2, 0, 0, 0, b'a', b'b', 1, 0, 0, 0, 2, 0, 0, 0]);
        expected.extend_from_slice(&1.0f32.to_le_bytes());
        expected.extend_from_slice(&(-2.5f32).to_le_bytes());
        assert_eq!(bytes, expected);
    }

    #[test]
    fn rejects_corruption() {
        let t = Tensor::<f64>::zeros(&[2, 3]);
        let bytes = encode_checkpoint(&[("w", &t)]);
        assert!(decode_checkpoint(&bytes[..bytes.len() - 1]).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(decode_checkpoint(&bad).is_err());
        let mut extra = bytes;
        extra.push(0);
        assert!(decode_checkpoint(&extra).is_err());
    }
}
