//! Binary parameter checkpoints: magic `WMR1`, a `u16` version, a `u32`
//! tensor count, then per tensor the name length and bytes, rank, extents
//! and binary64 values, all little-endian.

use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"WMR1";
pub const CHECKPOINT_VERSION: u16 = 1;

pub fn encode_checkpoint(tensors: &[(String, Tensor<f64>)]) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for (name, t) in tensors {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
        for &e in t.shape() {
            out.extend_from_slice(&(e as u32).to_le_bytes());
        }
        for &v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    location: &'a str,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| {
                Error::parse(self.location, format!("truncated at byte {}", self.pos))
            })?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(
            self.take(4)?.try_into().expect("4 bytes"),
        ))
    }
}

pub fn decode_checkpoint(bytes: &[u8], location: &str) -> Result<Vec<(String, Tensor<f64>)>> {
    let mut r = Reader {
        bytes,
        pos: 0,
        location,
    };
    if r.take(4)? != CHECKPOINT_MAGIC {
        return Err(Error::parse(location, "bad magic, expected WMR1"));
    }
    let version = u16::from_le_bytes(r.take(2)?.try_into().expect("2 bytes"));
    if version != CHECKPOINT_VERSION {
        return Err(Error::parse(
            location,
            format!("unsupported version {version}"),
        ));
    }
    let count = r.u32()?;
    let mut out = Vec::new();
    for _ in 0..count {
        let len = r.u32()? as usize;
        let name = String::from_utf8(r.take(len)?.to_vec())
            .map_err(|_| Error::parse(location, "tensor name is not UTF-8"))?;
        let rank = r.u32()? as usize;
        let shape = (0..rank)
            .map(|_| r.u32().map(|e| e as usize))
            .collect::<Result<Vec<_>>>()?;
        let n = shape.iter().try_fold(1usize, |a, &e| a.checked_mul(e));
        let n = n.ok_or_else(|| Error::parse(location, format!("tensor {name} is too large")))?;
        let raw = r.take(
            n.checked_mul(8)
                .ok_or_else(|| Error::parse(location, "tensor too large"))?,
        )?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        let t = Tensor::from_vec(&shape, data)
            .map_err(|e| Error::parse(location, format!("tensor {name}: {e}")))?;
        out.push((name, t));
    }
    if r.pos != bytes.len() {
        return Err(Error::parse(location, "trailing bytes after tensor table"));
    }
    Ok(out)
}

pub fn write_checkpoint(path: &Path, tensors: &[(String, Tensor<f64>)]) -> Result<()> {
    std::fs::write(path, encode_checkpoint(tensors))?;
    Ok(())
}

pub fn read_checkpoint(path: &Path) -> Result<Vec<(String, Tensor<f64>)>> {
    if !path.exists() {
        return Err(Error::MissingFile(path.to_path_buf()));
    }
    decode_checkpoint(&std::fs::read(path)?, &path.display().to_string())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip() {
        let table = vec![
            (
                "a.weights".to_string(),
                Tensor::from_vec(&[2, 3], vec![1.0, -2.0, 0.5, 1e-300, 7.0, 8.0]).unwrap(),
            ),
            (
                "a.biases".to_string(),
                Tensor::vector(&[f64::MIN_POSITIVE, 3.0]).unwrap(),
            ),
        ];
        let bytes = encode_checkpoint(&table);
        assert_eq!(&bytes[..4], b"WMR1");
        assert_eq!(&bytes[4..6], &[1, 0]);
        assert_eq!(decode_checkpoint(&bytes, "mem").unwrap(), table);
    }

    #[test]
    fn corrupt_input_is_parse_error() {
        let table = vec![("x".to_string(), Tensor::vector(&[1.0]).unwrap())];
        let bytes = encode_checkpoint(&table);
        assert!(matches!(
            decode_checkpoint(&bytes[..bytes.len() - 1], "m"),
            Err(Error::Parse { .. })
        ));
        assert!(matches!(
            decode_checkpoint(b"WMR2\x01\x00", "m"),
            Err(Error::Parse { .. })
        ));
    }
}
