//! The GGEM tensor container, little-endian throughout:
//!
//! ```text
//! "GGEM"            4 bytes
//! version           u32
//! tensor count      u32
//! per tensor:
//!   name length     u16
//!   name            UTF-8 bytes
//!   rank            u8
//!   dims            rank × u32
//!   payload         product(dims) × f32, row-major
//! ```

use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

use super::write_atomic;

pub const CONTAINER_MAGIC: &[u8; 4] = b"GGEM";
pub const CONTAINER_VERSION: u32 = 1;

pub fn encode_container(tensors: &[(String, Tensor)]) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(CONTAINER_MAGIC);
    out.extend_from_slice(&CONTAINER_VERSION.to_le_bytes());
    out.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for (name, t) in tensors {
        let name_len = u16::try_from(name.len())
            .map_err(|_| Error::invalid(format!("tensor name too long: {} bytes", name.len())))?;
        let rank = u8::try_from(t.rank()).map_err(|_| Error::invalid(format!("tensor {name} rank > 255")))?;
        out.extend_from_slice(&name_len.to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.push(rank);
        for &d in t.dims() {
            let d = u32::try_from(d).map_err(|_| Error::invalid(format!("tensor {name} dim {d} > u32")))?;
            out.extend_from_slice(&d.to_le_bytes());
        }
        for &v in t.data() {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    Ok(out)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> std::result::Result<&'a [u8], String> {
        if self.bytes.len() - self.pos < n {
            return Err(format!("truncated while reading {what} at byte {}", self.pos));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> std::result::Result<u32, String> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
}

pub fn decode_container(bytes: &[u8]) -> std::result::Result<Vec<(String, Tensor)>, String> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4, "magic")? != CONTAINER_MAGIC {
        return Err("not a GGEM container (bad magic)".into());
    }
    let version = r.u32("version")?;
    if version != CONTAINER_VERSION {
        return Err(format!("unsupported GGEM version {version}, expected {CONTAINER_VERSION}"));
    }
    let count = r.u32("tensor count")? as usize;
    let mut out = Vec::with_capacity(count.min(4096));
    for i in 0..count {
        let len = r.take(2, "name length")?;
        let len = u16::from_le_bytes([len[0], len[1]]) as usize;
        let name = std::str::from_utf8(r.take(len, "name")?)
            .map_err(|_| format!("tensor {i} name is not UTF-8"))?
            .to_string();
        let rank = r.take(1, "rank")?[0] as usize;
        let dims = (0..rank)
            .map(|_| r.u32("dims").map(|d| d as usize))
            .collect::<std::result::Result<Vec<_>, _>>()?;
        let len: usize = dims.iter().product();
        let payload = r.take(len * 4, &format!("payload of {name}"))?;
        let data = payload
            .chunks_exact(4)
            .map(|c| f64::from(f32::from_le_bytes([c[0], c[1], c[2], c[3]])))
            .collect();
        let t = Tensor::new(dims, data).map_err(|e| format!("tensor {name}: {e}"))?;
        out.push((name, t));
    }
    if r.pos != bytes.len() {
        return Err(format!("{} trailing bytes after last tensor", bytes.len() - r.pos));
    }
    Ok(out)
}

pub fn write_container(path: &Path, tensors: &[(String, Tensor)]) -> Result<()> {
    write_atomic(path, &encode_container(tensors)?)
}

pub fn read_container(path: &Path) -> Result<Vec<(String, Tensor)>> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_container(&bytes).map_err(|m| Error::format(path, m))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn layout_is_bit_exact() {
        let t = Tensor::new(vec![2], vec![1.0, -2.5]).unwrap();
        let bytes = encode_container(&[("ab".to_string(), t)]).unwrap();
        let mut expected = b"GGEM".to_vec();
        expected.extend_from_slice(&[1, 0, 0, 0]);
        expected.extend_from_slice(&[1, 0, 0, 0]);
        expected.extend_from_slice(&[2, 0]);
        expected.extend_from_slice(b"ab");
        expected.push(1);
        expected.extend_from_slice(&[2, 0, 0, 0]);
        expected.extend_from_slice(&1.0f32.to_le_bytes());
        expected.extend_from_slice(&(-2.5f32).to_le_bytes());
        assert_eq!(bytes, expected);
    }

    #[test]
    fn scalar_tensors_have_rank_zero() {
        let t = Tensor::new(vec![], vec![7.0]).unwrap();
        let bytes = encode_container(&[("s".to_string(), t.clone())]).unwrap();
        let back = decode_container(&bytes).unwrap();
        assert_eq!(back[0].1, t);
    }

    #[test]
    fn rejects_corruption() {
        let t = Tensor::new(vec![3], vec![1.0, 2.0, 3.0]).unwrap();
        let bytes = encode_container(&[("x".to_string(), t)]).unwrap();
        assert!(decode_container(&bytes[..bytes.len() - 2]).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(decode_container(&bad).is_err());
        let mut bad = bytes.clone();
        bad[4] = 9;
        assert!(decode_container(&bad).unwrap_err().contains("version"));
        let mut long = bytes;
        long.push(0);
        assert!(decode_container(&long).is_err());
    }

    proptest! {
        #[test]
        fn f32_values_round_trip(values in prop::collection::vec(-1e6f32..1e6, 1..50), name in "[a-z._0-9]{1,20}") {
            let t = Tensor::vector(values.iter().map(|&v| f64::from(v)).collect()).unwrap();
            let bytes = encode_container(&[(name.clone(), t.clone())]).unwrap();
            let back = decode_container(&bytes).unwrap();
            prop_assert_eq!(&back[0].0, &name);
            prop_assert_eq!(&back[0].1, &t);
        }
    }
}
