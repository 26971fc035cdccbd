//! `EPIS1` parameter checkpoints.
//!
//! Layout: the 5-byte magic `EPIS1`, then records until end of input. Each
//! record is `name_len: u64`, `name` (UTF-8), `rank: u64`, `rank` dims as
//! `u64`, then `prod(dims)` values as `f64`. All integers and floats are
//! little-endian.

use std::path::Path;

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 5] = b"EPIS1";

/// Upper bound on values per record accepted by the decoder.
const MAX_VALUES: u64 = 1 << 28;

#[derive(Debug, Clone, PartialEq)]
pub struct NamedArray {
    pub name: String,
    pub shape: Vec<usize>,
    pub values: Vec<f64>,
}

pub fn encode(params: &[NamedArray]) -> Vec<u8> {
    let mut out = MAGIC.to_vec();
    for p in params {
        out.extend_from_slice(&(p.name.len() as u64).to_le_bytes());
        out.extend_from_slice(p.name.as_bytes());
        out.extend_from_slice(&(p.shape.len() as u64).to_le_bytes());
        for &d in &p.shape {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for &v in &p.values {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::Checkpoint(format!("truncated {what} at byte {}", self.pos)));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        let b = self.take(8, what)?;
        Ok(u64::from_le_bytes(b.try_into().expect("8 bytes")))
    }
}

pub fn decode(bytes: &[u8]) -> Result<Vec<NamedArray>> {
    if bytes.len() < MAGIC.len() || &bytes[..MAGIC.len()] != MAGIC {
        return Err(Error::Checkpoint("missing EPIS1 magic".into()));
    }
    let mut r = Reader {
        buf: bytes,
        pos: MAGIC.len(),
    };
    let mut out = Vec::new();
    while r.pos < bytes.len() {
        let name_len = r.u64("name length")?;
        if name_len > (bytes.len() - r.pos) as u64 {
            return Err(Error::Checkpoint(format!("name length {name_len} exceeds input")));
        }
        let name = std::str::from_utf8(r.take(name_len as usize, "name")?)
            .map_err(|_| Error::Checkpoint("parameter name is not UTF-8".into()))?
            .to_string();
        let rank = r.u64("rank")?;
        if rank == 0 || rank > 8 {
            return Err(Error::Checkpoint(format!("`{name}`: unsupported rank {rank}")));
        }
        let mut shape = Vec::with_capacity(rank as usize);
        let mut count: u64 = 1;
        for _ in 0..rank {
            let d = r.u64("dimension")?;
            count = count.saturating_mul(d);
            if d == 0 || count > MAX_VALUES {
                return Err(Error::Checkpoint(format!("`{name}`: bad dimension {d}")));
            }
            shape.push(d as usize);
        }
        let raw = r.take(count as usize * 8, "values")?;
        let values = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        out.push(NamedArray { name, shape, values });
    }
    Ok(out)
}

pub fn write(path: &Path, params: &[NamedArray]) -> Result<()> {
    std::fs::write(path, encode(params)).map_err(|e| Error::io(path, e))
}

pub fn read(path: &Path) -> Result<Vec<NamedArray>> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn layout_is_little_endian() {
        let p = NamedArray {
            name: "w".into(),
            shape: vec![1],
            values: vec![1.0],
        };
        let bytes = encode(&[p]);
        assert_eq!(&bytes[..5], b"EPIS1");
        assert_eq!(&bytes[5..13], &1u64.to_le_bytes());
        assert_eq!(bytes[13], b'w');
        assert_eq!(&bytes[14..22], &1u64.to_le_bytes());
        assert_eq!(&bytes[22..30], &1u64.to_le_bytes());
        assert_eq!(&bytes[30..38], &1.0f64.to_le_bytes());
        assert_eq!(bytes.len(), 38);
    }

    #[test]
    fn rejects_bad_magic_and_truncation() {
        assert!(decode(b"EPIS0").is_err());
        let p = NamedArray {
            name: "bias".into(),
            shape: vec![2, 2],
            values: vec![1.0; 4],
        };
        let bytes = encode(&[p]);
        for cut in 6..bytes.len() {
            assert!(decode(&bytes[..cut]).is_err(), "cut at {cut}");
        }
    }

    proptest! {
        #[test]
        fn round_trip(records in prop::collection::vec(
            ("[a-z_.0-9]{1,12}", prop::collection::vec(1usize..4, 1..4)), 0..5)
        ) {
            let params: Vec<NamedArray> = records.into_iter().enumerate().map(|(i, (name, shape))| {
                let n: usize = shape.iter().product();
                NamedArray { name, shape, values: (0..n).map(|k| (k as f64 + 0.5) * (i as f64 - 1.3)).collect() }
            }).collect();
            let back = decode(&encode(&params)).unwrap();
            prop_assert_eq!(back, params);
        }

        #[test]
        fn decoder_never_panics(bytes in prop::collection::vec(any::<u8>(), 0..128)) {
            let mut input = b"EPIS1".to_vec();
            input.extend(bytes);
            let _ = decode(&input);
        }
    }
}
