//! Binary parameter checkpoints.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic     8 bytes   "GLTCKPT1"
//! d         u64       number of parameters
//! segments  u64       number of layout segments, then per segment:
//!             layer u64, kind u8 (0 weight, 1 bias), offset u64,
//!             ndims u64, ndims × u64 dims
//! values    d × f32
//! ```

use std::fs;
use std::path::Path;
use std::sync::Arc;

use glt_core::nn::{ParamKind, ParamLayout, ParamVector, Segment};

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 8] = b"GLTCKPT1";

pub fn encode(params: &ParamVector) -> Vec<u8> {
    let layout = params.layout();
    let mut out = Vec::with_capacity(32 + 4 * params.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(params.len() as u64).to_le_bytes());
    out.extend_from_slice(&(layout.segments().len() as u64).to_le_bytes());
    for s in layout.segments() {
        out.extend_from_slice(&(s.layer as u64).to_le_bytes());
        out.push(match s.kind {
            ParamKind::Weight => 0,
            ParamKind::Bias => 1,
        });
        out.extend_from_slice(&(s.offset as u64).to_le_bytes());
        out.extend_from_slice(&(s.shape.len() as u64).to_le_bytes());
        for &dim in &s.shape {
            out.extend_from_slice(&(dim as u64).to_le_bytes());
        }
    }
    for &v in params.values() {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
    out
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl Cursor<'_> {
    fn fail(&self, message: impl Into<String>) -> Error {
        Error::Format {
            path: self.path.to_path_buf(),
            message: format!("at byte {}: {}", self.pos, message.into()),
        }
    }

    fn take(&mut self, n: usize) -> Result<&[u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        match end {
            Some(end) => {
                let s = &self.bytes[self.pos..end];
                self.pos = end;
                Ok(s)
            }
            None => Err(self.fail(format!("truncated, wanted {n} more bytes"))),
        }
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn usize(&mut self) -> Result<usize> {
        let v = self.u64()?;
        usize::try_from(v).map_err(|_| self.fail(format!("{v} does not fit in memory")))
    }
}

pub fn decode(bytes: &[u8], path: &Path) -> Result<ParamVector> {
    let mut c = Cursor { bytes, pos: 0, path };
    if c.take(8)? != MAGIC {
        return Err(Error::Format {
            path: path.to_path_buf(),
            message: "not a checkpoint (bad magic)".into(),
        });
    }
    let d = c.usize()?;
    let count = c.usize()?;
    if count > bytes.len() {
        return Err(c.fail(format!("implausible segment count {count}")));
    }
    let mut segments = Vec::with_capacity(count);
    for _ in 0..count {
        let layer = c.usize()?;
        let kind = match c.take(1)?[0] {
            0 => ParamKind::Weight,
            1 => ParamKind::Bias,
            other => return Err(c.fail(format!("unknown segment kind {other}"))),
        };
        let offset = c.usize()?;
        let ndims = c.usize()?;
        if ndims > 8 {
            return Err(c.fail(format!("segment with {ndims} dimensions")));
        }
        let shape = (0..ndims).map(|_| c.usize()).collect::<Result<Vec<_>>>()?;
        segments.push(Segment {
            layer,
            kind,
            offset,
            shape,
        });
    }
    let layout = ParamLayout::new(segments).map_err(|e| c.fail(e.to_string()))?;
    if layout.len() != d {
        return Err(c.fail(format!("layout covers {} parameters, header says {d}", layout.len())));
    }
    let raw = c.take(d.checked_mul(4).ok_or_else(|| c.fail("parameter count overflows"))?)?;
    let values = raw
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes")) as f64)
        .collect();
    if c.pos != bytes.len() {
        return Err(c.fail(format!("{} trailing bytes", bytes.len() - c.pos)));
    }
    Ok(ParamVector::new(Arc::new(layout), values)?)
}

pub fn write(path: &Path, params: &ParamVector) -> Result<()> {
    fs::write(path, encode(params)).map_err(Error::io(path))
}

pub fn read(path: &Path) -> Result<ParamVector> {
    let bytes = fs::read(path).map_err(Error::io(path))?;
    decode(&bytes, path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use glt_core::nn::{InputShape, Network, NetworkSpec, Padding};

    fn nets() -> Vec<Network> {
        vec![
            Network::new(NetworkSpec::mlp(InputShape::new(2, 3, 1), &[4], 3)).unwrap(),
            Network::new(NetworkSpec::cnn(InputShape::new(5, 5, 2), &[3, 2], Padding::Valid, false, 4)).unwrap(),
        ]
    }

    #[test]
    fn round_trip_is_bit_exact() {
        for net in nets() {
            let w = net.init_params(5);
            let bytes = encode(&w);
            assert_eq!(&bytes[..8], MAGIC);
            assert_eq!(u64::from_le_bytes(bytes[8..16].try_into().unwrap()), net.param_count() as u64);
            let back = decode(&bytes, Path::new("w0.ckpt")).unwrap();
            assert_eq!(back.layout(), w.layout());
            let a: Vec<u64> = back.values().iter().map(|v| v.to_bits()).collect();
            let b: Vec<u64> = w.values().iter().map(|v| v.to_bits()).collect();
            assert_eq!(a, b);
            assert_eq!(encode(&back), bytes);
        }
    }

    #[test]
    fn values_are_little_endian_f32() {
        let net = &nets()[0];
        let mut w = ParamVector::zeros(net.layout().clone());
        w.values_mut()[0] = 1.5;
        let bytes = encode(&w);
        let start = bytes.len() - 4 * net.param_count();
        assert_eq!(&bytes[start..start + 4], &1.5f32.to_le_bytes());
    }

    #[test]
    fn corrupt_files_are_rejected() {
        let net = &nets()[0];
        let bytes = encode(&net.init_params(1));
        let p = Path::new("bad.ckpt");
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(decode(&bad, p).is_err());
        assert!(decode(&bytes[..bytes.len() - 1], p).is_err());
        let mut long = bytes.clone();
        long.push(0);
        assert!(decode(&long, p).is_err());
        let mut wrong_d = bytes.clone();
        wrong_d[8] ^= 1;
        let err = decode(&wrong_d, p).unwrap_err().to_string();
        assert!(err.contains("bad.ckpt"), "{err}");
    }

    #[test]
    fn files_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("w.ckpt");
        let w = nets()[1].init_params(2);
        write(&path, &w).unwrap();
        assert_eq!(read(&path).unwrap(), w);
        assert!(read(&dir.path().join("missing.ckpt")).is_err());
    }
}
