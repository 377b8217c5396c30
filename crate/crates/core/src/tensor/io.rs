//! The VIST binary tensor container.
//!
//! Layout: magic `VIST`, `u32` version (1), `u32` dtype code, `u32` ndim,
//! `ndim` x `u64` dims, then the row-major little-endian payload. Every
//! integer is little-endian.

use super::{numel, DType, Scalar, Tensor};
use crate::error::{Error, Result};
use std::fs;
use std::path::Path;

pub const MAGIC: &[u8; 4] = b"VIST";
pub const VERSION: u32 = 1;

pub fn encode<S: Scalar>(t: &Tensor<S>) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + 8 * t.ndim() + t.len() * S::DTYPE.size());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&S::DTYPE.code().to_le_bytes());
    out.extend_from_slice(&(t.ndim() as u32).to_le_bytes());
    for &d in t.shape() {
        out.extend_from_slice(&(d as u64).to_le_bytes());
    }
    for &v in t.data() {
        v.write_le(&mut out);
    }
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, field: &str) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::format(
                field,
                format!(
                    "truncated: need {n} bytes at offset {}, {} left",
                    self.pos,
                    self.buf.len() - self.pos
                ),
            ));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, field: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, field)?.try_into().unwrap()))
    }

    fn u64(&mut self, field: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, field)?.try_into().unwrap()))
    }
}

/// Parsed header: element type and shape.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Header {
    pub dtype: DType,
    pub shape: Vec<usize>,
}

fn read_header(r: &mut Reader<'_>) -> Result<Header> {
    if r.take(4, "magic")? != MAGIC {
        return Err(Error::format("magic", "expected bytes `VIST`"));
    }
    let version = r.u32("version")?;
    if version != VERSION {
        return Err(Error::format(
            "version",
            format!("unsupported version {version}, expected {VERSION}"),
        ));
    }
    let code = r.u32("dtype")?;
    let dtype = DType::from_code(code)
        .ok_or_else(|| Error::format("dtype", format!("unknown dtype code {code}")))?;
    let ndim = r.u32("ndim")? as usize;
    let mut shape = Vec::with_capacity(ndim.min(16));
    for i in 0..ndim {
        let d = r.u64(&format!("dims[{i}]"))?;
        shape.push(usize::try_from(d).map_err(|_| Error::format("dims", "dimension overflows usize"))?);
    }
    Ok(Header { dtype, shape })
}

/// Decodes a container, converting the stored element type to `S`.
pub fn decode<S: Scalar>(bytes: &[u8]) -> Result<Tensor<S>> {
    let mut r = Reader { buf: bytes, pos: 0 };
    let Header { dtype, shape } = read_header(&mut r)?;
    let n = shape
        .iter()
        .try_fold(1usize, |a, &d| a.checked_mul(d))
        .ok_or_else(|| Error::format("dims", "element count overflows"))?;
    let payload = r.take(
        n.checked_mul(dtype.size())
            .ok_or_else(|| Error::format("dims", "payload size overflows"))?,
        "payload",
    )?;
    if r.pos != bytes.len() {
        return Err(Error::format(
            "payload",
            format!("{} trailing bytes after payload", bytes.len() - r.pos),
        ));
    }
    let data: Vec<S> = match dtype {
        DType::F32 => payload
            .chunks_exact(4)
            .map(|c| S::cast(f32::read_le(c) as f64))
            .collect(),
        DType::F64 => payload
            .chunks_exact(8)
            .map(|c| S::cast(f64::read_le(c)))
            .collect(),
    };
    debug_assert_eq!(data.len(), numel(&shape));
    Tensor::new(shape, data)
}

pub fn peek_header(bytes: &[u8]) -> Result<Header> {
    read_header(&mut Reader { buf: bytes, pos: 0 })
}

pub fn save<S: Scalar>(t: &Tensor<S>, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, encode(t))?;
    Ok(())
}

pub fn load<S: Scalar>(path: impl AsRef<Path>) -> Result<Tensor<S>> {
    decode(&fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn header_bytes_are_little_endian() {
        let t = Tensor::<f32>::new([2], vec![1.0, -2.0]).unwrap();
        let b = encode(&t);
        assert_eq!(&b[..4], b"VIST");
        assert_eq!(&b[4..8], &[1, 0, 0, 0]);
        assert_eq!(&b[8..12], &[0, 0, 0, 0]);
        assert_eq!(&b[12..16], &[1, 0, 0, 0]);
        assert_eq!(&b[16..24], &[2, 0, 0, 0, 0, 0, 0, 0]);
        assert_eq!(&b[24..28], &1.0f32.to_le_bytes());
        assert_eq!(b.len(), 32);
    }

    #[test]
    fn truncation_names_the_field() {
        let t = Tensor::<f64>::from_fn([3, 4], |i| i as f64 * 0.25);
        let b = encode(&t);
        let err = |n: usize| match decode::<f64>(&b[..n]) {
            Err(Error::Format { field, .. }) => field,
            other => panic!("expected format error, got {other:?}"),
        };
        assert_eq!(err(2), "magic");
        assert_eq!(err(6), "version");
        assert_eq!(err(10), "dtype");
        assert_eq!(err(14), "ndim");
        assert_eq!(err(20), "dims[0]");
        assert_eq!(err(b.len() - 1), "payload");
    }

    #[test]
    fn bad_magic_and_version() {
        let mut b = encode(&Tensor::<f32>::zeros([1]));
        b[6] = 9;
        assert!(matches!(decode::<f32>(&b), Err(Error::Format { ref field, .. }) if field == "version"));
        b[0] = b'X';
        assert!(matches!(decode::<f32>(&b), Err(Error::Format { ref field, .. }) if field == "magic"));
    }

    #[test]
    fn scalar_and_empty_round_trip() {
        let s = Tensor::scalar(2.5f64);
        assert_eq!(decode::<f64>(&encode(&s)).unwrap(), s);
        let e = Tensor::<f32>::zeros([0, 3]);
        assert_eq!(decode::<f32>(&encode(&e)).unwrap(), e);
    }
}
