//! Versioned binary tensor container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! b"RBLM"  u32 version
//! repeated until end of file:
//!   u32 name_len, name bytes (UTF-8)
//!   u32 rank, rank × u64 dims
//!   u8 element tag (0 = f32, 1 = f64, 2 = u8)
//!   product(dims) raw little-endian elements
//! ```

use super::{DType, Real, Tensor};
use crate::{Error, Result};

pub const MAGIC: &[u8; 4] = b"RBLM";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub enum RecordData {
    F32(Tensor<f32>),
    F64(Tensor<f64>),
    U8 { shape: Vec<usize>, bytes: Vec<u8> },
}

impl RecordData {
    pub fn dtype(&self) -> DType {
        match self {
            RecordData::F32(_) => DType::F32,
            RecordData::F64(_) => DType::F64,
            RecordData::U8 { .. } => DType::U8,
        }
    }

    /// Converts a floating record to `Tensor<T>`, casting precision if needed.
    pub fn into_real<T: Real>(self) -> Result<Tensor<T>> {
        match self {
            RecordData::F32(t) => Ok(t.cast()),
            RecordData::F64(t) => Ok(t.cast()),
            RecordData::U8 { .. } => Err(Error::Format("expected a float tensor".into())),
        }
    }
}

pub struct Writer {
    buf: Vec<u8>,
}

impl Default for Writer {
    fn default() -> Self {
        Self::new()
    }
}

impl Writer {
    pub fn new() -> Self {
        let mut buf = MAGIC.to_vec();
        buf.extend_from_slice(&VERSION.to_le_bytes());
        Writer { buf }
    }

    fn header(&mut self, name: &str, shape: &[usize], dtype: DType) {
        self.buf
            .extend_from_slice(&(name.len() as u32).to_le_bytes());
        self.buf.extend_from_slice(name.as_bytes());
        self.buf
            .extend_from_slice(&(shape.len() as u32).to_le_bytes());
        for &d in shape {
            self.buf.extend_from_slice(&(d as u64).to_le_bytes());
        }
        self.buf.push(dtype.tag());
    }

    pub fn tensor<T: Real>(&mut self, name: &str, t: &Tensor<T>) -> &mut Self {
        self.header(name, t.shape(), T::DTYPE);
        self.buf.reserve(t.len() * T::DTYPE.size());
        for &x in t.data() {
            x.write_le(&mut self.buf);
        }
        self
    }

    pub fn bytes(&mut self, name: &str, bytes: &[u8]) -> &mut Self {
        self.header(name, &[bytes.len()], DType::U8);
        self.buf.extend_from_slice(bytes);
        self
    }

    pub fn finish(self) -> Vec<u8> {
        self.buf
    }
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::Format(format!("truncated at byte {}", self.pos)))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

fn decode_floats<T: Real>(raw: &[u8], shape: &[usize]) -> Result<Tensor<T>> {
    let w = T::DTYPE.size();
    let data = raw.chunks_exact(w).map(T::read_le).collect();
    Tensor::from_vec(shape, data)
}

/// Parses a container into `(name, record)` pairs in file order.
pub fn parse(bytes: &[u8]) -> Result<Vec<(String, RecordData)>> {
    let mut cur = Cursor { bytes, pos: 0 };
    if cur.take(4).ok() != Some(MAGIC.as_slice()) {
        return Err(Error::Format("missing RBLM magic".into()));
    }
    let version = cur.u32()?;
    if version != VERSION {
        return Err(Error::Format(format!("unsupported version {version}")));
    }
    let mut out = Vec::new();
    while cur.pos < bytes.len() {
        let name_len = cur.u32()? as usize;
        let name = std::str::from_utf8(cur.take(name_len)?)
            .map_err(|_| Error::Format("tensor name is not UTF-8".into()))?
            .to_string();
        let rank = cur.u32()? as usize;
        if rank > 3 {
            return Err(Error::Format(format!("`{name}` has rank {rank}")));
        }
        let shape = (0..rank)
            .map(|_| cur.u64().map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        let tag = cur.take(1)?[0];
        let dtype = DType::from_tag(tag)
            .ok_or_else(|| Error::Format(format!("`{name}` has unknown element tag {tag}")))?;
        let count = shape
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .ok_or_else(|| Error::Format(format!("`{name}` is too large")))?;
        let raw = cur.take(count * dtype.size())?;
        let rec = match dtype {
            DType::F32 => RecordData::F32(decode_floats(raw, &shape)?),
            DType::F64 => RecordData::F64(decode_floats(raw, &shape)?),
            DType::U8 => RecordData::U8 {
                shape,
                bytes: raw.to_vec(),
            },
        };
        out.push((name, rec));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn layout_is_stable() {
        let mut w = Writer::new();
        w.tensor(
            "a",
            &Tensor::<f32>::from_vec(&[2], vec![1.0, -2.0]).unwrap(),
        );
        let bytes = w.finish();
        let mut want = b"RBLM".to_vec();
        want.extend_from_slice(&1u32.to_le_bytes());
        want.extend_from_slice(&1u32.to_le_bytes());
        want.push(b'a');
        want.extend_from_slice(&1u32.to_le_bytes());
        want.extend_from_slice(&2u64.to_le_bytes());
        want.push(0);
        want.extend_from_slice(&1.0f32.to_le_bytes());
        want.extend_from_slice(&(-2.0f32).to_le_bytes());
        assert_eq!(bytes, want);
    }

    #[test]
    fn rejects_bad_magic_and_truncation() {
        assert!(parse(b"XXXX\x01\0\0\0").is_err());
        let mut w = Writer::new();
        w.tensor("w", &Tensor::<f64>::zeros(&[3, 3]));
        let bytes = w.finish();
        assert!(matches!(
            parse(&bytes[..bytes.len() - 1]),
            Err(Error::Format(_))
        ));
    }

    proptest! {
        #[test]
        fn round_trips_any_tensor(rows in 1usize..5, cols in 1usize..5, seed in any::<u64>()) {
            let t = Tensor::<f64>::from_fn(&[rows, cols], |i| (seed as f64 + i as f64).sin());
            let t32 = Tensor::<f32>::from_fn(&[cols], |i| i as f32 - 1.5);
            let mut w = Writer::new();
            w.tensor("x", &t).bytes("meta", b"{}").tensor("y", &t32);
            let recs = parse(&w.finish()).unwrap();
            prop_assert_eq!(recs.len(), 3);
            prop_assert_eq!(&recs[0].1, &RecordData::F64(t));
            prop_assert_eq!(&recs[1].1, &RecordData::U8 { shape: vec![2], bytes: b"{}".to_vec() });
            prop_assert_eq!(&recs[2].1, &RecordData::F32(t32));
        }
    }
}
