//! SVT1 binary tensor container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! "SVT1"  u8 version=1
//! repeated: u32 name_len, name (UTF-8), u8 dtype (0=f64, 1=u32, 2=u8),
//!           u8 rank, rank × u64 extents, row-major payload
//! ```

use std::path::Path;

use crate::error::{Error, FormatError, Result};
use crate::numerics::Tensor;

pub const MAGIC: [u8; 4] = *b"SVT1";
pub const VERSION: u8 = 1;

#[derive(Clone, Debug, PartialEq)]
pub enum Payload {
    F64(Vec<f64>),
    U32(Vec<u32>),
    U8(Vec<u8>),
}

impl Payload {
    fn dtype(&self) -> u8 {
        match self {
            Payload::F64(_) => 0,
            Payload::U32(_) => 1,
            Payload::U8(_) => 2,
        }
    }

    fn len(&self) -> usize {
        match self {
            Payload::F64(v) => v.len(),
            Payload::U32(v) => v.len(),
            Payload::U8(v) => v.len(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Record {
    pub name: String,
    pub shape: Vec<usize>,
    pub payload: Payload,
}

impl Record {
    pub fn f64(name: impl Into<String>, t: &Tensor) -> Self {
        Self {
            name: name.into(),
            shape: t.shape().to_vec(),
            payload: Payload::F64(t.data().to_vec()),
        }
    }

    pub fn u32(name: impl Into<String>, shape: Vec<usize>, data: Vec<u32>) -> Self {
        Self {
            name: name.into(),
            shape,
            payload: Payload::U32(data),
        }
    }

    pub fn u8(name: impl Into<String>, shape: Vec<usize>, data: Vec<u8>) -> Self {
        Self {
            name: name.into(),
            shape,
            payload: Payload::U8(data),
        }
    }

    pub fn as_tensor(&self) -> std::result::Result<Tensor, FormatError> {
        match &self.payload {
            Payload::F64(v) => Tensor::new(self.shape.clone(), v.clone())
                .map_err(|_| FormatError::Malformed(format!("{}: extent/payload mismatch", self.name))),
            _ => Err(FormatError::Malformed(format!("{}: expected f64 payload", self.name))),
        }
    }

    pub fn as_u32(&self) -> std::result::Result<&[u32], FormatError> {
        match &self.payload {
            Payload::U32(v) => Ok(v),
            _ => Err(FormatError::Malformed(format!("{}: expected u32 payload", self.name))),
        }
    }

    pub fn as_u8(&self) -> std::result::Result<&[u8], FormatError> {
        match &self.payload {
            Payload::U8(v) => Ok(v),
            _ => Err(FormatError::Malformed(format!("{}: expected u8 payload", self.name))),
        }
    }
}

pub fn encode(records: &[Record]) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(&MAGIC);
    out.push(VERSION);
    for r in records {
        assert_eq!(
            r.shape.iter().product::<usize>(),
            r.payload.len(),
            "record {} extents do not match payload",
            r.name
        );
        assert!(r.shape.len() <= u8::MAX as usize, "rank too large");
        out.extend_from_slice(&(r.name.len() as u32).to_le_bytes());
        out.extend_from_slice(r.name.as_bytes());
        out.push(r.payload.dtype());
        out.push(r.shape.len() as u8);
        for &e in &r.shape {
            out.extend_from_slice(&(e as u64).to_le_bytes());
        }
        match &r.payload {
            Payload::F64(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            Payload::U32(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            Payload::U8(v) => out.extend_from_slice(v),
        }
    }
    out
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &str) -> std::result::Result<&'a [u8], FormatError> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| FormatError::Truncated(what.to_string()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self, what: &str) -> std::result::Result<u8, FormatError> {
        Ok(self.take(1, what)?[0])
    }

    fn u32(&mut self, what: &str) -> std::result::Result<u32, FormatError> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self, what: &str) -> std::result::Result<u64, FormatError> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().expect("8 bytes")))
    }
}

pub fn decode(bytes: &[u8]) -> std::result::Result<Vec<Record>, FormatError> {
    if bytes.len() < 4 || bytes[..4] != MAGIC {
        return Err(FormatError::BadMagic);
    }
    let mut c = Cursor { bytes, pos: 4 };
    let version = c.u8("header")?;
    if version != VERSION {
        return Err(FormatError::UnsupportedVersion(version));
    }
    let mut records = Vec::new();
    while c.pos < bytes.len() {
        let name_len = c.u32("record name length")? as usize;
        let name = std::str::from_utf8(c.take(name_len, "record name")?)
            .map_err(|_| FormatError::BadName)?
            .to_string();
        let dtype = c.u8(&name)?;
        if dtype > 2 {
            return Err(FormatError::UnknownDtype(dtype));
        }
        let rank = c.u8(&name)? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(usize::try_from(c.u64(&name)?).map_err(|_| FormatError::Truncated(name.clone()))?);
        }
        let count = shape
            .iter()
            .try_fold(1usize, |acc, &e| acc.checked_mul(e))
            .ok_or_else(|| FormatError::Truncated(name.clone()))?;
        let payload = match dtype {
            0 => {
                let raw = c.take(
                    count
                        .checked_mul(8)
                        .ok_or_else(|| FormatError::Truncated(name.clone()))?,
                    &name,
                )?;
                Payload::F64(
                    raw.chunks_exact(8)
                        .map(|b| f64::from_le_bytes(b.try_into().unwrap()))
                        .collect(),
                )
            }
            1 => {
                let raw = c.take(
                    count
                        .checked_mul(4)
                        .ok_or_else(|| FormatError::Truncated(name.clone()))?,
                    &name,
                )?;
                Payload::U32(
                    raw.chunks_exact(4)
                        .map(|b| u32::from_le_bytes(b.try_into().unwrap()))
                        .collect(),
                )
            }
            _ => Payload::U8(c.take(count, &name)?.to_vec()),
        };
        records.push(Record { name, shape, payload });
    }
    Ok(records)
}

pub fn write_file(path: &Path, records: &[Record]) -> Result<()> {
    std::fs::write(path, encode(records)).map_err(|e| Error::io(path, e))
}

pub fn read_file(path: &Path) -> Result<Vec<Record>> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(decode(&bytes)?)
}
