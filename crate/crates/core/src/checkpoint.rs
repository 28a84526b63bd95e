//! Flat binary checkpoint container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic    8 bytes  "FP8CKPT\0"
//! version  u32      1
//! flags    u32      bit 0: folded inference weights
//! count    u32      number of records
//! record*  name_len u32, name (UTF-8), dtype u8, ndim u32, dims u64 * ndim,
//!          payload_len u64, payload
//! ```
//!
//! dtype tags: 0 f64, 1 f32, 2 E4M3 codes, 3 E5M2 codes, 4 BF16 codes
//! (2 bytes each), 5 FP16 codes (2 bytes each), 6 u64.

use std::io::{Read, Write};

use crate::error::{Error, Result};
use crate::numerics::Format;

pub const MAGIC: &[u8; 8] = b"FP8CKPT\0";
pub const VERSION: u32 = 1;
pub const FLAG_FOLDED: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub enum Payload {
    F64(Vec<f64>),
    F32(Vec<f32>),
    /// Raw codes of a minifloat format.
    Codes(Format, Vec<u16>),
    U64(Vec<u64>),
}

impl Payload {
    fn tag(&self) -> u8 {
        match self {
            Payload::F64(_) => 0,
            Payload::F32(_) => 1,
            Payload::Codes(Format::E4M3, _) => 2,
            Payload::Codes(Format::E5M2, _) => 3,
            Payload::Codes(Format::BF16, _) => 4,
            Payload::Codes(Format::FP16, _) => 5,
            Payload::U64(_) => 6,
        }
    }

    pub fn len(&self) -> usize {
        match self {
            Payload::F64(v) => v.len(),
            Payload::F32(v) => v.len(),
            Payload::Codes(_, v) => v.len(),
            Payload::U64(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn bytes(&self) -> Vec<u8> {
        match self {
            Payload::F64(v) => v.iter().flat_map(|x| x.to_le_bytes()).collect(),
            Payload::F32(v) => v.iter().flat_map(|x| x.to_le_bytes()).collect(),
            Payload::Codes(Format::E4M3 | Format::E5M2, v) => v.iter().map(|&c| c as u8).collect(),
            Payload::Codes(_, v) => v.iter().flat_map(|x| x.to_le_bytes()).collect(),
            Payload::U64(v) => v.iter().flat_map(|x| x.to_le_bytes()).collect(),
        }
    }

    fn from_bytes(tag: u8, b: &[u8]) -> Result<Payload> {
        fn chunks<const N: usize>(b: &[u8]) -> Result<impl Iterator<Item = [u8; N]> + '_> {
            if b.len() % N != 0 {
                return Err(Error::Checkpoint(format!("payload of {} bytes is not a multiple of {N}", b.len())));
            }
            Ok(b.chunks_exact(N).map(|c| c.try_into().expect("exact chunk")))
        }
        Ok(match tag {
            0 => Payload::F64(chunks::<8>(b)?.map(f64::from_le_bytes).collect()),
            1 => Payload::F32(chunks::<4>(b)?.map(f32::from_le_bytes).collect()),
            2 => Payload::Codes(Format::E4M3, b.iter().map(|&c| c as u16).collect()),
            3 => Payload::Codes(Format::E5M2, b.iter().map(|&c| c as u16).collect()),
            4 => Payload::Codes(Format::BF16, chunks::<2>(b)?.map(u16::from_le_bytes).collect()),
            5 => Payload::Codes(Format::FP16, chunks::<2>(b)?.map(u16::from_le_bytes).collect()),
            6 => Payload::U64(chunks::<8>(b)?.map(u64::from_le_bytes).collect()),
            t => return Err(Error::Checkpoint(format!("unknown dtype tag {t}"))),
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Record {
    pub name: String,
    pub shape: Vec<usize>,
    pub payload: Payload,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Checkpoint {
    pub flags: u32,
    pub records: Vec<Record>,
}

impl Checkpoint {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn folded(&self) -> bool {
        self.flags & FLAG_FOLDED != 0
    }

    pub fn push(&mut self, name: impl Into<String>, shape: Vec<usize>, payload: Payload) -> Result<()> {
        let name = name.into();
        let n: usize = shape.iter().product();
        if n != payload.len() {
            return Err(Error::shape(format!("record {name}: shape {shape:?} but {} elements", payload.len())));
        }
        if self.get(&name).is_some() {
            return Err(Error::Checkpoint(format!("duplicate record {name}")));
        }
        self.records.push(Record { name, shape, payload });
        Ok(())
    }

    pub fn push_f64(&mut self, name: impl Into<String>, shape: Vec<usize>, data: Vec<f64>) -> Result<()> {
        self.push(name, shape, Payload::F64(data))
    }

    pub fn get(&self, name: &str) -> Option<&Record> {
        self.records.iter().find(|r| r.name == name)
    }

    pub fn require(&self, name: &str) -> Result<&Record> {
        self.get(name).ok_or_else(|| Error::Checkpoint(format!("missing record {name}")))
    }

    pub fn f64s(&self, name: &str) -> Result<&[f64]> {
        match &self.require(name)?.payload {
            Payload::F64(v) => Ok(v),
            _ => Err(Error::Checkpoint(format!("record {name} is not f64"))),
        }
    }

    pub fn u64s(&self, name: &str) -> Result<&[u64]> {
        match &self.require(name)?.payload {
            Payload::U64(v) => Ok(v),
            _ => Err(Error::Checkpoint(format!("record {name} is not u64"))),
        }
    }

    pub fn write_to<W: Write>(&self, mut w: W) -> Result<()> {
        w.write_all(MAGIC)?;
        w.write_all(&VERSION.to_le_bytes())?;
        w.write_all(&self.flags.to_le_bytes())?;
        w.write_all(&(self.records.len() as u32).to_le_bytes())?;
        for r in &self.records {
            w.write_all(&(r.name.len() as u32).to_le_bytes())?;
            w.write_all(r.name.as_bytes())?;
            w.write_all(&[r.payload.tag()])?;
            w.write_all(&(r.shape.len() as u32).to_le_bytes())?;
            for &d in &r.shape {
                w.write_all(&(d as u64).to_le_bytes())?;
            }
            let bytes = r.payload.bytes();
            w.write_all(&(bytes.len() as u64).to_le_bytes())?;
            w.write_all(&bytes)?;
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        self.write_to(&mut out).expect("writing to a Vec cannot fail");
        out
    }

    pub fn read_from<R: Read>(mut r: R) -> Result<Self> {
        let mut buf = Vec::new();
        r.read_to_end(&mut buf)?;
        Self::from_bytes(&buf)
    }

    pub fn from_bytes(b: &[u8]) -> Result<Self> {
        let mut cur = Cursor { b, pos: 0 };
        if cur.take(8)? != MAGIC {
            return Err(Error::Checkpoint("bad magic".into()));
        }
        let version = cur.u32()?;
        if version != VERSION {
            return Err(Error::Checkpoint(format!("unsupported version {version}")));
        }
        let flags = cur.u32()?;
        let count = cur.u32()?;
        let mut ck = Checkpoint { flags, records: Vec::new() };
        for _ in 0..count {
            let nlen = cur.u32()? as usize;
            let name = String::from_utf8(cur.take(nlen)?.to_vec())
                .map_err(|_| Error::Checkpoint("record name is not UTF-8".into()))?;
            let tag = cur.take(1)?[0];
            let ndim = cur.u32()? as usize;
            let shape = (0..ndim).map(|_| cur.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let plen = cur.u64()? as usize;
            let payload = Payload::from_bytes(tag, cur.take(plen)?)?;
            ck.push(name, shape, payload)?;
        }
        if cur.pos != b.len() {
            return Err(Error::Checkpoint(format!("{} trailing bytes", b.len() - cur.pos)));
        }
        Ok(ck)
    }
}

struct Cursor<'a> {
    b: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.b.len());
        let end = end.ok_or_else(|| Error::Checkpoint("truncated checkpoint".into()))?;
        let s = &self.b[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_all_dtypes() {
        let mut ck = Checkpoint::new();
        ck.flags = FLAG_FOLDED;
        ck.push_f64("w", vec![2, 2], vec![1.0, -0.0, f64::MIN_POSITIVE, 3.5]).unwrap();
        ck.push("f", vec![1], Payload::F32(vec![0.1])).unwrap();
        for f in Format::ALL {
            ck.push(format!("codes_{f}"), vec![3], Payload::Codes(f, vec![0, 1, f.spec().max_code()])).unwrap();
        }
        ck.push("step", vec![1], Payload::U64(vec![42])).unwrap();
        let bytes = ck.to_bytes();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back, ck);
        assert!(back.folded());
        assert_eq!(back.to_bytes(), bytes);
    }

    #[test]
    fn header_layout() {
        let mut ck = Checkpoint::new();
        ck.push("a", vec![1], Payload::Codes(Format::E4M3, vec![0x7E])).unwrap();
        let b = ck.to_bytes();
        let expected: Vec<u8> = [
            &b"FP8CKPT\0"[..],
            &1u32.to_le_bytes(),
            &0u32.to_le_bytes(),
            &1u32.to_le_bytes(),
            &1u32.to_le_bytes(),
            b"a",
            &[2],
            &1u32.to_le_bytes(),
            &1u64.to_le_bytes(),
            &1u64.to_le_bytes(),
            &[0x7E],
        ]
        .concat();
        assert_eq!(b, expected);
    }

    #[test]
    fn rejects_corruption() {
        let mut ck = Checkpoint::new();
        ck.push_f64("w", vec![2], vec![1.0, 2.0]).unwrap();
        let b = ck.to_bytes();
        assert!(Checkpoint::from_bytes(&b[..b.len() - 1]).is_err());
        let mut bad = b.clone();
        bad[0] = b'X';
        assert!(Checkpoint::from_bytes(&bad).is_err());
        let mut extra = b.clone();
        extra.push(0);
        assert!(Checkpoint::from_bytes(&extra).is_err());
        assert!(ck.push_f64("w", vec![1], vec![0.0]).is_err());
        assert!(ck.push_f64("x", vec![3], vec![0.0]).is_err());
    }
}
