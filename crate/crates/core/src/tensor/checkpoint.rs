//! Binary parameter checkpoints.
//!
//! Layout, all integers little-endian:
//! `"DBVE"`, `version: u32`, then records until end of file, each
//! `name_len: u32`, UTF-8 name, `ndim: u32`, `dims: [u64; ndim]`,
//! `payload: [f64; Π dims]`.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::Tensor;
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"DBVE";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Record {
    pub name: String,
    pub tensor: Tensor,
}

pub fn write_records<W: Write>(mut out: W, records: &[(&str, &Tensor)]) -> Result<()> {
    out.write_all(MAGIC)?;
    out.write_all(&VERSION.to_le_bytes())?;
    for (name, t) in records {
        let len = u32::try_from(name.len()).map_err(|_| Error::invalid("parameter name too long"))?;
        out.write_all(&len.to_le_bytes())?;
        out.write_all(name.as_bytes())?;
        out.write_all(&(t.shape().len() as u32).to_le_bytes())?;
        for d in t.shape() {
            out.write_all(&(*d as u64).to_le_bytes())?;
        }
        for v in t.data() {
            out.write_all(&v.to_le_bytes())?;
        }
    }
    out.flush()?;
    Ok(())
}

struct Cursor<R> {
    inner: R,
    offset: u64,
}

impl<R: Read> Cursor<R> {
    /// `Ok(false)` on a clean end of input before any byte was read.
    fn fill(&mut self, buf: &mut [u8], allow_eof: bool) -> Result<bool> {
        let mut got = 0;
        while got < buf.len() {
            let n = self.inner.read(&mut buf[got..])?;
            if n == 0 {
                if got == 0 && allow_eof {
                    return Ok(false);
                }
                return Err(Error::Format {
                    offset: self.offset + got as u64,
                    msg: format!("truncated: needed {} more bytes", buf.len() - got),
                });
            }
            got += n;
        }
        self.offset += buf.len() as u64;
        Ok(true)
    }

    fn u32(&mut self) -> Result<u32> {
        let mut b = [0u8; 4];
        self.fill(&mut b, false)?;
        Ok(u32::from_le_bytes(b))
    }

    fn u64(&mut self) -> Result<u64> {
        let mut b = [0u8; 8];
        self.fill(&mut b, false)?;
        Ok(u64::from_le_bytes(b))
    }
}

pub fn read_records<R: Read>(input: R) -> Result<Vec<Record>> {
    let mut cur = Cursor {
        inner: input,
        offset: 0,
    };
    let mut magic = [0u8; 4];
    cur.fill(&mut magic, false)?;
    if &magic != MAGIC {
        return Err(Error::Format {
            offset: 0,
            msg: format!("bad magic {magic:?}"),
        });
    }
    let version = cur.u32()?;
    if version != VERSION {
        return Err(Error::Format {
            offset: 4,
            msg: format!("unsupported version {version}"),
        });
    }
    let mut records = Vec::new();
    loop {
        let start = cur.offset;
        let mut len_bytes = [0u8; 4];
        if !cur.fill(&mut len_bytes, true)? {
            break;
        }
        let len = u32::from_le_bytes(len_bytes) as usize;
        let mut name = vec![0u8; len];
        cur.fill(&mut name, false)?;
        let name = String::from_utf8(name).map_err(|_| Error::Format {
            offset: start + 4,
            msg: "parameter name is not UTF-8".into(),
        })?;
        let ndim = cur.u32()? as usize;
        let mut shape = Vec::with_capacity(ndim.min(16));
        for _ in 0..ndim {
            shape.push(cur.u64()? as usize);
        }
        let numel = shape
            .iter()
            .try_fold(1usize, |a, d| a.checked_mul(*d))
            .ok_or(Error::Format {
                offset: cur.offset,
                msg: format!("dims {shape:?} overflow"),
            })?;
        let mut payload = vec![0u8; numel.saturating_mul(8).min(1 << 34)];
        if payload.len() != numel * 8 {
            return Err(Error::Format {
                offset: cur.offset,
                msg: format!("record {name} is implausibly large"),
            });
        }
        cur.fill(&mut payload, false)?;
        let data = payload
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
            .collect();
        records.push(Record {
            name,
            tensor: Tensor::new(shape, data)?,
        });
    }
    Ok(records)
}

pub fn save(path: &Path, records: &[(&str, &Tensor)]) -> Result<()> {
    let f = File::create(path)?;
    write_records(BufWriter::new(f), records)
}

pub fn load(path: &Path) -> Result<Vec<Record>> {
    let f = File::open(path)?;
    read_records(BufReader::new(f))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Vec<(String, Tensor)> {
        vec![
            (
                "enc.w".into(),
                Tensor::new(vec![2, 3], vec![1.5, -0.0, f64::MIN_POSITIVE, 3e300, -7.25, 1.0 / 3.0]).unwrap(),
            ),
            ("bias".into(), Tensor::scalar(0.1)),
            ("empty".into(), Tensor::new(vec![0, 4], vec![]).unwrap()),
        ]
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let recs = sample();
        let refs: Vec<(&str, &Tensor)> = recs.iter().map(|(n, t)| (n.as_str(), t)).collect();
        let mut buf = Vec::new();
        write_records(&mut buf, &refs).unwrap();
        assert_eq!(&buf[..4], b"DBVE");
        assert_eq!(&buf[4..8], &1u32.to_le_bytes());
        let back = read_records(&buf[..]).unwrap();
        assert_eq!(back.len(), 3);
        for ((n, t), r) in recs.iter().zip(&back) {
            assert_eq!(n, &r.name);
            assert_eq!(t.shape(), r.tensor.shape());
            let a: Vec<u64> = t.data().iter().map(|v| v.to_bits()).collect();
            let b: Vec<u64> = r.tensor.data().iter().map(|v| v.to_bits()).collect();
            assert_eq!(a, b);
        }
    }

    #[test]
    fn truncation_reports_offset() {
        let recs = sample();
        let refs: Vec<(&str, &Tensor)> = recs.iter().map(|(n, t)| (n.as_str(), t)).collect();
        let mut buf = Vec::new();
        write_records(&mut buf, &refs).unwrap();
        let cut = buf.len() - 3;
        match read_records(&buf[..cut]) {
            Err(Error::Format { offset, .. }) => assert!(offset as usize <= cut),
            other => panic!("expected format error, got {other:?}"),
        }
        assert!(matches!(
            read_records(&b"DBVX\x01\0\0\0"[..]),
            Err(Error::Format { offset: 0, .. })
        ));
    }
}
