//! Versioned little-endian container for named arrays, shared by
//! checkpoints and tile files.
//!
//! Layout: 4-byte magic, `u32` version, a caller-defined header blob
//! (length-prefixed), `u32` record count, then per record: `u32` name
//! length, UTF-8 name, `u8` dtype, `u32` rank, `u64` dims, payload.

use std::io::{Read, Write};

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};

use crate::error::{Error, Result};
use crate::numerics::Tensor;

const MAX_NAME: u32 = 4096;
const MAX_RANK: u32 = 8;

#[derive(Debug, Clone, PartialEq)]
pub enum Array {
    F64(Tensor),
    U16 { dims: Vec<usize>, data: Vec<u16> },
}

impl Array {
    fn dtype(&self) -> u8 {
        match self {
            Array::F64(_) => 0,
            Array::U16 { .. } => 1,
        }
    }

    fn dims(&self) -> &[usize] {
        match self {
            Array::F64(t) => t.shape(),
            Array::U16 { dims, .. } => dims,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Record {
    pub name: String,
    pub array: Array,
}

fn corrupt(msg: impl Into<String>) -> Error {
    Error::CorruptHeader(msg.into())
}

fn eof_as_corrupt(e: std::io::Error) -> Error {
    if e.kind() == std::io::ErrorKind::UnexpectedEof {
        corrupt("file truncated")
    } else {
        Error::Io(e)
    }
}

pub fn write_container<W: Write>(
    w: &mut W,
    magic: &[u8; 4],
    version: u32,
    header: &[u8],
    records: &[Record],
) -> Result<()> {
    w.write_all(magic)?;
    w.write_u32::<LittleEndian>(version)?;
    w.write_u32::<LittleEndian>(header.len() as u32)?;
    w.write_all(header)?;
    w.write_u32::<LittleEndian>(records.len() as u32)?;
    for r in records {
        let name = r.name.as_bytes();
        w.write_u32::<LittleEndian>(name.len() as u32)?;
        w.write_all(name)?;
        w.write_u8(r.array.dtype())?;
        let dims = r.array.dims();
        w.write_u32::<LittleEndian>(dims.len() as u32)?;
        for &d in dims {
            w.write_u64::<LittleEndian>(d as u64)?;
        }
        match &r.array {
            Array::F64(t) => {
                for &v in t.data() {
                    w.write_f64::<LittleEndian>(v)?;
                }
            }
            Array::U16 { data, .. } => {
                for &v in data {
                    w.write_u16::<LittleEndian>(v)?;
                }
            }
        }
    }
    Ok(())
}

/// Returns `(header blob, records)` after checking magic and version.
pub fn read_container<R: Read>(r: &mut R, magic: &[u8; 4], version: u32) -> Result<(Vec<u8>, Vec<Record>)> {
    let mut got = [0u8; 4];
    r.read_exact(&mut got).map_err(eof_as_corrupt)?;
    if &got != magic {
        return Err(corrupt(format!("bad magic {got:?}, expected {magic:?}")));
    }
    let v = r.read_u32::<LittleEndian>().map_err(eof_as_corrupt)?;
    if v != version {
        return Err(Error::UnsupportedVersion(v));
    }
    let hlen = r.read_u32::<LittleEndian>().map_err(eof_as_corrupt)? as usize;
    if hlen > 1 << 20 {
        return Err(corrupt(format!("header length {hlen} implausible")));
    }
    let mut header = vec![0u8; hlen];
    r.read_exact(&mut header).map_err(eof_as_corrupt)?;
    let n = r.read_u32::<LittleEndian>().map_err(eof_as_corrupt)?;
    let mut records = Vec::with_capacity(n.min(1024) as usize);
    for _ in 0..n {
        let nlen = r.read_u32::<LittleEndian>().map_err(eof_as_corrupt)?;
        if nlen > MAX_NAME {
            return Err(corrupt(format!("record name length {nlen}")));
        }
        let mut name = vec![0u8; nlen as usize];
        r.read_exact(&mut name).map_err(eof_as_corrupt)?;
        let name = String::from_utf8(name).map_err(|_| corrupt("record name not UTF-8"))?;
        let dtype = r.read_u8().map_err(eof_as_corrupt)?;
        let rank = r.read_u32::<LittleEndian>().map_err(eof_as_corrupt)?;
        if rank > MAX_RANK {
            return Err(corrupt(format!("record `{name}` has rank {rank}")));
        }
        let mut dims = Vec::with_capacity(rank as usize);
        for _ in 0..rank {
            dims.push(r.read_u64::<LittleEndian>().map_err(eof_as_corrupt)? as usize);
        }
        let count = dims
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .filter(|&c| c <= 1 << 32)
            .ok_or_else(|| corrupt(format!("record `{name}` dims {dims:?} overflow")))?;
        let array = match dtype {
            0 => {
                let mut data = vec![0.0; count];
                r.read_f64_into::<LittleEndian>(&mut data).map_err(eof_as_corrupt)?;
                Array::F64(Tensor::new(dims, data)?)
            }
            1 => {
                let mut data = vec![0u16; count];
                r.read_u16_into::<LittleEndian>(&mut data).map_err(eof_as_corrupt)?;
                Array::U16 { dims, data }
            }
            other => return Err(corrupt(format!("unknown dtype {other}"))),
        };
        records.push(Record { name, array });
    }
    Ok((header, records))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Vec<Record> {
        vec![
            Record {
                name: "w".into(),
                array: Array::F64(Tensor::new(vec![2, 2], vec![1.5, -0.0, f64::MIN_POSITIVE, 3e300]).unwrap()),
            },
            Record {
                name: "labels".into(),
                array: Array::U16 { dims: vec![3], data: vec![0, 7, 65535] },
            },
        ]
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let mut buf = Vec::new();
        write_container(&mut buf, b"TEST", 3, b"hdr", &sample()).unwrap();
        let (h, recs) = read_container(&mut buf.as_slice(), b"TEST", 3).unwrap();
        assert_eq!(h, b"hdr");
        assert_eq!(recs, sample());
        if let Array::F64(t) = &recs[0].array {
            assert!(t.data()[1].is_sign_negative());
        }
    }

    #[test]
    fn rejects_bad_magic_version_and_truncation() {
        let mut buf = Vec::new();
        write_container(&mut buf, b"TEST", 3, b"", &sample()).unwrap();
        assert!(matches!(read_container(&mut buf.as_slice(), b"XXXX", 3), Err(Error::CorruptHeader(_))));
        assert!(matches!(read_container(&mut buf.as_slice(), b"TEST", 4), Err(Error::UnsupportedVersion(3))));
        let cut = &buf[..buf.len() - 5];
        assert!(matches!(read_container(&mut &cut[..], b"TEST", 3), Err(Error::CorruptHeader(_))));
        let mut bad = buf.clone();
        bad[8] = 0xff; // header length
        bad[9] = 0xff;
        bad[10] = 0xff;
        assert!(matches!(read_container(&mut bad.as_slice(), b"TEST", 3), Err(Error::CorruptHeader(_))));
    }
}
