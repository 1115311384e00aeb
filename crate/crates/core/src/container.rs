//! Binary container shared by datasets and checkpoints.
//!
//! ```text
//! "PCNO" | u16 version | u64 manifest_len | manifest JSON | u32 crc(manifest)
//! u64 record_count
//! per record: u64 body_len | body | u32 crc(body)
//! body: u32 tensor_count, then per tensor
//!       u16 name_len | name | u8 dtype (0 real, 1 complex) | u8 rank | u64 dims.. | f64 LE data
//! ```
//!
//! Complex data is stored as interleaved `(re, im)` pairs. Writes go to a
//! temporary file in the target directory and are renamed into place.

use std::io::Write;
use std::path::Path;

use pcno_autodiff::{DType, Tensor, C64};

use crate::error::{CoreError, Result};

pub const MAGIC: &[u8; 4] = b"PCNO";
pub const VERSION: u16 = 1;

/// Named tensors in insertion order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Record {
    pub tensors: Vec<(String, Tensor)>,
}

impl Record {
    pub fn push(&mut self, name: impl Into<String>, t: Tensor) {
        self.tensors.push((name.into(), t));
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn take(&mut self, name: &str) -> Result<Tensor> {
        let i = self
            .tensors
            .iter()
            .position(|(n, _)| n == name)
            .ok_or_else(|| CoreError::Contract(format!("record has no tensor {name:?}")))?;
        Ok(self.tensors.remove(i).1)
    }

    fn encode(&self, out: &mut Vec<u8>) -> Result<()> {
        out.extend((self.tensors.len() as u32).to_le_bytes());
        for (name, t) in &self.tensors {
            let nb = name.as_bytes();
            if nb.len() > u16::MAX as usize || t.shape().len() > u8::MAX as usize {
                return Err(CoreError::Contract(format!("tensor {name:?} cannot be encoded")));
            }
            out.extend((nb.len() as u16).to_le_bytes());
            out.extend(nb);
            out.push(u8::from(t.is_complex()));
            out.push(t.shape().len() as u8);
            for &d in t.shape() {
                out.extend((d as u64).to_le_bytes());
            }
            if t.is_complex() {
                for z in t.cx() {
                    out.extend(z.re.to_le_bytes());
                    out.extend(z.im.to_le_bytes());
                }
            } else {
                for v in t.re() {
                    out.extend(v.to_le_bytes());
                }
            }
        }
        Ok(())
    }

    fn decode(body: &[u8], which: usize) -> Result<Self> {
        let mut r = Reader { buf: body, pos: 0, what: format!("record {which}") };
        let n = r.u32()? as usize;
        let mut tensors = Vec::with_capacity(n.min(1024));
        for _ in 0..n {
            let len = r.u16()? as usize;
            let name = String::from_utf8(r.bytes(len)?.to_vec())
                .map_err(|_| CoreError::Contract(format!("{}: tensor name is not utf-8", r.what)))?;
            let dtype = r.u8()?;
            let rank = r.u8()? as usize;
            let shape = (0..rank).map(|_| r.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let count: usize = shape.iter().product();
            let t = match dtype {
                0 => Tensor::real(&shape, (0..count).map(|_| r.f64()).collect::<Result<_>>()?)?,
                1 => Tensor::complex(
                    &shape,
                    (0..count).map(|_| Ok(C64::new(r.f64()?, r.f64()?))).collect::<Result<_>>()?,
                )?,
                d => return Err(CoreError::Contract(format!("{}: unknown dtype tag {d}", r.what))),
            };
            tensors.push((name, t));
        }
        if r.pos != body.len() {
            return Err(CoreError::Contract(format!("{}: trailing bytes", r.what)));
        }
        Ok(Self { tensors })
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
    what: String,
}

impl<'a> Reader<'a> {
    fn bytes(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(CoreError::Truncated(format!("{} ends at byte {}", self.what, self.buf.len())));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn array<const N: usize>(&mut self) -> Result<[u8; N]> {
        Ok(self.bytes(N)?.try_into().expect("length checked"))
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.bytes(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.array()?))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.array()?))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.array()?))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.array()?))
    }
}

pub fn encode_container(manifest: &serde_json::Value, records: &[Record]) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend(MAGIC);
    out.extend(VERSION.to_le_bytes());
    let m = serde_json::to_vec(manifest)?;
    out.extend((m.len() as u64).to_le_bytes());
    out.extend(&m);
    out.extend(crc32fast::hash(&m).to_le_bytes());
    out.extend((records.len() as u64).to_le_bytes());
    let mut body = Vec::new();
    for rec in records {
        body.clear();
        rec.encode(&mut body)?;
        out.extend((body.len() as u64).to_le_bytes());
        out.extend(&body);
        out.extend(crc32fast::hash(&body).to_le_bytes());
    }
    Ok(out)
}

pub fn decode_container(buf: &[u8]) -> Result<(serde_json::Value, Vec<Record>)> {
    if buf.len() < 4 || &buf[..4] != MAGIC {
        return Err(CoreError::BadMagic);
    }
    let mut r = Reader { buf, pos: 4, what: "header".into() };
    let version = r.u16()?;
    if version != VERSION {
        return Err(CoreError::UnsupportedVersion(version));
    }
    r.what = "manifest".into();
    let mlen = r.u64()? as usize;
    let m = r.bytes(mlen)?;
    if r.u32()? != crc32fast::hash(m) {
        return Err(CoreError::Checksum("manifest".into()));
    }
    let manifest = serde_json::from_slice(m)?;
    let n = r.u64()? as usize;
    let mut records = Vec::with_capacity(n.min(1 << 16));
    for i in 0..n {
        r.what = format!("record {i}");
        let len = r.u64()? as usize;
        let body = r.bytes(len)?;
        if r.u32()? != crc32fast::hash(body) {
            return Err(CoreError::Checksum(format!("record {i}")));
        }
        records.push(Record::decode(body, i)?);
    }
    if r.pos != buf.len() {
        return Err(CoreError::Contract("trailing bytes after last record".into()));
    }
    Ok((manifest, records))
}

/// Write `bytes` to `path` through a sibling temporary file.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
    tmp.write_all(bytes)?;
    #[cfg(unix)]
    {
        use std::os::unix::fs::PermissionsExt;
        tmp.as_file().set_permissions(std::fs::Permissions::from_mode(0o644))?;
    }
    tmp.as_file().sync_all()?;
    tmp.persist(path).map_err(|e| CoreError::Io(e.error))?;
    Ok(())
}

pub fn write_container(path: &Path, manifest: &serde_json::Value, records: &[Record]) -> Result<()> {
    write_atomic(path, &encode_container(manifest, records)?)
}

pub fn read_container(path: &Path) -> Result<(serde_json::Value, Vec<Record>)> {
    decode_container(&std::fs::read(path)?)
}

pub(crate) fn require_dtype(t: &Tensor, dtype: DType, what: &str) -> Result<()> {
    if t.dtype() != dtype {
        return Err(CoreError::Contract(format!("{what}: expected {dtype:?}, found {:?}", t.dtype())));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    fn sample() -> (serde_json::Value, Vec<Record>) {
        let mut a = Record::default();
        a.push("x", Tensor::real(&[2, 3], vec![1.0, -2.5, 3.0, 0.0, f64::MIN_POSITIVE, 1e300]).unwrap());
        a.push("k", Tensor::complex(&[2], vec![C64::new(1.0, -1.0), C64::new(0.5, 2.0)]).unwrap());
        let b = Record::default();
        (json!({"kind": "test", "n": 2}), vec![a, b])
    }

    #[test]
    fn round_trip() {
        let (m, r) = sample();
        let bytes = encode_container(&m, &r).unwrap();
        let (m2, r2) = decode_container(&bytes).unwrap();
        assert_eq!(m, m2);
        assert_eq!(r, r2);
    }

    #[test]
    fn corruption_is_classified() {
        let (m, r) = sample();
        let bytes = encode_container(&m, &r).unwrap();
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(decode_container(&bad), Err(CoreError::BadMagic)));
        let mut bad = bytes.clone();
        bad[4] = 9;
        assert!(matches!(decode_container(&bad), Err(CoreError::UnsupportedVersion(9))));
        assert!(matches!(decode_container(&bytes[..bytes.len() - 7]), Err(CoreError::Truncated(_))));
        let mut bad = bytes.clone();
        let k = bytes.len() - 30;
        bad[k] ^= 0x10;
        assert!(matches!(decode_container(&bad), Err(CoreError::Checksum(_))));
    }

    #[test]
    fn atomic_write_replaces_file() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.pcno");
        let (m, r) = sample();
        write_container(&p, &m, &r).unwrap();
        write_container(&p, &json!({}), &[]).unwrap();
        let (m2, r2) = read_container(&p).unwrap();
        assert_eq!(m2, json!({}));
        assert!(r2.is_empty());
        assert_eq!(std::fs::read_dir(dir.path()).unwrap().count(), 1);
    }
}
