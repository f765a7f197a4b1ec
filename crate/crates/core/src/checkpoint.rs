//! Binary checkpoint files.
//!
//! Layout, little-endian: magic `TSA1`, version `u32`, config text as
//! `u32` length + UTF-8 bytes, tensor count `u32`, then per tensor the name
//! (`u32` length + bytes), dtype tag `u8`, rank `u32`, dims `u64 × rank` and
//! raw values; a CRC32 of everything before it closes the file.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::{DType, Scalar, Tensor};

pub const MAGIC: &[u8; 4] = b"TSA1";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub enum StoredTensor {
    F32(Tensor<f32>),
    F64(Tensor<f64>),
}

impl StoredTensor {
    pub fn dtype(&self) -> DType {
        match self {
            StoredTensor::F32(_) => DType::F32,
            StoredTensor::F64(_) => DType::F64,
        }
    }

    pub fn shape(&self) -> &[usize] {
        match self {
            StoredTensor::F32(t) => t.shape(),
            StoredTensor::F64(t) => t.shape(),
        }
    }

    pub fn from_tensor<T: Scalar>(t: &Tensor<T>) -> Self {
        match T::DTYPE {
            DType::F32 => StoredTensor::F32(t.cast()),
            DType::F64 => StoredTensor::F64(t.cast()),
        }
    }

    /// The tensor as `T`, which must be its stored dtype.
    pub fn to_tensor<T: Scalar>(&self) -> Option<Tensor<T>> {
        if self.dtype() != T::DTYPE {
            return None;
        }
        Some(match self {
            StoredTensor::F32(t) => t.cast(),
            StoredTensor::F64(t) => t.cast(),
        })
    }
}

#[derive(Clone, Debug, PartialEq, Default)]
pub struct Checkpoint {
    pub config_text: String,
    pub tensors: Vec<(String, StoredTensor)>,
}

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_data<T: Scalar>(out: &mut Vec<u8>, t: &Tensor<T>) {
    for &v in t.data() {
        v.write_le(out);
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::Format {
                path: self.path.to_path_buf(),
                msg: format!("truncated while reading {what} at byte {}", self.pos),
            });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().expect("8 bytes")))
    }

    fn string(&mut self, what: &str) -> Result<String> {
        let n = self.u32(what)? as usize;
        let b = self.take(n, what)?;
        String::from_utf8(b.to_vec()).map_err(|_| Error::Format {
            path: self.path.to_path_buf(),
            msg: format!("{what} is not UTF-8"),
        })
    }

    fn tensor<T: Scalar>(&mut self, shape: Vec<usize>, name: &str) -> Result<Tensor<T>> {
        let n: usize = shape.iter().product();
        let raw = self.take(n * T::BYTES, name)?;
        let data = raw.chunks(T::BYTES).map(T::read_le).collect();
        Tensor::new(shape, data).map_err(|e| Error::Format {
            path: self.path.to_path_buf(),
            msg: format!("tensor {name}: {e}"),
        })
    }
}

impl Checkpoint {
    pub fn push<T: Scalar>(&mut self, name: impl Into<String>, t: &Tensor<T>) {
        self.tensors.push((name.into(), StoredTensor::from_tensor(t)));
    }

    pub fn get(&self, name: &str) -> Option<&StoredTensor> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    /// Named tensor as `T`, with a descriptive error when absent or of
    /// another dtype.
    pub fn tensor<T: Scalar>(&self, name: &str) -> Result<Tensor<T>> {
        let stored = self
            .get(name)
            .ok_or_else(|| Error::Invalid(format!("checkpoint has no tensor `{name}`")))?;
        stored.to_tensor().ok_or_else(|| {
            Error::Invalid(format!(
                "checkpoint tensor `{name}` is {}, expected {}",
                stored.dtype(),
                T::DTYPE
            ))
        })
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        put_u32(&mut out, VERSION);
        put_u32(&mut out, self.config_text.len() as u32);
        out.extend_from_slice(self.config_text.as_bytes());
        put_u32(&mut out, self.tensors.len() as u32);
        for (name, t) in &self.tensors {
            put_u32(&mut out, name.len() as u32);
            out.extend_from_slice(name.as_bytes());
            out.push(t.dtype().tag());
            put_u32(&mut out, t.shape().len() as u32);
            for &d in t.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            match t {
                StoredTensor::F32(t) => put_data(&mut out, t),
                StoredTensor::F64(t) => put_data(&mut out, t),
            }
        }
        let crc = crc32fast::hash(&out);
        put_u32(&mut out, crc);
        out
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let fail = |msg: String| Error::Format {
            path: path.to_path_buf(),
            msg,
        };
        if bytes.len() < 12 {
            return Err(fail(format!("{} bytes is too short for a checkpoint", bytes.len())));
        }
        if &bytes[..4] != MAGIC {
            return Err(fail(format!(
                "bad magic {:?}, expected \"TSA1\"",
                String::from_utf8_lossy(&bytes[..4])
            )));
        }
        let (body, tail) = bytes.split_at(bytes.len() - 4);
        let stored = u32::from_le_bytes(tail.try_into().expect("4 bytes"));
        let actual = crc32fast::hash(body);
        if stored != actual {
            return Err(fail(format!("CRC32 mismatch: stored {stored:08x}, computed {actual:08x}")));
        }
        let mut r = Reader {
            bytes: body,
            pos: 4,
            path,
        };
        let version = r.u32("version")?;
        if version != VERSION {
            return Err(fail(format!("unsupported version {version}, expected {VERSION}")));
        }
        let config_text = r.string("config text")?;
        let count = r.u32("tensor count")?;
        let mut tensors = Vec::with_capacity(count as usize);
        for _ in 0..count {
            let name = r.string("tensor name")?;
            let tag = r.take(1, &name)?[0];
            let rank = r.u32(&name)? as usize;
            let shape = (0..rank)
                .map(|_| r.u64(&name).map(|d| d as usize))
                .collect::<Result<Vec<_>>>()?;
            let t = match tag {
                0 => StoredTensor::F32(r.tensor(shape, &name)?),
                1 => StoredTensor::F64(r.tensor(shape, &name)?),
                other => return Err(fail(format!("tensor {name} has unknown dtype tag {other}"))),
            };
            tensors.push((name, t));
        }
        if r.pos != body.len() {
            return Err(fail(format!("{} trailing bytes after the tensor table", body.len() - r.pos)));
        }
        Ok(Self { config_text, tensors })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        // write then rename so a crash never leaves a torn checkpoint
        let tmp = path.with_extension("partial");
        fs::write(&tmp, self.to_bytes()).map_err(|e| Error::io(&tmp, e))?;
        fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes, path)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn sample() -> Checkpoint {
        let mut c = Checkpoint {
            config_text: "epochs = 2\n".into(),
            ..Default::default()
        };
        c.push("w", &Tensor::<f32>::from_f64(vec![2, 3], &[1.0, -2.0, 3.5, 0.0, 1e-3, 7.0]).unwrap());
        c.push("counters", &Tensor::<f64>::from_f64(vec![2], &[5.0, 1.0]).unwrap());
        c.push("s", &Tensor::<f64>::scalar(0.25));
        c
    }

    #[test]
    fn layout_and_round_trip() {
        let c = sample();
        let b = c.to_bytes();
        assert_eq!(&b[..4], b"TSA1");
        assert_eq!(u32::from_le_bytes(b[4..8].try_into().unwrap()), 1);
        assert_eq!(u32::from_le_bytes(b[8..12].try_into().unwrap()), 11);
        let crc = u32::from_le_bytes(b[b.len() - 4..].try_into().unwrap());
        assert_eq!(crc, crc32fast::hash(&b[..b.len() - 4]));
        let back = Checkpoint::from_bytes(&b, Path::new("x")).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.tensor::<f32>("w").unwrap().data()[2], 3.5);
        assert!(back.tensor::<f64>("w").is_err());
        assert!(back.tensor::<f32>("missing").is_err());
    }

    #[test]
    fn corruption_is_detected() {
        let b = sample().to_bytes();
        for i in [0usize, 5, 20, b.len() - 10, b.len() - 1] {
            let mut bad = b.clone();
            bad[i] ^= 0x40;
            assert!(Checkpoint::from_bytes(&bad, Path::new("x")).is_err(), "byte {i}");
        }
        let err = Checkpoint::from_bytes(&b[..b.len() - 3], Path::new("ck.tsa")).unwrap_err().to_string();
        assert!(err.contains("ck.tsa"));
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.ckpt");
        sample().write(&p).unwrap();
        assert_eq!(Checkpoint::read(&p).unwrap(), sample());
        assert!(!p.with_extension("partial").exists());
    }

    proptest! {
        #[test]
        fn arbitrary_tables_round_trip(
            vals in proptest::collection::vec(proptest::num::f64::ANY, 1..20),
            name in "[a-z.]{1,12}",
            text in ".{0,40}",
        ) {
            let mut c = Checkpoint { config_text: text, ..Default::default() };
            c.push(name.clone(), &Tensor::<f64>::new(vec![vals.len()], vals.clone()).unwrap());
            let back = Checkpoint::from_bytes(&c.to_bytes(), Path::new("p")).unwrap();
            let t = back.tensor::<f64>(&name).unwrap();
            for (a, b) in t.data().iter().zip(&vals) {
                prop_assert_eq!(a.to_bits(), b.to_bits());
            }
        }
    }
}
