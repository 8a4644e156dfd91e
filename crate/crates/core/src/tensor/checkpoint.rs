//! Binary checkpoint format.
//!
//! Layout (little endian):
//!
//! ```text
//! magic        8 bytes  "NSTS6CKP"
//! version      u32      1
//! meta_len     u32      length of the metadata block
//! meta         UTF-8    "key=value\n" lines (model hyperparameters etc.)
//! count        u32      number of tensors
//! per tensor:
//!   name_len   u16
//!   name       UTF-8
//!   rank       u8
//!   extents    rank x u32
//!   data       product(extents) x f32
//! ```

use std::io::{Read, Write};
use std::path::Path;

use indexmap::IndexMap;

use super::Tensor;
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 8] = b"NSTS6CKP";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Checkpoint {
    pub meta: Vec<(String, String)>,
    pub tensors: IndexMap<String, Tensor<f32>>,
}

fn fmt_err(msg: impl Into<String>) -> Error {
    Error::Format(msg.into())
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(fmt_err(format!(
                "truncated while reading {what}: need {n} bytes at offset {}, file has {}",
                self.pos,
                self.buf.len()
            )));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().unwrap()))
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn utf8(&mut self, n: usize, what: &str) -> Result<String> {
        String::from_utf8(self.take(n, what)?.to_vec())
            .map_err(|_| fmt_err(format!("{what} is not valid UTF-8")))
    }
}

impl Checkpoint {
    pub fn meta_value(&self, key: &str) -> Option<&str> {
        self.meta.iter().find(|(k, _)| k == key).map(|(_, v)| v.as_str())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        let mut meta = String::new();
        for (k, v) in &self.meta {
            if k.contains(['=', '\n']) || v.contains('\n') {
                return Err(fmt_err(format!("metadata entry {k:?} cannot be encoded")));
            }
            meta.push_str(k);
            meta.push('=');
            meta.push_str(v);
            meta.push('\n');
        }
        out.extend_from_slice(&(meta.len() as u32).to_le_bytes());
        out.extend_from_slice(meta.as_bytes());
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for (name, t) in &self.tensors {
            let nb = name.as_bytes();
            let name_len = u16::try_from(nb.len()).map_err(|_| fmt_err("tensor name too long"))?;
            let rank = u8::try_from(t.rank()).map_err(|_| fmt_err("tensor rank too large"))?;
            out.extend_from_slice(&name_len.to_le_bytes());
            out.extend_from_slice(nb);
            out.push(rank);
            for &e in t.shape() {
                let e = u32::try_from(e).map_err(|_| fmt_err("extent exceeds u32"))?;
                out.extend_from_slice(&e.to_le_bytes());
            }
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Self> {
        let mut r = Reader { buf, pos: 0 };
        if r.take(8, "magic")? != MAGIC {
            return Err(fmt_err("bad magic: not a checkpoint file"));
        }
        let version = r.u32("version")?;
        if version != VERSION {
            return Err(fmt_err(format!("unsupported checkpoint version {version}")));
        }
        let meta_len = r.u32("metadata length")? as usize;
        let text = r.utf8(meta_len, "metadata")?;
        let mut meta = Vec::new();
        for line in text.lines() {
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| fmt_err(format!("malformed metadata line {line:?}")))?;
            meta.push((k.to_string(), v.to_string()));
        }
        let count = r.u32("tensor count")?;
        let mut tensors = IndexMap::new();
        for _ in 0..count {
            let name_len = r.u16("name length")? as usize;
            let name = r.utf8(name_len, "tensor name")?;
            let rank = r.u8("rank")? as usize;
            let shape = (0..rank)
                .map(|_| r.u32("extent").map(|e| e as usize))
                .collect::<Result<Vec<_>>>()?;
            let n: usize = shape.iter().product();
            let raw = r.take(n * 4, "tensor data")?;
            let data = raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
            if tensors.insert(name.clone(), Tensor::new(shape, data)?).is_some() {
                return Err(fmt_err(format!("duplicate tensor {name:?}")));
            }
        }
        if r.pos != buf.len() {
            return Err(fmt_err(format!("{} trailing bytes", buf.len() - r.pos)));
        }
        Ok(Self { meta, tensors })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let bytes = self.to_bytes()?;
        std::fs::File::create(path)?.write_all(&bytes)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let mut buf = Vec::new();
        std::fs::File::open(path)?.read_to_end(&mut buf)?;
        Self::from_bytes(&buf)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn sample() -> Checkpoint {
        let mut tensors = IndexMap::new();
        tensors.insert("fast.stem.w".into(), Tensor::new(vec![2, 1, 1], vec![1.5, -0.0]).unwrap());
        tensors.insert("slow.lambda_logit".into(), Tensor::scalar(f32::MIN_POSITIVE));
        Checkpoint { meta: vec![("channels".into(), "4".into())], tensors }
    }

    #[test]
    fn layout_is_as_documented() {
        let b = sample().to_bytes().unwrap();
        assert_eq!(&b[..8], MAGIC);
        assert_eq!(u32::from_le_bytes(b[8..12].try_into().unwrap()), 1);
        assert_eq!(u32::from_le_bytes(b[12..16].try_into().unwrap()), 11);
        assert_eq!(&b[16..27], b"channels=4\n");
        assert_eq!(u32::from_le_bytes(b[27..31].try_into().unwrap()), 2);
        assert_eq!(u16::from_le_bytes(b[31..33].try_into().unwrap()), 11);
    }

    #[test]
    fn rejects_bad_magic_and_truncation() {
        let mut b = sample().to_bytes().unwrap();
        let err = Checkpoint::from_bytes(&b[..b.len() - 2]).unwrap_err();
        assert!(err.to_string().contains("truncated"));
        b[0] = b'X';
        assert!(Checkpoint::from_bytes(&b).unwrap_err().to_string().contains("magic"));
    }

    proptest! {
        #[test]
        fn round_trip_is_bit_exact(bits in proptest::collection::vec(any::<u32>(), 1..40)) {
            let data: Vec<f32> = bits.iter().map(|&b| f32::from_bits(b)).collect();
            let mut tensors = IndexMap::new();
            tensors.insert("t".to_string(), Tensor::new(vec![data.len()], data).unwrap());
            let ck = Checkpoint { meta: vec![("k".into(), "v = w".into())], tensors };
            let bytes = ck.to_bytes().unwrap();
            let back = Checkpoint::from_bytes(&bytes).unwrap();
            prop_assert_eq!(back.to_bytes().unwrap(), bytes);
            let orig = ck.tensors["t"].data();
            let got = back.tensors["t"].data();
            prop_assert!(orig.iter().zip(got).all(|(a, b)| a.to_bits() == b.to_bits()));
        }
    }
}
