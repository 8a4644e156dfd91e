//! Grid series container and its binary file format.
//!
//! ```text
//! magic       8 bytes  "GRIDSER1"
//! n, h, w     3 x u32
//! dt_minutes  u32
//! origin      i64      unix seconds of frame 0, i64::MIN when unknown
//! frames      n*h*w x f32, row-major
//! ```
//! All integers little endian.

use std::collections::BTreeMap;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"GRIDSER1";
pub const HEADER_LEN: usize = 32;
const NO_ORIGIN: i64 = i64::MIN;

#[derive(Clone, Debug, PartialEq)]
pub struct GridSeries {
    /// `[N, H, W]` traffic volume.
    pub frames: Tensor<f32>,
    pub dt_minutes: u32,
    pub origin_timestamp: Option<i64>,
}

impl GridSeries {
    pub fn new(frames: Tensor<f32>, dt_minutes: u32) -> Result<Self> {
        if frames.rank() != 3 {
            return Err(Error::shape(format!("grid series must be [N,H,W], got {:?}", frames.shape())));
        }
        Ok(Self { frames, dt_minutes, origin_timestamp: None })
    }

    pub fn len(&self) -> usize {
        self.frames.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn height(&self) -> usize {
        self.frames.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.frames.shape()[2]
    }

    pub fn frame(&self, t: usize) -> Tensor<f32> {
        let (h, w) = (self.height(), self.width());
        Tensor::new(vec![h, w], self.frames.data()[t * h * w..(t + 1) * h * w].to_vec())
            .expect("frame slice")
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(HEADER_LEN + self.frames.len() * 4);
        out.extend_from_slice(MAGIC);
        for d in [self.len(), self.height(), self.width()] {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        out.extend_from_slice(&self.dt_minutes.to_le_bytes());
        out.extend_from_slice(&self.origin_timestamp.unwrap_or(NO_ORIGIN).to_le_bytes());
        for v in self.frames.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Self> {
        if buf.len() < HEADER_LEN {
            return Err(Error::Format(format!("truncated header: {} of {HEADER_LEN} bytes", buf.len())));
        }
        if &buf[..8] != MAGIC {
            return Err(Error::Format("bad magic: not a grid series file".into()));
        }
        let u32_at = |o: usize| u32::from_le_bytes(buf[o..o + 4].try_into().unwrap()) as usize;
        let (n, h, w) = (u32_at(8), u32_at(12), u32_at(16));
        let dt_minutes = u32_at(20) as u32;
        let origin = i64::from_le_bytes(buf[24..32].try_into().unwrap());
        let expect = n
            .checked_mul(h)
            .and_then(|v| v.checked_mul(w))
            .and_then(|v| v.checked_mul(4))
            .ok_or_else(|| Error::Format("header extents overflow".into()))?;
        let payload = &buf[HEADER_LEN..];
        if payload.len() < expect {
            return Err(Error::Format(format!(
                "truncated payload: header declares {n} frames of {h}x{w} ({expect} bytes), found {}",
                payload.len()
            )));
        }
        if payload.len() > expect {
            return Err(Error::Format(format!("{} trailing bytes after payload", payload.len() - expect)));
        }
        let mut data = Vec::with_capacity(n * h * w);
        for (i, c) in payload.chunks_exact(4).enumerate() {
            let v = f32::from_le_bytes(c.try_into().unwrap());
            if v.is_nan() {
                let (t, r) = (i / (h * w), i % (h * w));
                return Err(Error::Data(format!("NaN at frame {t}, cell ({}, {})", r / w, r % w)));
            }
            data.push(v);
        }
        Ok(Self {
            frames: Tensor::new(vec![n, h, w], data)?,
            dt_minutes,
            origin_timestamp: (origin != NO_ORIGIN).then_some(origin),
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }

    /// Long-format CSV with columns `t,row,col,value` (header optional).
    /// Missing cells are filled with zeros.
    pub fn from_csv(reader: impl std::io::Read, dt_minutes: u32) -> Result<Self> {
        let mut rdr = csv::ReaderBuilder::new().has_headers(false).trim(csv::Trim::All).from_reader(reader);
        let mut cells: BTreeMap<(usize, usize, usize), f32> = BTreeMap::new();
        let (mut n, mut h, mut w) = (0, 0, 0);
        for (line, rec) in rdr.records().enumerate() {
            let rec = rec.map_err(|e| Error::Data(format!("csv line {}: {e}", line + 1)))?;
            if rec.len() != 4 {
                return Err(Error::Data(format!("csv line {}: expected 4 columns, got {}", line + 1, rec.len())));
            }
            if line == 0 && rec[0].parse::<usize>().is_err() {
                continue;
            }
            let idx = |k: usize| {
                rec[k]
                    .parse::<usize>()
                    .map_err(|_| Error::Data(format!("csv line {}: bad index {:?}", line + 1, &rec[k])))
            };
            let (t, r, c) = (idx(0)?, idx(1)?, idx(2)?);
            let v: f32 = rec[3]
                .parse()
                .map_err(|_| Error::Data(format!("csv line {}: bad value {:?}", line + 1, &rec[3])))?;
            if v.is_nan() {
                return Err(Error::Data(format!("csv line {}: NaN value", line + 1)));
            }
            n = n.max(t + 1);
            h = h.max(r + 1);
            w = w.max(c + 1);
            cells.insert((t, r, c), v);
        }
        let mut frames = Tensor::zeros(&[n, h, w]);
        for ((t, r, c), v) in cells {
            frames.data_mut()[(t * h + r) * w + c] = v;
        }
        Self::new(frames, dt_minutes)
    }
}
