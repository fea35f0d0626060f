//! Tensor interchange file: three text lines then raw little-endian data.
//!
//! ```text
//! intq-tensor 1
//! dtype f64
//! shape 4 1 16 16
//! <4*1*16*16 little-endian f64 values>
//! ```
//!
//! `dtype u8` holds input codes already on the 8-bit grid.

use std::path::Path;

use intq_core::{Error, Result, Tensor};

pub const MAGIC: &str = "intq-tensor";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub enum TensorData {
    F64(Tensor),
    U8 { shape: [usize; 4], codes: Vec<u8> },
}

impl TensorData {
    pub fn to_bytes(&self) -> Vec<u8> {
        let (dtype, shape) = match self {
            TensorData::F64(t) => ("f64", t.shape),
            TensorData::U8 { shape, .. } => ("u8", *shape),
        };
        let mut out = format!(
            "{MAGIC} {VERSION}\ndtype {dtype}\nshape {} {} {} {}\n",
            shape[0], shape[1], shape[2], shape[3]
        )
        .into_bytes();
        match self {
            TensorData::F64(t) => {
                for v in &t.data {
                    out.extend_from_slice(&v.to_le_bytes());
                }
            }
            TensorData::U8 { codes, .. } => out.extend_from_slice(codes),
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let what = "tensor file";
        let bad = |m: &str| Error::Format {
            what: what.into(),
            msg: m.into(),
        };
        let mut lines = Vec::with_capacity(3);
        let mut rest = bytes;
        for _ in 0..3 {
            let nl = rest.iter().position(|&b| b == b'\n').ok_or_else(|| bad("truncated header"))?;
            lines.push(std::str::from_utf8(&rest[..nl]).map_err(|_| bad("header is not UTF-8"))?);
            rest = &rest[nl + 1..];
        }
        let version = lines[0]
            .strip_prefix(MAGIC)
            .and_then(|v| v.trim().parse::<u32>().ok())
            .ok_or_else(|| bad("bad magic line"))?;
        if version != VERSION {
            return Err(Error::VersionMismatch {
                what: what.into(),
                found: version,
                expected: VERSION,
            });
        }
        let dtype = lines[1].strip_prefix("dtype ").ok_or_else(|| bad("missing dtype"))?;
        let dims: Vec<usize> = lines[2]
            .strip_prefix("shape ")
            .ok_or_else(|| bad("missing shape"))?
            .split_whitespace()
            .map(|d| d.parse().map_err(|_| bad("shape is not a list of integers")))
            .collect::<Result<_>>()?;
        let shape: [usize; 4] = dims.try_into().map_err(|_| bad("shape must have 4 dimensions"))?;
        let count: usize = shape.iter().product();
        match dtype {
            "f64" => {
                if rest.len() != 8 * count {
                    return Err(bad(&format!("{} data bytes, expected {}", rest.len(), 8 * count)));
                }
                let data = rest
                    .chunks_exact(8)
                    .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                    .collect();
                Ok(TensorData::F64(Tensor::from_vec(shape, data)?))
            }
            "u8" => {
                if rest.len() != count {
                    return Err(bad(&format!("{} data bytes, expected {count}", rest.len())));
                }
                Ok(TensorData::U8 {
                    shape,
                    codes: rest.to_vec(),
                })
            }
            other => Err(bad(&format!("unknown dtype {other:?}"))),
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}
