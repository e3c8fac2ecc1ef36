//! Element types supported by the archive format and the conversions
//! between them.
//!
//! Every conversion goes through `f64`. Narrowing casts round to nearest,
//! ties to even, directly from the `f64` value (no intermediate `f32` step).

use std::fmt;
use std::str::FromStr;

use half::{bf16, f16};
use serde::{Deserialize, Serialize};

/// Storage dtype of a tensor.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum DType {
    F64,
    F32,
    F16,
    BF16,
}

impl DType {
    pub const ALL: [DType; 4] = [DType::F64, DType::F32, DType::F16, DType::BF16];

    /// Bytes per element.
    pub const fn size(self) -> usize {
        match self {
            DType::F64 => 8,
            DType::F32 => 4,
            DType::F16 | DType::BF16 => 2,
        }
    }

    pub const fn as_str(self) -> &'static str {
        match self {
            DType::F64 => "F64",
            DType::F32 => "F32",
            DType::F16 => "F16",
            DType::BF16 => "BF16",
        }
    }

    /// Decodes `out.len()` little-endian elements from `bytes` into `out`.
    ///
    /// `bytes` must hold exactly `out.len() * self.size()` bytes.
    pub fn decode_into(self, bytes: &[u8], out: &mut [f64]) {
        debug_assert_eq!(bytes.len(), out.len() * self.size());
        match self {
            DType::F64 => {
                for (o, c) in out.iter_mut().zip(bytes.chunks_exact(8)) {
                    *o = f64::from_le_bytes(c.try_into().unwrap());
                }
            }
            DType::F32 => {
                for (o, c) in out.iter_mut().zip(bytes.chunks_exact(4)) {
                    *o = f32::from_le_bytes(c.try_into().unwrap()) as f64;
                }
            }
            DType::F16 => {
                for (o, c) in out.iter_mut().zip(bytes.chunks_exact(2)) {
                    *o = f16::from_bits(u16::from_le_bytes([c[0], c[1]])).to_f64();
                }
            }
            DType::BF16 => {
                for (o, c) in out.iter_mut().zip(bytes.chunks_exact(2)) {
                    *o = bf16::from_bits(u16::from_le_bytes([c[0], c[1]])).to_f64();
                }
            }
        }
    }

    /// Encodes `values` into `out` with round-to-nearest-even.
    ///
    /// `out` must hold exactly `values.len() * self.size()` bytes.
    pub fn encode_into(self, values: &[f64], out: &mut [u8]) {
        debug_assert_eq!(out.len(), values.len() * self.size());
        match self {
            DType::F64 => {
                for (v, c) in values.iter().zip(out.chunks_exact_mut(8)) {
                    c.copy_from_slice(&v.to_le_bytes());
                }
            }
            DType::F32 => {
                for (v, c) in values.iter().zip(out.chunks_exact_mut(4)) {
                    c.copy_from_slice(&(*v as f32).to_le_bytes());
                }
            }
            DType::F16 => {
                for (v, c) in values.iter().zip(out.chunks_exact_mut(2)) {
                    c.copy_from_slice(&f16::from_f64(*v).to_bits().to_le_bytes());
                }
            }
            DType::BF16 => {
                for (v, c) in values.iter().zip(out.chunks_exact_mut(2)) {
                    c.copy_from_slice(&bf16::from_f64(*v).to_bits().to_le_bytes());
                }
            }
        }
    }

    /// Rounds `value` onto this dtype's lattice and returns it as `f64`.
    pub fn round(self, value: f64) -> f64 {
        match self {
            DType::F64 => value,
            DType::F32 => value as f32 as f64,
            DType::F16 => f16::from_f64(value).to_f64(),
            DType::BF16 => bf16::from_f64(value).to_f64(),
        }
    }
}

impl fmt::Display for DType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Error for a dtype string that is not one of `F64`, `F32`, `F16`, `BF16`.
#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("unknown dtype {0:?}")]
pub struct UnknownDType(pub String);

impl FromStr for DType {
    type Err = UnknownDType;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "F64" => Ok(DType::F64),
            "F32" => Ok(DType::F32),
            "F16" => Ok(DType::F16),
            "BF16" => Ok(DType::BF16),
            other => Err(UnknownDType(other.to_string())),
        }
    }
}
