//! TNSR binary tensor format.
//!
//! Layout (little-endian, no padding):
//!
//! | field   | type      | value                           |
//! |---------|-----------|---------------------------------|
//! | magic   | `[u8; 4]` | `b"TNSR"`                       |
//! | version | `u32`     | 1                               |
//! | dtype   | `u8`      | 1 = real64, 2 = complex128      |
//! | ndim    | `u8`      | 2                               |
//! | dims    | `2 x u64` | rows, cols                      |
//! | payload | `f64...`  | row-major; complex as (re, im)  |

use std::fs;
use std::path::Path;

use num_complex::Complex64;
use thiserror::Error;

use crate::tensor::{ComplexTensor2, RealTensor2, Tensor2, TensorError};

pub const MAGIC: &[u8; 4] = b"TNSR";
pub const VERSION: u32 = 1;
pub const DTYPE_REAL64: u8 = 1;
pub const DTYPE_COMPLEX128: u8 = 2;
const HEADER_LEN: usize = 4 + 4 + 1 + 1 + 16;

#[derive(Debug, Error)]
pub enum TnsrError {
    #[error("bad magic bytes {0:?}")]
    BadMagic([u8; 4]),
    #[error("unsupported TNSR version {0}")]
    Version(u32),
    #[error("unknown dtype code {0}")]
    Dtype(u8),
    #[error("unsupported rank {0}, expected 2")]
    Rank(u8),
    #[error("truncated file: expected {expected} bytes, found {found}")]
    Truncated { expected: usize, found: usize },
    #[error("{0} trailing bytes after payload")]
    Trailing(usize),
    #[error("expected a {expected} tensor")]
    WrongKind { expected: &'static str },
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("{path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
}

fn header(dtype: u8, rows: usize, cols: usize, payload_len: usize) -> Vec<u8> {
    let mut out = Vec::with_capacity(HEADER_LEN + payload_len);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.push(dtype);
    out.push(2);
    out.extend_from_slice(&(rows as u64).to_le_bytes());
    out.extend_from_slice(&(cols as u64).to_le_bytes());
    out
}

pub fn encode(t: &Tensor2) -> Vec<u8> {
    match t {
        Tensor2::Real(r) => {
            let mut out = header(DTYPE_REAL64, r.rows(), r.cols(), r.len() * 8);
            for v in r.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
            out
        }
        Tensor2::Complex(c) => {
            let mut out = header(DTYPE_COMPLEX128, c.rows(), c.cols(), c.len() * 16);
            for v in c.data() {
                out.extend_from_slice(&v.re.to_le_bytes());
                out.extend_from_slice(&v.im.to_le_bytes());
            }
            out
        }
    }
}

fn read_f64(bytes: &[u8]) -> f64 {
    f64::from_le_bytes(bytes.try_into().expect("8-byte chunk"))
}

pub fn decode(bytes: &[u8]) -> Result<Tensor2, TnsrError> {
    if bytes.len() < 4 {
        return Err(TnsrError::Truncated {
            expected: HEADER_LEN,
            found: bytes.len(),
        });
    }
    let magic: [u8; 4] = bytes[..4].try_into().expect("4 bytes");
    if &magic != MAGIC {
        return Err(TnsrError::BadMagic(magic));
    }
    if bytes.len() < HEADER_LEN {
        return Err(TnsrError::Truncated {
            expected: HEADER_LEN,
            found: bytes.len(),
        });
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
    if version != VERSION {
        return Err(TnsrError::Version(version));
    }
    let dtype = bytes[8];
    let ndim = bytes[9];
    if ndim != 2 {
        return Err(TnsrError::Rank(ndim));
    }
    let rows = u64::from_le_bytes(bytes[10..18].try_into().expect("8 bytes")) as usize;
    let cols = u64::from_le_bytes(bytes[18..26].try_into().expect("8 bytes")) as usize;
    let width = match dtype {
        DTYPE_REAL64 => 8,
        DTYPE_COMPLEX128 => 16,
        other => return Err(TnsrError::Dtype(other)),
    };
    let expected = rows
        .checked_mul(cols)
        .and_then(|n| n.checked_mul(width))
        .and_then(|n| n.checked_add(HEADER_LEN))
        .unwrap_or(usize::MAX);
    if bytes.len() < expected {
        return Err(TnsrError::Truncated {
            expected,
            found: bytes.len(),
        });
    }
    if bytes.len() > expected {
        return Err(TnsrError::Trailing(bytes.len() - expected));
    }
    let payload = &bytes[HEADER_LEN..];
    Ok(match dtype {
        DTYPE_REAL64 => {
            let data = payload.chunks_exact(8).map(read_f64).collect();
            Tensor2::Real(RealTensor2::from_vec(rows, cols, data)?)
        }
        _ => {
            let data = payload
                .chunks_exact(16)
                .map(|c| Complex64::new(read_f64(&c[..8]), read_f64(&c[8..])))
                .collect();
            Tensor2::Complex(ComplexTensor2::from_vec(rows, cols, data)?)
        }
    })
}

pub fn save_tensor(path: impl AsRef<Path>, t: &Tensor2) -> Result<(), TnsrError> {
    let path = path.as_ref();
    fs::write(path, encode(t)).map_err(|source| TnsrError::Io {
        path: path.display().to_string(),
        source,
    })
}

pub fn load_tensor(path: impl AsRef<Path>) -> Result<Tensor2, TnsrError> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|source| TnsrError::Io {
        path: path.display().to_string(),
        source,
    })?;
    decode(&bytes)
}

pub fn save_real(path: impl AsRef<Path>, t: &RealTensor2) -> Result<(), TnsrError> {
    save_tensor(path, &Tensor2::Real(t.clone()))
}

pub fn load_real(path: impl AsRef<Path>) -> Result<RealTensor2, TnsrError> {
    match load_tensor(path)? {
        Tensor2::Real(t) => Ok(t),
        Tensor2::Complex(_) => Err(TnsrError::WrongKind { expected: "real" }),
    }
}

pub fn load_complex(path: impl AsRef<Path>) -> Result<ComplexTensor2, TnsrError> {
    match load_tensor(path)? {
        Tensor2::Complex(t) => Ok(t),
        Tensor2::Real(_) => Err(TnsrError::WrongKind {
            expected: "complex",
        }),
    }
}
