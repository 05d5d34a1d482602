//! The `CFNT` tensor container.
//!
//! | bytes | field |
//! |---|---|
//! | 4 | magic `CFNT` |
//! | 2 | version, u16 LE (currently 1) |
//! | 1 | dtype: 0 = f32, 1 = f64 |
//! | 1 | ndim |
//! | 4 x ndim | dims, u32 LE |
//! | rest | values, row-major, LE |

use std::fs;
use std::path::Path;

use cfn_autograd::Tensor;

use crate::error::{CfnError, Result};

pub const MAGIC: [u8; 4] = *b"CFNT";
pub const VERSION: u16 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Dtype {
    F32,
    F64,
}

impl Dtype {
    pub fn code(self) -> u8 {
        match self {
            Dtype::F32 => 0,
            Dtype::F64 => 1,
        }
    }

    pub fn from_code(code: u8) -> Result<Self> {
        match code {
            0 => Ok(Dtype::F32),
            1 => Ok(Dtype::F64),
            other => Err(CfnError::UnknownDtype(other)),
        }
    }

    pub fn width(self) -> usize {
        match self {
            Dtype::F32 => 4,
            Dtype::F64 => 8,
        }
    }
}

pub fn encode_tensor(tensor: &Tensor, dtype: Dtype) -> Vec<u8> {
    let shape = tensor.shape();
    let mut out = Vec::with_capacity(8 + 4 * shape.len() + dtype.width() * tensor.numel());
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.push(dtype.code());
    out.push(u8::try_from(shape.len()).expect("rank fits in a byte"));
    for &d in shape {
        out.extend_from_slice(&u32::try_from(d).expect("dimension fits in u32").to_le_bytes());
    }
    for &v in tensor.data() {
        match dtype {
            Dtype::F32 => out.extend_from_slice(&(v as f32).to_le_bytes()),
            Dtype::F64 => out.extend_from_slice(&v.to_le_bytes()),
        }
    }
    out
}

fn take<'a>(bytes: &'a [u8], at: &mut usize, n: usize) -> Result<&'a [u8]> {
    let end = *at + n;
    if end > bytes.len() {
        return Err(CfnError::Truncated {
            needed: end,
            found: bytes.len(),
        });
    }
    let out = &bytes[*at..end];
    *at = end;
    Ok(out)
}

pub fn decode_tensor(bytes: &[u8]) -> Result<Tensor> {
    let mut at = 0;
    let magic = take(bytes, &mut at, 4)?;
    if magic != MAGIC {
        return Err(CfnError::BadMagic {
            expected: MAGIC,
            found: magic.try_into().expect("four bytes"),
        });
    }
    let version = u16::from_le_bytes(take(bytes, &mut at, 2)?.try_into().expect("two bytes"));
    if version != VERSION {
        return Err(CfnError::UnsupportedVersion {
            found: version as u32,
            supported: VERSION as u32,
        });
    }
    let dtype = Dtype::from_code(take(bytes, &mut at, 1)?[0])?;
    let ndim = take(bytes, &mut at, 1)?[0] as usize;
    let mut shape = Vec::with_capacity(ndim);
    for _ in 0..ndim {
        let d = u32::from_le_bytes(take(bytes, &mut at, 4)?.try_into().expect("four bytes"));
        shape.push(d as usize);
    }
    let size = shape
        .iter()
        .try_fold(dtype.width(), |acc, &d| acc.checked_mul(d))
        .ok_or_else(|| CfnError::Data(format!("shape {shape:?} is too large")))?;
    let payload = take(bytes, &mut at, size)?;
    if at != bytes.len() {
        return Err(CfnError::Data(format!("{} trailing bytes after tensor payload", bytes.len() - at)));
    }
    let data: Vec<f64> = match dtype {
        Dtype::F32 => payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("four bytes")) as f64)
            .collect(),
        Dtype::F64 => payload
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("eight bytes")))
            .collect(),
    };
    Tensor::new(shape, data).map_err(|e| CfnError::Data(e.to_string()))
}

pub fn write_tensor(path: &Path, tensor: &Tensor) -> Result<()> {
    write_tensor_as(path, tensor, Dtype::F64)
}

pub fn write_tensor_as(path: &Path, tensor: &Tensor, dtype: Dtype) -> Result<()> {
    fs::write(path, encode_tensor(tensor, dtype)).map_err(|e| CfnError::io(format!("writing {}", path.display()), e))
}

pub fn read_tensor(path: &Path) -> Result<Tensor> {
    let bytes = fs::read(path).map_err(|e| CfnError::io(format!("reading {}", path.display()), e))?;
    decode_tensor(&bytes)
}
