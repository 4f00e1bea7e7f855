//! Binary tensor container.
//!
//! Layout: `b"CBTN"`, version `u8`, rank `u8`, `rank` extents as `u64` LE,
//! then `numel` values as `f64` LE. No padding, no trailer.

use super::Tensor;
use crate::error::{CbbError, Result};
use std::io::{Read, Write};

pub const TENSOR_MAGIC: [u8; 4] = *b"CBTN";
pub const TENSOR_VERSION: u8 = 1;

pub fn write_tensor<W: Write>(mut w: W, t: &Tensor) -> Result<()> {
    let rank = u8::try_from(t.rank())
        .map_err(|_| CbbError::Format(format!("rank {} does not fit in u8", t.rank())))?;
    w.write_all(&TENSOR_MAGIC)?;
    w.write_all(&[TENSOR_VERSION, rank])?;
    for &d in t.shape() {
        w.write_all(&(d as u64).to_le_bytes())?;
    }
    for &v in t.data() {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

pub fn read_tensor<R: Read>(mut r: R) -> Result<Tensor> {
    let mut head = [0u8; 6];
    r.read_exact(&mut head)?;
    if head[..4] != TENSOR_MAGIC {
        return Err(CbbError::Format(format!("bad magic {:?}", &head[..4])));
    }
    if head[4] != TENSOR_VERSION {
        return Err(CbbError::Format(format!(
            "unsupported tensor format version {}",
            head[4]
        )));
    }
    let rank = head[5] as usize;
    let mut shape = Vec::with_capacity(rank);
    let mut buf = [0u8; 8];
    for _ in 0..rank {
        r.read_exact(&mut buf)?;
        let d = usize::try_from(u64::from_le_bytes(buf))
            .map_err(|_| CbbError::Format("extent overflows usize".into()))?;
        shape.push(d);
    }
    let numel = shape
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .ok_or_else(|| CbbError::Format("element count overflows".into()))?;
    let mut data = Vec::with_capacity(numel);
    for _ in 0..numel {
        r.read_exact(&mut buf)?;
        data.push(f64::from_le_bytes(buf));
    }
    let mut trailing = [0u8; 1];
    if r.read(&mut trailing)? != 0 {
        return Err(CbbError::Format("trailing bytes after tensor data".into()));
    }
    Tensor::new(shape, data)
}
