//! Tensor wire format: `rank: u32 LE`, `dims: rank x u32 LE`, then
//! `prod(dims)` row-major `f64 LE` values.

use std::io::{Read, Write};

use super::Tensor;
use crate::error::{Error, Result};

pub fn tensor_to_bytes(t: &Tensor) -> Vec<u8> {
    let mut out = Vec::with_capacity(4 + 4 * t.rank() + 8 * t.numel());
    out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
    for &d in t.shape() {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for v in t.data().iter() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

/// Decodes one tensor from the front of `bytes`, returning it and the number
/// of bytes consumed.
pub fn tensor_from_bytes(bytes: &[u8]) -> Result<(Tensor, usize)> {
    let truncated = || Error::dim("truncated tensor record".to_string());
    let u32_at = |off: usize| -> Result<u32> {
        let b = bytes.get(off..off + 4).ok_or_else(truncated)?;
        Ok(u32::from_le_bytes(b.try_into().unwrap()))
    };
    let rank = u32_at(0)? as usize;
    if rank == 0 || rank > 8 {
        return Err(Error::dim(format!("unsupported tensor rank {rank}")));
    }
    let shape: Vec<usize> = (0..rank).map(|i| u32_at(4 + 4 * i).map(|d| d as usize)).collect::<Result<_>>()?;
    let n: usize = shape.iter().product();
    let start = 4 + 4 * rank;
    let body = bytes.get(start..start + 8 * n).ok_or_else(truncated)?;
    let data = body.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
    Ok((Tensor::from_vec(&shape, data)?, start + 8 * n))
}

pub fn write_tensor(w: &mut impl Write, t: &Tensor) -> std::io::Result<()> {
    w.write_all(&tensor_to_bytes(t))
}

pub fn read_tensor(r: &mut impl Read) -> Result<Tensor> {
    let mut buf = Vec::new();
    r.read_to_end(&mut buf).map_err(|e| Error::dim(format!("read failed: {e}")))?;
    let (t, used) = tensor_from_bytes(&buf)?;
    if used != buf.len() {
        return Err(Error::dim(format!("{} trailing bytes after tensor", buf.len() - used)));
    }
    Ok(t)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn header_layout_is_little_endian() {
        let t = Tensor::from_vec(&[2, 1], vec![1.0, -0.5]).unwrap();
        let b = tensor_to_bytes(&t);
        assert_eq!(&b[..12], &[2, 0, 0, 0, 2, 0, 0, 0, 1, 0, 0, 0]);
        assert_eq!(&b[12..20], &1.0f64.to_le_bytes());
        assert_eq!(b.len(), 12 + 16);
    }

    #[test]
    fn truncated_input_is_an_error() {
        let t = Tensor::from_vec(&[3], vec![1.0, 2.0, 3.0]).unwrap();
        let b = tensor_to_bytes(&t);
        assert!(tensor_from_bytes(&b[..b.len() - 1]).is_err());
        assert!(read_tensor(&mut &[b.as_slice(), &[0u8]].concat()[..]).is_err());
    }

    proptest! {
        #[test]
        fn round_trip_is_bitwise(dims in prop::collection::vec(1usize..4, 1..4), seed in any::<u64>()) {
            let mut rng = crate::tensor::RngState::new(seed);
            let t = Tensor::randn(&dims, 3.0, &mut rng);
            let back = read_tensor(&mut tensor_to_bytes(&t).as_slice()).unwrap();
            prop_assert_eq!(back.shape(), t.shape());
            let a: Vec<u64> = t.data().iter().map(|v| v.to_bits()).collect();
            let b: Vec<u64> = back.data().iter().map(|v| v.to_bits()).collect();
            prop_assert_eq!(a, b);
        }
    }
}
