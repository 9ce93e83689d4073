//! `ZTEN` tensor files.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! offset  size        field
//! 0       4           magic "ZTEN"
//! 4       2           version (u16) = 1
//! 6       1           dtype code (u8), 1 = f32 little-endian
//! 7       1           ndim (u8), 1..=8
//! 8       4*ndim      dims (u32 each, outermost first)
//! ...     4*product   payload, row-major
//! ```

use std::fs;
use std::path::Path;

use super::Tensor;
use crate::error::{Error, Result};

pub const MAGIC: [u8; 4] = *b"ZTEN";
pub const FORMAT_VERSION: u16 = 1;
pub const DTYPE_F32: u8 = 1;
pub const MAX_NDIM: usize = 8;

const HEADER_LEN: usize = 8;

pub fn encode_tensor(t: &Tensor) -> Result<Vec<u8>> {
    let ndim = t.ndim();
    if ndim == 0 || ndim > MAX_NDIM {
        return Err(Error::Shape(format!("ndim {ndim} not in 1..={MAX_NDIM}")));
    }
    let mut out = Vec::with_capacity(HEADER_LEN + 4 * ndim + 4 * t.len());
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.push(DTYPE_F32);
    out.push(ndim as u8);
    for &d in t.dims() {
        let d = u32::try_from(d)
            .map_err(|_| Error::Shape(format!("extent {d} does not fit in u32")))?;
        out.extend_from_slice(&d.to_le_bytes());
    }
    for v in t.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(out)
}

pub fn decode_tensor(bytes: &[u8]) -> Result<Tensor> {
    if bytes.len() < HEADER_LEN {
        return Err(Error::Malformed(format!(
            "{} bytes is shorter than the header",
            bytes.len()
        )));
    }
    let magic: [u8; 4] = bytes[0..4].try_into().unwrap();
    if magic != MAGIC {
        return Err(Error::BadMagic(magic));
    }
    let version = u16::from_le_bytes([bytes[4], bytes[5]]);
    if version != FORMAT_VERSION {
        return Err(Error::UnsupportedVersion(version));
    }
    let dtype = bytes[6];
    if dtype != DTYPE_F32 {
        return Err(Error::UnsupportedDtype(dtype));
    }
    let ndim = bytes[7] as usize;
    if ndim == 0 || ndim > MAX_NDIM {
        return Err(Error::Malformed(format!(
            "ndim {ndim} not in 1..={MAX_NDIM}"
        )));
    }
    let dims_end = HEADER_LEN + 4 * ndim;
    if bytes.len() < dims_end {
        return Err(Error::Malformed("truncated dims".into()));
    }
    let dims: Vec<usize> = bytes[HEADER_LEN..dims_end]
        .chunks_exact(4)
        .map(|c| u32::from_le_bytes(c.try_into().unwrap()) as usize)
        .collect();
    let count = dims
        .iter()
        .try_fold(1u64, |acc, &d| acc.checked_mul(d as u64))
        .and_then(|n| n.checked_mul(4))
        .and_then(|n| usize::try_from(n).ok())
        .ok_or_else(|| Error::Malformed(format!("dims {dims:?} overflow")))?;
    let payload = &bytes[dims_end..];
    if payload.len() < count {
        return Err(Error::Malformed(format!(
            "truncated payload: need {count} bytes, have {}",
            payload.len()
        )));
    }
    if payload.len() > count {
        return Err(Error::Malformed(format!(
            "{} trailing bytes after payload",
            payload.len() - count
        )));
    }
    let data = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Tensor::new(dims, data)
}

pub fn write_tensor(t: &Tensor, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let bytes = encode_tensor(t)?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn read_tensor(path: impl AsRef<Path>) -> Result<Tensor> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_tensor(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn round_trips_ascending_2x3() {
        let t = Tensor::from_fn(&[2, 3], |i| i as f32).unwrap();
        let back = decode_tensor(&encode_tensor(&t).unwrap()).unwrap();
        assert!(back.bit_eq(&t));
    }

    #[test]
    fn round_trips_single_element() {
        let t = Tensor::new(vec![1], vec![-0.0]).unwrap();
        let back = decode_tensor(&encode_tensor(&t).unwrap()).unwrap();
        assert!(back.bit_eq(&t));
    }

    #[test]
    fn header_is_bit_exact() {
        let t = Tensor::new(vec![2], vec![1.0, -2.5]).unwrap();
        let bytes = encode_tensor(&t).unwrap();
        let expected: Vec<u8> = [
            &b"ZTEN"[..],
            &[1, 0],
            &[1],
            &[1],
            &[2, 0, 0, 0],
            &1.0f32.to_le_bytes(),
            &(-2.5f32).to_le_bytes(),
        ]
        .concat();
        assert_eq!(bytes, expected);
    }

    #[test]
    fn rejects_bad_magic() {
        let t = Tensor::zeros(&[2]).unwrap();
        let mut bytes = encode_tensor(&t).unwrap();
        bytes[0..4].copy_from_slice(b"XXXX");
        assert!(matches!(decode_tensor(&bytes), Err(Error::BadMagic(m)) if &m == b"XXXX"));
    }

    #[test]
    fn rejects_version_dtype_and_ndim() {
        let t = Tensor::zeros(&[2]).unwrap();
        let good = encode_tensor(&t).unwrap();

        let mut b = good.clone();
        b[4] = 2;
        assert!(matches!(
            decode_tensor(&b),
            Err(Error::UnsupportedVersion(2))
        ));

        let mut b = good.clone();
        b[6] = 7;
        assert!(matches!(decode_tensor(&b), Err(Error::UnsupportedDtype(7))));

        let mut b = good.clone();
        b[7] = 0;
        assert!(matches!(decode_tensor(&b), Err(Error::Malformed(_))));

        let mut b = good;
        b[7] = 9;
        assert!(matches!(decode_tensor(&b), Err(Error::Malformed(_))));
    }

    #[test]
    fn rejects_truncation_and_trailing_bytes() {
        let t = Tensor::zeros(&[2, 2]).unwrap();
        let good = encode_tensor(&t).unwrap();
        for cut in [3, 9, good.len() - 1] {
            assert!(decode_tensor(&good[..cut]).is_err(), "cut at {cut}");
        }
        let mut long = good.clone();
        long.push(0);
        assert!(matches!(decode_tensor(&long), Err(Error::Malformed(_))));
    }

    #[test]
    fn rejects_overflowing_dims() {
        let mut b = Vec::new();
        b.extend_from_slice(b"ZTEN");
        b.extend_from_slice(&1u16.to_le_bytes());
        b.push(1);
        b.push(8);
        for _ in 0..8 {
            b.extend_from_slice(&u32::MAX.to_le_bytes());
        }
        assert!(matches!(decode_tensor(&b), Err(Error::Malformed(m)) if m.contains("overflow")));
    }

    #[test]
    fn rejects_nan_payload() {
        let t = Tensor::zeros(&[1]).unwrap();
        let mut b = encode_tensor(&t).unwrap();
        let n = b.len();
        b[n - 4..].copy_from_slice(&f32::NAN.to_le_bytes());
        assert!(matches!(
            decode_tensor(&b),
            Err(Error::NonFinite { index: 0 })
        ));
    }

    proptest! {
        #[test]
        fn encode_decode_is_bitwise_identity(
            dims in prop::collection::vec(1usize..5, 1..=4),
            seed in any::<u64>(),
        ) {
            let len: usize = dims.iter().product();
            let mut state = seed | 1;
            let data: Vec<f32> = (0..len).map(|_| {
                state ^= state << 13; state ^= state >> 7; state ^= state << 17;
                let v = f32::from_bits(state as u32);
                if v.is_finite() { v } else { 0.5 }
            }).collect();
            let t = Tensor::new(dims, data).unwrap();
            let back = decode_tensor(&encode_tensor(&t).unwrap()).unwrap();
            prop_assert!(back.bit_eq(&t));
        }
    }
}
