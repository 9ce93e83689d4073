//! Dense row-major `f32` tensors plus the `ZTEN` interchange format and
//! PNG ingestion of RGB-thermal pairs.

mod format;
mod image_io;

pub use format::{
    decode_tensor, encode_tensor, read_tensor, write_tensor, DTYPE_F32, FORMAT_VERSION, MAGIC,
    MAX_NDIM,
};
pub use image_io::{
    load_image_pair, standardize, write_mask_png, MultispectralPair, NormalizationSpec,
};

use crate::error::{Error, Result};

/// Dense row-major tensor of finite `f32` values, outermost dimension first.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    dims: Vec<usize>,
    data: Vec<f32>,
}

fn checked_len(dims: &[usize]) -> Result<usize> {
    if dims.is_empty() {
        return Err(Error::Shape("tensor needs at least one dimension".into()));
    }
    let mut len = 1usize;
    for &d in dims {
        if d == 0 {
            return Err(Error::Shape(format!("zero extent in dims {dims:?}")));
        }
        len = len
            .checked_mul(d)
            .ok_or_else(|| Error::Shape(format!("element count of {dims:?} overflows")))?;
    }
    Ok(len)
}

impl Tensor {
    pub fn new(dims: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        let len = checked_len(&dims)?;
        if len != data.len() {
            return Err(Error::Shape(format!(
                "dims {dims:?} need {len} values, got {}",
                data.len()
            )));
        }
        if let Some(index) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite { index });
        }
        Ok(Self { dims, data })
    }

    /// Builds a tensor from values that are finite by construction.
    ///
    /// Only used internally where every value comes from arithmetic on
    /// finite inputs; a debug assertion still guards it.
    pub(crate) fn from_parts(dims: Vec<usize>, data: Vec<f32>) -> Self {
        debug_assert_eq!(checked_len(&dims).ok(), Some(data.len()));
        debug_assert!(data.iter().all(|v| v.is_finite()));
        Self { dims, data }
    }

    pub fn zeros(dims: &[usize]) -> Result<Self> {
        Self::full(dims, 0.0)
    }

    pub fn full(dims: &[usize], value: f32) -> Result<Self> {
        if !value.is_finite() {
            return Err(Error::NonFinite { index: 0 });
        }
        let len = checked_len(dims)?;
        Ok(Self {
            dims: dims.to_vec(),
            data: vec![value; len],
        })
    }

    /// Fills a tensor by evaluating `f` at every flat index.
    pub fn from_fn(dims: &[usize], f: impl FnMut(usize) -> f32) -> Result<Self> {
        let len = checked_len(dims)?;
        Self::new(dims.to_vec(), (0..len).map(f).collect())
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn ndim(&self) -> usize {
        self.dims.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    /// Returns a copy with new dims covering the same number of elements.
    pub fn reshape(&self, dims: &[usize]) -> Result<Tensor> {
        let len = checked_len(dims)?;
        if len != self.data.len() {
            return Err(Error::Shape(format!(
                "cannot reshape {:?} into {dims:?}",
                self.dims
            )));
        }
        Ok(Self {
            dims: dims.to_vec(),
            data: self.data.clone(),
        })
    }

    /// Interprets the tensor as `[C, H, W]` and returns `(C, H, W)`.
    pub fn chw(&self) -> Result<(usize, usize, usize)> {
        match self.dims[..] {
            [c, h, w] => Ok((c, h, w)),
            _ => Err(Error::Shape(format!(
                "expected a [C, H, W] tensor, got {:?}",
                self.dims
            ))),
        }
    }

    /// Borrows channel `c` of a `[C, H, W]` tensor as a flat `H*W` slice.
    pub fn plane(&self, c: usize) -> Result<&[f32]> {
        let (channels, h, w) = self.chw()?;
        if c >= channels {
            return Err(Error::OutOfRange(format!("channel {c} of {channels}")));
        }
        Ok(&self.data[c * h * w..(c + 1) * h * w])
    }

    /// Stacks `[C_i, H, W]` tensors along the channel axis.
    pub fn concat_channels(parts: &[&Tensor]) -> Result<Tensor> {
        let first = parts
            .first()
            .ok_or_else(|| Error::InvalidArgument("nothing to concatenate".into()))?;
        let (_, h, w) = first.chw()?;
        let mut channels = 0;
        let mut data = Vec::new();
        for t in parts {
            let (c, th, tw) = t.chw()?;
            if (th, tw) != (h, w) {
                return Err(Error::mismatch(&[c, h, w], t.dims()));
            }
            channels += c;
            data.extend_from_slice(t.data());
        }
        Ok(Tensor::from_parts(vec![channels, h, w], data))
    }

    pub fn max_value(&self) -> f32 {
        self.data.iter().copied().fold(f32::NEG_INFINITY, f32::max)
    }

    pub fn min_value(&self) -> f32 {
        self.data.iter().copied().fold(f32::INFINITY, f32::min)
    }

    /// Elementwise map; the closure must keep values finite.
    pub fn map(&self, f: impl Fn(f32) -> f32) -> Result<Tensor> {
        Tensor::new(self.dims.clone(), self.data.iter().map(|&v| f(v)).collect())
    }

    pub(crate) fn ensure_dims(&self, expected: &[usize]) -> Result<()> {
        if self.dims != expected {
            return Err(Error::mismatch(expected, &self.dims));
        }
        Ok(())
    }

    /// Bitwise equality, distinguishing `0.0` from `-0.0`.
    pub fn bit_eq(&self, other: &Tensor) -> bool {
        self.dims == other.dims
            && self
                .data
                .iter()
                .zip(&other.data)
                .all(|(a, b)| a.to_bits() == b.to_bits())
    }
}
