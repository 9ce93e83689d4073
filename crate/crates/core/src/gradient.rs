//! Gradient-magnitude images and the boosted union reference.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::tensor::{MultispectralPair, Tensor};

const LUMA_WEIGHTS: [f32; 3] = [0.299, 0.587, 0.114];

/// Fallback dynamic range when both gradient maps are identically zero.
pub const FLAT_DYNAMIC_RANGE: f32 = 1.0;

/// Per-modality gradients plus the union reference before and after boosting.
#[derive(Clone, Debug)]
pub struct GradientField {
    pub grad_rgb: Tensor,
    pub grad_t: Tensor,
    pub ref_raw: Tensor,
    pub ref_boosted: Tensor,
    /// Largest gradient magnitude across both modalities.
    pub dynamic_range: f32,
}

impl GradientField {
    pub fn compute(pair: &MultispectralPair) -> Result<Self> {
        let gray = luma(pair.rgb())?;
        Self::from_planes(&gray, pair.thermal())
    }

    /// Builds the field from two single-channel intensity images.
    pub fn from_planes(rgb_gray: &Tensor, thermal: &Tensor) -> Result<Self> {
        let grad_rgb = gradient_magnitude(rgb_gray)?;
        let grad_t = gradient_magnitude(thermal)?;
        let ref_raw = union_reference(&grad_rgb, &grad_t)?;
        let ref_boosted = boost(&ref_raw)?;
        Ok(Self {
            dynamic_range: dynamic_range(&grad_rgb, &grad_t),
            grad_rgb,
            grad_t,
            ref_raw,
            ref_boosted,
        })
    }

    pub fn height(&self) -> usize {
        self.grad_rgb.dims()[1]
    }

    pub fn width(&self) -> usize {
        self.grad_rgb.dims()[2]
    }
}

pub fn dynamic_range(grad_rgb: &Tensor, grad_t: &Tensor) -> f32 {
    let l = grad_rgb.max_value().max(grad_t.max_value());
    if l > 0.0 {
        l
    } else {
        FLAT_DYNAMIC_RANGE
    }
}

fn single_plane(t: &Tensor) -> Result<(usize, usize)> {
    match t.chw()? {
        (1, h, w) => Ok((h, w)),
        (c, _, _) => Err(Error::Shape(format!("expected 1 channel, got {c}"))),
    }
}

/// ITU-R BT.601 luma of a `[3, H, W]` image.
pub fn luma(rgb: &Tensor) -> Result<Tensor> {
    let (c, h, w) = rgb.chw()?;
    if c != 3 {
        return Err(Error::Shape(format!("luma needs 3 channels, got {c}")));
    }
    let n = h * w;
    let d = rgb.data();
    let out = (0..n)
        .map(|i| {
            LUMA_WEIGHTS[0] * d[i] + LUMA_WEIGHTS[1] * d[n + i] + LUMA_WEIGHTS[2] * d[2 * n + i]
        })
        .collect();
    Ok(Tensor::from_parts(vec![1, h, w], out))
}

/// Sobel gradient magnitude with replicate padding.
pub fn gradient_magnitude(img: &Tensor) -> Result<Tensor> {
    let (h, w) = single_plane(img)?;
    if h < 3 || w < 3 {
        return Err(Error::Shape(format!(
            "gradient needs at least 3x3 pixels, got {h}x{w}"
        )));
    }
    let src = img.data();
    let mut out = vec![0.0f32; h * w];
    out.par_chunks_mut(w).enumerate().for_each(|(y, row)| {
        let up = &src[y.saturating_sub(1) * w..][..w];
        let mid = &src[y * w..][..w];
        let down = &src[(y + 1).min(h - 1) * w..][..w];
        for x in 0..w {
            let l = x.saturating_sub(1);
            let r = (x + 1).min(w - 1);
            let gx = (up[r] - up[l]) + 2.0 * (mid[r] - mid[l]) + (down[r] - down[l]);
            let gy = (down[l] - up[l]) + 2.0 * (down[x] - up[x]) + (down[r] - up[r]);
            row[x] = (gx * gx + gy * gy).sqrt();
        }
    });
    Ok(Tensor::from_parts(vec![1, h, w], out))
}

/// Pointwise maximum of the two modality gradients.
pub fn union_reference(grad_rgb: &Tensor, grad_t: &Tensor) -> Result<Tensor> {
    grad_t.ensure_dims(grad_rgb.dims())?;
    let out = grad_rgb
        .data()
        .iter()
        .zip(grad_t.data())
        .map(|(&a, &b)| a.max(b))
        .collect();
    Ok(Tensor::from_parts(grad_rgb.dims().to_vec(), out))
}

/// 3x3 stride-1 max pooling with replicate border.
pub fn boost(ref_raw: &Tensor) -> Result<Tensor> {
    let (h, w) = single_plane(ref_raw)?;
    let src = ref_raw.data();
    // Separable: horizontal 3-max, then vertical 3-max.
    let mut horiz = vec![0.0f32; h * w];
    horiz
        .par_chunks_mut(w)
        .zip(src.par_chunks(w))
        .for_each(|(dst, row)| {
            for x in 0..w {
                let l = x.saturating_sub(1);
                let r = (x + 1).min(w - 1);
                dst[x] = row[l].max(row[x]).max(row[r]);
            }
        });
    let mut out = vec![0.0f32; h * w];
    out.par_chunks_mut(w).enumerate().for_each(|(y, dst)| {
        let up = &horiz[y.saturating_sub(1) * w..][..w];
        let mid = &horiz[y * w..][..w];
        let down = &horiz[(y + 1).min(h - 1) * w..][..w];
        for x in 0..w {
            dst[x] = up[x].max(mid[x]).max(down[x]);
        }
    });
    Ok(Tensor::from_parts(vec![1, h, w], out))
}
