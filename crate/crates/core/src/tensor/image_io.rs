use std::path::Path;

use image::{DynamicImage, GrayImage, ImageReader};

use super::Tensor;
use crate::error::{Error, Result};

/// Aligned RGB planes and a thermal plane, both scaled into `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct MultispectralPair {
    rgb: Tensor,
    thermal: Tensor,
}

impl MultispectralPair {
    /// `rgb` must be `[3, H, W]` and `thermal` `[1, H, W]`, all values in `[0, 1]`.
    pub fn new(rgb: Tensor, thermal: Tensor) -> Result<Self> {
        let (c, h, w) = rgb.chw()?;
        if c != 3 {
            return Err(Error::Shape(format!("rgb must have 3 channels, got {c}")));
        }
        thermal.ensure_dims(&[1, h, w])?;
        for (name, t) in [("rgb", &rgb), ("thermal", &thermal)] {
            if let Some(i) = t.data().iter().position(|v| !(0.0..=1.0).contains(v)) {
                return Err(Error::OutOfRange(format!(
                    "{name} value {} at index {i} outside [0, 1]",
                    t.data()[i]
                )));
            }
        }
        Ok(Self { rgb, thermal })
    }

    pub fn rgb(&self) -> &Tensor {
        &self.rgb
    }

    pub fn thermal(&self) -> &Tensor {
        &self.thermal
    }

    pub fn height(&self) -> usize {
        self.rgb.dims()[1]
    }

    pub fn width(&self) -> usize {
        self.rgb.dims()[2]
    }
}

/// Per-channel mean and standard deviation in 0–255 pixel units.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct NormalizationSpec {
    pub mean_rgb: [f32; 3],
    pub std_rgb: [f32; 3],
    pub mean_t: f32,
    pub std_t: f32,
}

impl NormalizationSpec {
    /// Statistics measured on M3FD.
    pub const M3FD: NormalizationSpec = NormalizationSpec {
        mean_rgb: [128.2, 129.3, 125.3],
        std_rgb: [49.1, 50.2, 53.5],
        mean_t: 84.1,
        std_t: 50.6,
    };

    /// Statistics measured on FLIR.
    pub const FLIR: NormalizationSpec = NormalizationSpec {
        mean_rgb: [149.4, 148.7, 141.7],
        std_rgb: [49.3, 52.8, 59.0],
        mean_t: 135.7,
        std_t: 63.6,
    };

    pub const IDENTITY: NormalizationSpec = NormalizationSpec {
        mean_rgb: [0.0; 3],
        std_rgb: [1.0; 3],
        mean_t: 0.0,
        std_t: 1.0,
    };

    fn validate(&self) -> Result<()> {
        let all = self.std_rgb.iter().chain(std::iter::once(&self.std_t));
        for &s in all {
            if !(s > 0.0 && s.is_finite()) {
                return Err(Error::InvalidArgument(format!(
                    "standard deviation must be positive, got {s}"
                )));
            }
        }
        let means = self.mean_rgb.iter().chain(std::iter::once(&self.mean_t));
        if means.into_iter().any(|m| !m.is_finite()) {
            return Err(Error::InvalidArgument("mean must be finite".into()));
        }
        Ok(())
    }
}

/// Detector-style standardization: `(255 * x - mean) / std` per channel.
pub fn standardize(pair: &MultispectralPair, spec: &NormalizationSpec) -> Result<(Tensor, Tensor)> {
    spec.validate()?;
    let plane = pair.height() * pair.width();
    let rgb = pair
        .rgb()
        .data()
        .chunks_exact(plane)
        .enumerate()
        .flat_map(|(c, ch)| {
            let (m, s) = (spec.mean_rgb[c], spec.std_rgb[c]);
            ch.iter().map(move |&v| (255.0 * v - m) / s)
        })
        .collect();
    let thermal = pair
        .thermal()
        .data()
        .iter()
        .map(|&v| (255.0 * v - spec.mean_t) / spec.std_t)
        .collect();
    let dims = pair.rgb().dims().to_vec();
    let tdims = pair.thermal().dims().to_vec();
    Ok((Tensor::new(dims, rgb)?, Tensor::new(tdims, thermal)?))
}

fn decode(path: &Path) -> Result<DynamicImage> {
    let decode_err = |message: String| Error::Decode {
        path: path.to_path_buf(),
        message,
    };
    let reader = ImageReader::open(path).map_err(|e| Error::io(path, e))?;
    let reader = reader
        .with_guessed_format()
        .map_err(|e| Error::io(path, e))?;
    match reader.format() {
        Some(image::ImageFormat::Png) => {}
        other => return Err(decode_err(format!("expected PNG, found {other:?}"))),
    }
    reader.decode().map_err(|e| decode_err(e.to_string()))
}

fn to_planes(img: &DynamicImage, path: &Path) -> Result<(usize, usize, Vec<Vec<u8>>)> {
    let (w, h) = (img.width() as usize, img.height() as usize);
    let planes = match img {
        DynamicImage::ImageLuma8(g) => vec![g.as_raw().clone()],
        DynamicImage::ImageRgb8(rgb) => (0..3)
            .map(|c| rgb.pixels().map(|p| p.0[c]).collect())
            .collect(),
        other => {
            return Err(Error::Decode {
                path: path.to_path_buf(),
                message: format!(
                    "unsupported color type {:?}; expected 8-bit gray or RGB",
                    other.color()
                ),
            })
        }
    };
    Ok((h, w, planes))
}

/// Decodes an aligned RGB/thermal PNG pair into `[0, 1]` tensors.
///
/// A gray RGB file is replicated into three channels. A 3-channel thermal
/// file is collapsed by the channel mean.
pub fn load_image_pair(
    rgb_path: impl AsRef<Path>,
    thermal_path: impl AsRef<Path>,
) -> Result<MultispectralPair> {
    let (rgb_path, thermal_path) = (rgb_path.as_ref(), thermal_path.as_ref());
    let (h, w, rgb_planes) = to_planes(&decode(rgb_path)?, rgb_path)?;
    let (th, tw, t_planes) = to_planes(&decode(thermal_path)?, thermal_path)?;
    if (h, w) != (th, tw) {
        return Err(Error::mismatch(&[1, h, w], &[1, th, tw]));
    }

    let mut rgb = Vec::with_capacity(3 * h * w);
    for c in 0..3 {
        let src = &rgb_planes[c.min(rgb_planes.len() - 1)];
        rgb.extend(src.iter().map(|&v| v as f32 / 255.0));
    }
    let thermal: Vec<f32> = if t_planes.len() == 1 {
        t_planes[0].iter().map(|&v| v as f32 / 255.0).collect()
    } else {
        (0..h * w)
            .map(|i| {
                let sum: u32 = t_planes.iter().map(|p| p[i] as u32).sum();
                (sum as f32 / t_planes.len() as f32) / 255.0
            })
            .collect()
    };
    MultispectralPair::new(
        Tensor::new(vec![3, h, w], rgb)?,
        Tensor::new(vec![1, h, w], thermal)?,
    )
}

/// Writes a single-plane mask as an 8-bit gray PNG using `round(255 * v)`.
///
/// Values are clamped into `[0, 1]` first; the export is lossy.
pub fn write_mask_png(mask: &Tensor, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let (c, h, w) = mask.chw()?;
    if c != 1 {
        return Err(Error::Shape(format!("mask must have 1 channel, got {c}")));
    }
    let bytes = mask
        .data()
        .iter()
        .map(|&v| (255.0 * v.clamp(0.0, 1.0)).round() as u8)
        .collect();
    let img = GrayImage::from_raw(w as u32, h as u32, bytes)
        .ok_or_else(|| Error::Shape("mask buffer size".into()))?;
    img.save_with_format(path, image::ImageFormat::Png)
        .map_err(|e| Error::Decode {
            path: path.to_path_buf(),
            message: e.to_string(),
        })
}
