//! Synthetic RGB-thermal pairs for examples, benchmarks and tests.

use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};

use crate::error::Result;
use crate::tensor::{MultispectralPair, Tensor};

/// Uniform noise in `[0, 1]` for every RGB and thermal value.
pub fn random_pair(seed: u64, height: usize, width: usize) -> Result<MultispectralPair> {
    let mut rng = StdRng::seed_from_u64(seed);
    let rgb = Tensor::from_fn(&[3, height, width], |_| rng.gen::<f32>())?;
    let thermal = Tensor::from_fn(&[1, height, width], |_| rng.gen::<f32>())?;
    MultispectralPair::new(rgb, thermal)
}

/// A street-like scene.
///
/// The RGB image holds a dim background, a bright colored sign with sharp
/// borders in the upper left and a textured facade on the right; the
/// thermal image is flat except for a warm, soft-edged figure in the lower
/// middle. Color edges therefore dominate the RGB gradients and the figure
/// dominates the thermal ones.
pub fn street_scene(height: usize, width: usize) -> Result<MultispectralPair> {
    let (hf, wf) = (height as f32, width as f32);
    let sign = |y: usize, x: usize| {
        let (fy, fx) = (y as f32 / hf, x as f32 / wf);
        (0.1..0.35).contains(&fy) && (0.1..0.3).contains(&fx)
    };
    let facade = |y: usize, x: usize| {
        let fx = x as f32 / wf;
        fx > 0.7 && (y / 6 + x / 6).is_multiple_of(2)
    };
    let plane = height * width;
    let rgb = Tensor::from_fn(&[3, height, width], |i| {
        let (c, p) = (i / plane, i % plane);
        let (y, x) = (p / width, p % width);
        if sign(y, x) {
            [0.95, 0.15, 0.1][c]
        } else if facade(y, x) {
            [0.6, 0.6, 0.55][c]
        } else {
            0.25 + 0.05 * c as f32
        }
    })?;
    let (cy, cx) = (0.7 * hf, 0.5 * wf);
    let (ry, rx) = (0.18 * hf, 0.06 * wf);
    let thermal = Tensor::from_fn(&[1, height, width], |p| {
        let (y, x) = ((p / width) as f32, (p % width) as f32);
        let r2 = ((y - cy) / ry).powi(2) + ((x - cx) / rx).powi(2);
        0.3 + 0.6 * (-r2 * r2).exp()
    })?;
    MultispectralPair::new(rgb, thermal)
}

/// Thermal plane equal to the RGB luma, so both gradient maps coincide.
pub fn luma_twin(rgb: &Tensor) -> Result<MultispectralPair> {
    let thermal = crate::gradient::luma(rgb)?.map(|v| v.clamp(0.0, 1.0))?;
    MultispectralPair::new(rgb.clone(), thermal)
}
