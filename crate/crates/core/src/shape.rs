//! Shape-priority self-gating masks.
//!
//! Each modality's gradient image is compared against the boosted union
//! reference with windowed SSIM-style statistics. The two raw similarity
//! maps are turned into a per-pixel two-way softmax which then gates the
//! input intensities before any detector convolution.

use std::time::{Duration, Instant};

use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::gradient::GradientField;
use crate::tensor::{MultispectralPair, Tensor};

pub const DEFAULT_K1: f32 = 0.01;
pub const DEFAULT_K2: f32 = 0.03;
pub const DEFAULT_WINDOW: usize = 7;

/// Slack allowed on Cauchy-Schwarz and raw-mask range checks.
pub const STATS_EPS: f32 = 1e-5;

// Rows per work unit in the windowed statistics. Fixed so that results do not
// depend on the size of the thread pool.
const BAND_ROWS: usize = 32;

/// Constants of the similarity measure. `dynamic_range` comes from the
/// gradient field of the pair being processed.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SsimParams {
    pub k1: f32,
    pub k2: f32,
    pub window: usize,
    pub dynamic_range: f32,
}

impl SsimParams {
    pub fn new(k1: f32, k2: f32, window: usize, dynamic_range: f32) -> Result<Self> {
        let p = Self {
            k1,
            k2,
            window,
            dynamic_range,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.k1 > 0.0 && self.k1.is_finite() && self.k2 > 0.0 && self.k2.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "k1 and k2 must be positive, got {} and {}",
                self.k1, self.k2
            )));
        }
        if self.window < 3 || self.window.is_multiple_of(2) {
            return Err(Error::InvalidArgument(format!(
                "window must be odd and >= 3, got {}",
                self.window
            )));
        }
        if !(self.dynamic_range > 0.0 && self.dynamic_range.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "dynamic range must be positive, got {}",
                self.dynamic_range
            )));
        }
        Ok(())
    }

    pub fn xi1(&self) -> f64 {
        (self.k1 as f64 * self.dynamic_range as f64).powi(2)
    }

    pub fn xi2(&self) -> f64 {
        (self.k2 as f64 * self.dynamic_range as f64).powi(2)
    }
}

/// The tunable part of [`SsimParams`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ShapeConfig {
    pub k1: f32,
    pub k2: f32,
    pub window: usize,
}

impl Default for ShapeConfig {
    fn default() -> Self {
        Self {
            k1: DEFAULT_K1,
            k2: DEFAULT_K2,
            window: DEFAULT_WINDOW,
        }
    }
}

impl ShapeConfig {
    pub fn params_for(&self, field: &GradientField) -> Result<SsimParams> {
        SsimParams::new(self.k1, self.k2, self.window, field.dynamic_range)
    }
}

/// Windowed means, standard deviations and covariances against the reference.
#[derive(Clone, Debug)]
pub struct WindowStats {
    pub mu_rgb: Tensor,
    pub mu_t: Tensor,
    pub mu_ref: Tensor,
    pub sigma_rgb: Tensor,
    pub sigma_t: Tensor,
    pub sigma_ref: Tensor,
    pub cov_rgb_ref: Tensor,
    pub cov_t_ref: Tensor,
}

#[derive(Clone, Debug)]
pub struct GatingMasks {
    pub m_raw_rgb: Tensor,
    pub m_raw_t: Tensor,
    pub m_rgb: Tensor,
    pub m_t: Tensor,
}

// Order of the eight running sums.
const S_RGB: usize = 0;
const S_T: usize = 1;
const S_REF: usize = 2;
const S_RGB2: usize = 3;
const S_T2: usize = 4;
const S_REF2: usize = 5;
const S_RGB_REF: usize = 6;
const S_T_REF: usize = 7;
const N_SUMS: usize = 8;

#[inline]
fn products(a: f32, b: f32, r: f32) -> [f64; N_SUMS] {
    let (a, b, r) = (a as f64, b as f64, r as f64);
    [a, b, r, a * a, b * b, r * r, a * r, b * r]
}

/// Per-pixel uniform-window statistics with replicate border.
pub fn window_stats(field: &GradientField, params: &SsimParams) -> Result<WindowStats> {
    params.validate()?;
    let (h, w) = (field.height(), field.width());
    for t in [&field.grad_t, &field.ref_boosted] {
        t.ensure_dims(&[1, h, w])?;
    }
    if params.window > h.min(w) {
        return Err(Error::InvalidArgument(format!(
            "window {} larger than image {h}x{w}",
            params.window
        )));
    }
    let radius = params.window / 2;
    let area = (params.window * params.window) as f64;
    let (src_rgb, src_t, src_ref) = (
        field.grad_rgb.data(),
        field.grad_t.data(),
        field.ref_boosted.data(),
    );

    let mut out: [Vec<f32>; N_SUMS] = std::array::from_fn(|_| vec![0.0f32; h * w]);
    {
        // Split each output plane into fixed bands and hand the matching
        // bands of all eight planes to one task.
        let mut bands: Vec<Vec<&mut [f32]>> = Vec::new();
        let mut iters: Vec<_> = out
            .iter_mut()
            .map(|p| p.chunks_mut(BAND_ROWS * w))
            .collect();
        loop {
            let band: Vec<&mut [f32]> = iters.iter_mut().filter_map(|it| it.next()).collect();
            if band.is_empty() {
                break;
            }
            bands.push(band);
        }

        bands
            .into_par_iter()
            .enumerate()
            .for_each(|(bi, mut band)| {
                let y0 = bi * BAND_ROWS;
                let rows = band[0].len() / w;
                let win = 2 * radius + 1;
                // Horizontal window sums of the last `win` source rows, as a ring.
                let mut ring = vec![[0.0f64; N_SUMS]; win * w];
                let mut fresh = vec![[0.0f64; N_SUMS]; w];
                let mut padded = vec![[0.0f64; N_SUMS]; w + 2 * radius];
                let mut horizontal = |k: usize, dst: &mut [[f64; N_SUMS]]| {
                    let off = (y0 + k).saturating_sub(radius).min(h - 1) * w;
                    for (i, p) in padded.iter_mut().enumerate() {
                        let x = off + i.saturating_sub(radius).min(w - 1);
                        *p = products(src_rgb[x], src_t[x], src_ref[x]);
                    }
                    let mut acc = [0.0f64; N_SUMS];
                    for p in &padded[..win] {
                        acc.iter_mut().zip(p).for_each(|(a, v)| *a += v);
                    }
                    dst[0] = acc;
                    for (x, slot) in dst.iter_mut().enumerate().skip(1) {
                        let (add, sub) = (&padded[x + 2 * radius], &padded[x - 1]);
                        for q in 0..N_SUMS {
                            acc[q] += add[q] - sub[q];
                        }
                        *slot = acc;
                    }
                };
                let mut acc = vec![[0.0f64; N_SUMS]; w];
                for k in 0..win {
                    let slot = &mut ring[k * w..(k + 1) * w];
                    horizontal(k, slot);
                    for (a, s) in acc.iter_mut().zip(slot.iter()) {
                        for q in 0..N_SUMS {
                            a[q] += s[q];
                        }
                    }
                }
                for row in 0..rows {
                    if row > 0 {
                        // The slot of source row `row - 1` receives row `row + 2r`.
                        let k = row + 2 * radius;
                        horizontal(k, &mut fresh);
                        let slot = &mut ring[(k % win) * w..(k % win + 1) * w];
                        for ((a, old), new) in acc.iter_mut().zip(slot.iter_mut()).zip(&fresh) {
                            for q in 0..N_SUMS {
                                a[q] += new[q] - old[q];
                            }
                            *old = *new;
                        }
                    }
                    for x in 0..w {
                        let m = acc[x].map(|s| s / area);
                        let stats = moments_to_stats(&m);
                        for q in 0..N_SUMS {
                            band[q][row * w + x] = stats[q];
                        }
                    }
                }
            });
    }

    let dims = vec![1, h, w];
    let [mu_rgb, mu_t, mu_ref, sigma_rgb, sigma_t, sigma_ref, cov_rgb_ref, cov_t_ref] =
        out.map(|d| Tensor::from_parts(dims.clone(), d));
    Ok(WindowStats {
        mu_rgb,
        mu_t,
        mu_ref,
        sigma_rgb,
        sigma_t,
        sigma_ref,
        cov_rgb_ref,
        cov_t_ref,
    })
}

/// Maps raw window means `E[.]` to `(mu_rgb, mu_t, mu_ref, sigma_rgb,
/// sigma_t, sigma_ref, cov_rgb_ref, cov_t_ref)`.
#[inline]
fn moments_to_stats(m: &[f64; N_SUMS]) -> [f32; N_SUMS] {
    let var = |sq: f64, mean: f64| (sq - mean * mean).max(0.0);
    [
        m[S_RGB] as f32,
        m[S_T] as f32,
        m[S_REF] as f32,
        var(m[S_RGB2], m[S_RGB]).sqrt() as f32,
        var(m[S_T2], m[S_T]).sqrt() as f32,
        var(m[S_REF2], m[S_REF]).sqrt() as f32,
        (m[S_RGB_REF] - m[S_RGB] * m[S_REF]) as f32,
        (m[S_T_REF] - m[S_T] * m[S_REF]) as f32,
    ]
}

/// SSIM-style similarity of one modality to the reference at one pixel.
#[inline]
pub fn similarity(
    mu: f64,
    mu_ref: f64,
    sigma: f64,
    sigma_ref: f64,
    cov: f64,
    xi1: f64,
    xi2: f64,
) -> f64 {
    let num = (2.0 * mu * mu_ref + xi1) * (2.0 * cov + xi2);
    let den = (mu * mu + mu_ref * mu_ref + xi1) * (sigma * sigma + sigma_ref * sigma_ref + xi2);
    num / den
}

/// Raw similarity maps `(m_raw_rgb, m_raw_t)`, each nominally in `[-1, 1]`.
pub fn raw_masks(stats: &WindowStats, params: &SsimParams) -> Result<(Tensor, Tensor)> {
    params.validate()?;
    let dims = stats.mu_ref.dims().to_vec();
    for t in [
        &stats.mu_rgb,
        &stats.mu_t,
        &stats.sigma_rgb,
        &stats.sigma_t,
        &stats.sigma_ref,
        &stats.cov_rgb_ref,
        &stats.cov_t_ref,
    ] {
        t.ensure_dims(&dims)?;
    }
    let (xi1, xi2) = (params.xi1(), params.xi2());
    let one = |mu: &Tensor, sigma: &Tensor, cov: &Tensor| -> Vec<f32> {
        (0..mu.len())
            .into_par_iter()
            .with_min_len(4096)
            .map(|i| {
                similarity(
                    mu.data()[i] as f64,
                    stats.mu_ref.data()[i] as f64,
                    sigma.data()[i] as f64,
                    stats.sigma_ref.data()[i] as f64,
                    cov.data()[i] as f64,
                    xi1,
                    xi2,
                ) as f32
            })
            .collect()
    };
    let rgb = one(&stats.mu_rgb, &stats.sigma_rgb, &stats.cov_rgb_ref);
    let t = one(&stats.mu_t, &stats.sigma_t, &stats.cov_t_ref);
    Ok((Tensor::new(dims.clone(), rgb)?, Tensor::new(dims, t)?))
}

/// Two-way softmax of the raw masks at every pixel.
pub fn normalize_masks(m_raw_rgb: Tensor, m_raw_t: Tensor) -> Result<GatingMasks> {
    m_raw_t.ensure_dims(m_raw_rgb.dims())?;
    let (rgb, t): (Vec<f32>, Vec<f32>) = m_raw_rgb
        .data()
        .iter()
        .zip(m_raw_t.data())
        .map(|(&a, &b)| {
            // exp(a) / (exp(a) + exp(b)) with a single exponential.
            let (a, b) = (a as f64, b as f64);
            let z = (-(a - b).abs()).exp();
            let (hi, lo) = (1.0 / (1.0 + z), z / (1.0 + z));
            if a >= b {
                (hi as f32, lo as f32)
            } else {
                (lo as f32, hi as f32)
            }
        })
        .unzip();
    let dims = m_raw_rgb.dims().to_vec();
    Ok(GatingMasks {
        m_rgb: Tensor::from_parts(dims.clone(), rgb),
        m_t: Tensor::from_parts(dims, t),
        m_raw_rgb,
        m_raw_t,
    })
}

/// Multiplies every RGB channel by `m_rgb` and the thermal plane by `m_t`.
pub fn apply_gating(pair: &MultispectralPair, masks: &GatingMasks) -> Result<(Tensor, Tensor)> {
    let (h, w) = (pair.height(), pair.width());
    masks.m_rgb.ensure_dims(&[1, h, w])?;
    masks.m_t.ensure_dims(&[1, h, w])?;
    let m_rgb = masks.m_rgb.data();
    let rgb = pair
        .rgb()
        .data()
        .chunks_exact(h * w)
        .flat_map(|ch| ch.iter().zip(m_rgb).map(|(&v, &m)| v * m))
        .collect();
    let t = pair
        .thermal()
        .data()
        .iter()
        .zip(masks.m_t.data())
        .map(|(&v, &m)| v * m)
        .collect();
    Ok((
        Tensor::from_parts(vec![3, h, w], rgb),
        Tensor::from_parts(vec![1, h, w], t),
    ))
}

/// Stride-1, same-size cross-correlation with replicate padding.
///
/// `weights` is `[C_out, C_in, k, k]` with odd `k`; `bias` is `[C_out]`.
pub fn fused_feature(gated: &Tensor, weights: &Tensor, bias: Option<&Tensor>) -> Result<Tensor> {
    let (c_in, h, w) = gated.chw()?;
    let (c_out, wc, kh, kw) = match weights.dims() {
        &[a, b, c, d] => (a, b, c, d),
        other => {
            return Err(Error::Shape(format!(
                "weights must be [C_out, C_in, k, k], got {other:?}"
            )))
        }
    };
    if wc != c_in {
        return Err(Error::mismatch(&[c_out, c_in, kh, kw], weights.dims()));
    }
    if kh != kw || kh % 2 == 0 {
        return Err(Error::InvalidArgument(format!(
            "kernel must be square with odd side, got {kh}x{kw}"
        )));
    }
    if let Some(b) = bias {
        b.ensure_dims(&[c_out])?;
    }
    let r = (kh / 2) as isize;
    let src = gated.data();
    let wt = weights.data();
    let mut out = vec![0.0f32; c_out * h * w];
    out.par_chunks_mut(h * w)
        .enumerate()
        .for_each(|(o, plane)| {
            let b0 = bias.map_or(0.0, |b| b.data()[o] as f64);
            for y in 0..h {
                for x in 0..w {
                    let mut acc = b0;
                    for c in 0..c_in {
                        for ky in 0..kh {
                            let sy =
                                (y as isize + ky as isize - r).clamp(0, h as isize - 1) as usize;
                            for kx in 0..kw {
                                let sx = (x as isize + kx as isize - r).clamp(0, w as isize - 1)
                                    as usize;
                                acc += wt[((o * c_in + c) * kh + ky) * kw + kx] as f64
                                    * src[(c * h + sy) * w + sx] as f64;
                            }
                        }
                    }
                    plane[y * w + x] = acc as f32;
                }
            }
        });
    Tensor::new(vec![c_out, h, w], out)
}

/// Softmax-weighted channel aggregation: `sum(softmax(F, dim=0) * F, dim=0)`.
pub fn aggregate_channels(f: &Tensor) -> Result<Tensor> {
    let (d, h, w) = f.chw()?;
    let n = h * w;
    let src = f.data();
    let out = (0..n)
        .map(|p| {
            let vals = (0..d).map(|c| src[c * n + p] as f64);
            let m = vals.clone().fold(f64::NEG_INFINITY, f64::max);
            let (mut num, mut den) = (0.0f64, 0.0f64);
            for v in vals {
                let e = (v - m).exp();
                num += e * v;
                den += e;
            }
            (num / den) as f32
        })
        .collect();
    Tensor::new(vec![1, h, w], out)
}

/// Wall time spent in each stage of one fusion pass.
#[derive(Clone, Copy, Debug, Default, Serialize)]
pub struct StageTimings {
    #[serde(serialize_with = "ser_ms")]
    pub gradients: Duration,
    #[serde(serialize_with = "ser_ms")]
    pub window_stats: Duration,
    #[serde(serialize_with = "ser_ms")]
    pub masks: Duration,
    #[serde(serialize_with = "ser_ms")]
    pub gating: Duration,
}

fn ser_ms<S: serde::Serializer>(d: &Duration, s: S) -> std::result::Result<S::Ok, S::Error> {
    s.serialize_f64(d.as_secs_f64() * 1e3)
}

impl StageTimings {
    pub fn total(&self) -> Duration {
        self.gradients + self.window_stats + self.masks + self.gating
    }
}

/// Everything produced by one pass over a pair.
#[derive(Clone, Debug)]
pub struct FusionOutput {
    pub field: GradientField,
    pub params: SsimParams,
    pub stats: WindowStats,
    pub masks: GatingMasks,
    pub gated_rgb: Tensor,
    pub gated_t: Tensor,
    pub timings: StageTimings,
}

impl FusionOutput {
    /// Gated RGB and thermal stacked into a `[4, H, W]` early-fusion input.
    pub fn concatenated(&self) -> Result<Tensor> {
        Tensor::concat_channels(&[&self.gated_rgb, &self.gated_t])
    }
}

/// Runs gradients, window statistics, masks and gating on one pair.
pub fn fuse(pair: &MultispectralPair, config: &ShapeConfig) -> Result<FusionOutput> {
    let mut timings = StageTimings::default();

    let t0 = Instant::now();
    let field = GradientField::compute(pair)?;
    timings.gradients = t0.elapsed();

    let t0 = Instant::now();
    let params = config.params_for(&field)?;
    let stats = window_stats(&field, &params)?;
    timings.window_stats = t0.elapsed();

    let t0 = Instant::now();
    let (raw_rgb, raw_t) = raw_masks(&stats, &params)?;
    let masks = normalize_masks(raw_rgb, raw_t)?;
    timings.masks = t0.elapsed();

    let t0 = Instant::now();
    let (gated_rgb, gated_t) = apply_gating(pair, &masks)?;
    timings.gating = t0.elapsed();

    Ok(FusionOutput {
        field,
        params,
        stats,
        masks,
        gated_rgb,
        gated_t,
        timings,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradient::boost;
    use proptest::prelude::*;

    fn plane(h: usize, w: usize, f: impl Fn(usize, usize) -> f32) -> Tensor {
        Tensor::from_fn(&[1, h, w], |i| f(i / w, i % w)).unwrap()
    }

    fn lcg(seed: u64) -> impl FnMut() -> f32 {
        let mut s = seed | 1;
        move || {
            s = s
                .wrapping_mul(6364136223846793005)
                .wrapping_add(1442695040888963407);
            (s >> 40) as f32 / (1u64 << 24) as f32
        }
    }

    fn field_from(grad_rgb: Tensor, grad_t: Tensor, reference: Tensor) -> GradientField {
        GradientField {
            dynamic_range: crate::gradient::dynamic_range(&grad_rgb, &grad_t),
            ref_raw: reference.clone(),
            ref_boosted: reference,
            grad_rgb,
            grad_t,
        }
    }

    /// Brute-force window statistics in f64, one pixel at a time.
    fn naive_stats(a: &Tensor, b: &Tensor, window: usize) -> Vec<[f64; 5]> {
        let (_, h, w) = a.chw().unwrap();
        let r = (window / 2) as isize;
        let mut out = Vec::new();
        for y in 0..h as isize {
            for x in 0..w as isize {
                let (mut sa, mut sb, mut saa, mut sbb, mut sab) = (0.0, 0.0, 0.0, 0.0, 0.0);
                for dy in -r..=r {
                    for dx in -r..=r {
                        let yy = (y + dy).clamp(0, h as isize - 1) as usize;
                        let xx = (x + dx).clamp(0, w as isize - 1) as usize;
                        let va = a.data()[yy * w + xx] as f64;
                        let vb = b.data()[yy * w + xx] as f64;
                        sa += va;
                        sb += vb;
                        saa += va * va;
                        sbb += vb * vb;
                        sab += va * vb;
                    }
                }
                let n = (window * window) as f64;
                let (ma, mb) = (sa / n, sb / n);
                out.push([
                    ma,
                    mb,
                    (saa / n - ma * ma).max(0.0).sqrt(),
                    (sbb / n - mb * mb).max(0.0).sqrt(),
                    sab / n - ma * mb,
                ]);
            }
        }
        out
    }

    #[test]
    fn constant_maps_give_zero_variance() {
        let c = plane(9, 9, |_, _| 0.4);
        let f = field_from(c.clone(), c.clone(), c);
        let p = SsimParams::new(0.01, 0.03, 7, 1.0).unwrap();
        let s = window_stats(&f, &p).unwrap();
        for t in [&s.mu_rgb, &s.mu_t, &s.mu_ref] {
            assert!(t.data().iter().all(|v| (v - 0.4).abs() < 1e-6));
        }
        for t in [
            &s.sigma_rgb,
            &s.sigma_t,
            &s.sigma_ref,
            &s.cov_rgb_ref,
            &s.cov_t_ref,
        ] {
            assert!(t.data().iter().all(|v| v.abs() < 1e-6));
        }
    }

    #[test]
    fn self_covariance_equals_variance() {
        let mut rng = lcg(3);
        let g = Tensor::from_fn(&[1, 10, 10], |_| rng()).unwrap();
        let f = field_from(g.clone(), g.clone(), g);
        let p = SsimParams::new(0.01, 0.03, 5, 1.0).unwrap();
        let s = window_stats(&f, &p).unwrap();
        for i in 0..100 {
            let sig = s.sigma_rgb.data()[i];
            assert!((s.cov_rgb_ref.data()[i] - sig * sig).abs() < 1e-6);
        }
    }

    #[test]
    fn window_stats_match_brute_force() {
        let mut rng = lcg(11);
        let a = Tensor::from_fn(&[1, 12, 12], |_| 3.0 * rng()).unwrap();
        let b = Tensor::from_fn(&[1, 12, 12], |_| 3.0 * rng()).unwrap();
        let reference = boost(&crate::gradient::union_reference(&a, &b).unwrap()).unwrap();
        let f = field_from(a.clone(), b, reference.clone());
        let p = SsimParams::new(0.01, 0.03, 7, f.dynamic_range).unwrap();
        let s = window_stats(&f, &p).unwrap();
        let oracle = naive_stats(&a, &reference, 7);
        for (i, o) in oracle.iter().enumerate() {
            let got = [
                s.mu_rgb.data()[i],
                s.mu_ref.data()[i],
                s.sigma_rgb.data()[i],
                s.sigma_ref.data()[i],
                s.cov_rgb_ref.data()[i],
            ];
            for k in 0..5 {
                assert!((got[k] as f64 - o[k]).abs() < 1e-5, "pixel {i} stat {k}");
            }
        }
    }

    #[test]
    fn stats_span_multiple_bands() {
        // Taller than one band so the band seams are exercised.
        let mut rng = lcg(5);
        let a = Tensor::from_fn(&[1, 75, 9], |_| rng()).unwrap();
        let b = Tensor::from_fn(&[1, 75, 9], |_| rng()).unwrap();
        let f = field_from(a.clone(), b.clone(), b.clone());
        let p = SsimParams::new(0.01, 0.03, 7, 1.0).unwrap();
        let s = window_stats(&f, &p).unwrap();
        let oracle = naive_stats(&a, &b, 7);
        for (i, o) in oracle.iter().enumerate() {
            assert!((s.cov_rgb_ref.data()[i] as f64 - o[4]).abs() < 1e-5);
            assert!((s.sigma_rgb.data()[i] as f64 - o[2]).abs() < 1e-5);
        }
    }

    #[test]
    fn oversized_window_is_rejected() {
        let c = plane(5, 9, |_, _| 0.0);
        let f = field_from(c.clone(), c.clone(), c);
        let p = SsimParams::new(0.01, 0.03, 7, 1.0).unwrap();
        assert!(window_stats(&f, &p).is_err());
    }

    #[test]
    fn params_validation() {
        assert!(SsimParams::new(0.01, 0.03, 6, 1.0).is_err());
        assert!(SsimParams::new(0.01, 0.03, 1, 1.0).is_err());
        assert!(SsimParams::new(0.0, 0.03, 7, 1.0).is_err());
        assert!(SsimParams::new(0.01, 0.03, 7, 0.0).is_err());
        let p = SsimParams::new(0.01, 0.03, 7, 2.0).unwrap();
        assert!((p.xi1() - 4e-4).abs() < 1e-9);
        assert!((p.xi2() - 3.6e-3).abs() < 1e-9);
    }

    #[test]
    fn identical_map_gives_unit_similarity() {
        let mut rng = lcg(8);
        let g = Tensor::from_fn(&[1, 9, 9], |_| rng()).unwrap();
        let f = field_from(g.clone(), g.clone(), g);
        let p = SsimParams::new(0.01, 0.03, 3, f.dynamic_range).unwrap();
        let (rgb, t) = raw_masks(&window_stats(&f, &p).unwrap(), &p).unwrap();
        assert!(rgb.data().iter().all(|v| (v - 1.0).abs() < 1e-5));
        assert!(t.data().iter().all(|v| (v - 1.0).abs() < 1e-5));
    }

    #[test]
    fn flat_zero_gradients_give_unit_similarity() {
        let z = plane(8, 8, |_, _| 0.0);
        let f = field_from(z.clone(), z.clone(), z);
        let p = ShapeConfig::default().params_for(&f).unwrap();
        let (rgb, t) = raw_masks(&window_stats(&f, &p).unwrap(), &p).unwrap();
        assert!(rgb.data().iter().chain(t.data()).all(|&v| v == 1.0));
    }

    #[test]
    fn edge_rgb_beats_flat_thermal_on_edge_band() {
        let (h, w) = (16, 16);
        let gray = plane(h, w, |_, x| if x >= 8 { 1.0 } else { 0.0 });
        let flat = plane(h, w, |_, _| 0.3);
        let f = GradientField::from_planes(&gray, &flat).unwrap();
        let p = ShapeConfig::default().params_for(&f).unwrap();
        let s = window_stats(&f, &p).unwrap();
        let (rgb, t) = raw_masks(&s, &p).unwrap();
        let (xi1, xi2) = (p.xi1(), p.xi2());
        for y in 0..h {
            for x in 6..10 {
                let i = y * w + x;
                assert!(rgb.data()[i] > t.data()[i]);
                // Scalar re-evaluation of the same pixel.
                let o = similarity(
                    s.mu_rgb.data()[i] as f64,
                    s.mu_ref.data()[i] as f64,
                    s.sigma_rgb.data()[i] as f64,
                    s.sigma_ref.data()[i] as f64,
                    s.cov_rgb_ref.data()[i] as f64,
                    xi1,
                    xi2,
                );
                assert!((rgb.data()[i] as f64 - o).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn softmax_cases() {
        let a = Tensor::new(vec![1, 1, 3], vec![0.3, 1.0, -0.2]).unwrap();
        let m = normalize_masks(a.clone(), a.clone()).unwrap();
        assert!(m.m_rgb.data().iter().chain(m.m_t.data()).all(|&v| v == 0.5));

        let m = normalize_masks(
            Tensor::new(vec![1, 1, 1], vec![1.0]).unwrap(),
            Tensor::new(vec![1, 1, 1], vec![-1.0]).unwrap(),
        )
        .unwrap();
        assert!((m.m_rgb.data()[0] as f64 - 0.880_797_077_977_882_4).abs() < 1e-7);

        let b = Tensor::new(vec![1, 1, 3], vec![-0.5, 0.1, 0.9]).unwrap();
        let base = normalize_masks(a.clone(), b.clone()).unwrap();
        let shifted =
            normalize_masks(a.map(|v| v + 0.75).unwrap(), b.map(|v| v + 0.75).unwrap()).unwrap();
        for (x, y) in base.m_rgb.data().iter().zip(shifted.m_rgb.data()) {
            assert!((x - y).abs() < 1e-6);
        }
        assert!(normalize_masks(a, Tensor::zeros(&[1, 1, 2]).unwrap()).is_err());
    }

    fn masks_of(m_rgb: f32, m_t: f32, h: usize, w: usize) -> GatingMasks {
        GatingMasks {
            m_raw_rgb: Tensor::zeros(&[1, h, w]).unwrap(),
            m_raw_t: Tensor::zeros(&[1, h, w]).unwrap(),
            m_rgb: Tensor::full(&[1, h, w], m_rgb).unwrap(),
            m_t: Tensor::full(&[1, h, w], m_t).unwrap(),
        }
    }

    fn random_pair(seed: u64, h: usize, w: usize) -> MultispectralPair {
        let mut rng = lcg(seed);
        MultispectralPair::new(
            Tensor::from_fn(&[3, h, w], |_| rng()).unwrap(),
            Tensor::from_fn(&[1, h, w], |_| rng()).unwrap(),
        )
        .unwrap()
    }

    #[test]
    fn gating_cases() {
        let pair = random_pair(1, 4, 5);
        let (rgb, t) = apply_gating(&pair, &masks_of(0.5, 0.5, 4, 5)).unwrap();
        assert!(rgb
            .data()
            .iter()
            .zip(pair.rgb().data())
            .all(|(g, v)| *g == v * 0.5));
        assert!(t
            .data()
            .iter()
            .zip(pair.thermal().data())
            .all(|(g, v)| *g == v * 0.5));

        let (rgb, t) = apply_gating(&pair, &masks_of(1.0, 0.0, 4, 5)).unwrap();
        assert_eq!(&rgb, pair.rgb());
        assert!(t.data().iter().all(|&v| v == 0.0));

        assert!(apply_gating(&pair, &masks_of(0.5, 0.5, 4, 4)).is_err());
    }

    #[test]
    fn gating_matches_scalar_loop() {
        let pair = random_pair(2, 6, 7);
        let mut rng = lcg(9);
        let m_rgb = Tensor::from_fn(&[1, 6, 7], |_| rng()).unwrap();
        let m_t = m_rgb.map(|v| 1.0 - v).unwrap();
        let masks = GatingMasks {
            m_raw_rgb: m_rgb.clone(),
            m_raw_t: m_t.clone(),
            m_rgb,
            m_t,
        };
        let (rgb, t) = apply_gating(&pair, &masks).unwrap();
        for c in 0..3 {
            for p in 0..42 {
                assert_eq!(
                    rgb.data()[c * 42 + p],
                    pair.rgb().data()[c * 42 + p] * masks.m_rgb.data()[p]
                );
            }
        }
        for p in 0..42 {
            assert_eq!(t.data()[p], pair.thermal().data()[p] * masks.m_t.data()[p]);
        }
    }

    #[test]
    fn fused_feature_selector_and_zero() {
        let pair = random_pair(4, 5, 5);
        let input = Tensor::concat_channels(&[pair.rgb(), pair.thermal()]).unwrap();
        let sel = Tensor::new(vec![1, 4, 1, 1], vec![1.0, 0.0, 0.0, 0.0]).unwrap();
        let out = fused_feature(&input, &sel, None).unwrap();
        assert_eq!(out.data(), pair.rgb().plane(0).unwrap());

        let zero = Tensor::zeros(&[2, 4, 3, 3]).unwrap();
        let out = fused_feature(&input, &zero, None).unwrap();
        assert!(out.data().iter().all(|&v| v == 0.0));

        let bias = Tensor::new(vec![2], vec![0.5, -1.0]).unwrap();
        let out = fused_feature(&input, &zero, Some(&bias)).unwrap();
        assert!(out.plane(1).unwrap().iter().all(|&v| v == -1.0));

        assert!(fused_feature(&input, &Tensor::zeros(&[1, 4, 2, 2]).unwrap(), None).is_err());
        assert!(fused_feature(&input, &Tensor::zeros(&[1, 3, 3, 3]).unwrap(), None).is_err());
    }

    #[test]
    fn fused_feature_matches_direct_convolution() {
        let mut rng = lcg(21);
        let (h, w) = (9, 9);
        let input = Tensor::from_fn(&[4, h, w], |_| rng()).unwrap();
        let weights = Tensor::from_fn(&[3, 4, 3, 3], |_| rng() - 0.5).unwrap();
        let out = fused_feature(&input, &weights, None).unwrap();
        for o in 0..3 {
            for y in 0..h as isize {
                for x in 0..w as isize {
                    let mut acc = 0.0f64;
                    for c in 0..4 {
                        for ky in -1..=1isize {
                            for kx in -1..=1isize {
                                let yy = (y + ky).clamp(0, h as isize - 1) as usize;
                                let xx = (x + kx).clamp(0, w as isize - 1) as usize;
                                let wv = weights.data()
                                    [((o * 4 + c) * 3 + (ky + 1) as usize) * 3 + (kx + 1) as usize];
                                acc += wv as f64 * input.data()[(c * h + yy) * w + xx] as f64;
                            }
                        }
                    }
                    let got = out.data()[(o * h + y as usize) * w + x as usize];
                    assert!((got as f64 - acc).abs() < 1e-5);
                }
            }
        }
    }

    #[test]
    fn aggregate_channels_cases() {
        let one = Tensor::new(vec![1, 1, 2], vec![3.0, -2.0]).unwrap();
        assert_eq!(aggregate_channels(&one).unwrap().data(), one.data());

        let same = Tensor::full(&[4, 2, 2], 0.7).unwrap();
        assert!(aggregate_channels(&same)
            .unwrap()
            .data()
            .iter()
            .all(|v| (v - 0.7).abs() < 1e-6));

        let two = Tensor::new(vec![2, 1, 1], vec![0.0, 10.0]).unwrap();
        let v = aggregate_channels(&two).unwrap().data()[0] as f64;
        assert!((v - 9.999_546_021_312_975).abs() < 1e-5);
    }

    #[test]
    fn fuse_reports_all_products() {
        let pair = random_pair(31, 20, 24);
        let out = fuse(&pair, &ShapeConfig::default()).unwrap();
        assert_eq!(out.concatenated().unwrap().dims(), &[4, 20, 24]);
        assert_eq!(out.masks.m_rgb.dims(), &[1, 20, 24]);
        assert!(out.timings.total() >= out.timings.gradients);
    }

    proptest! {
        #[test]
        fn partition_of_unity_and_raw_range(seed in any::<u64>(), h in 7usize..20, w in 7usize..20) {
            let pair = random_pair(seed, h, w);
            let out = fuse(&pair, &ShapeConfig::default()).unwrap();
            let m = &out.masks;
            for i in 0..h * w {
                prop_assert!((m.m_rgb.data()[i] + m.m_t.data()[i] - 1.0).abs() <= 1e-6);
                for raw in [m.m_raw_rgb.data()[i], m.m_raw_t.data()[i]] {
                    prop_assert!((-1.0 - STATS_EPS..=1.0 + STATS_EPS).contains(&raw));
                }
            }
            let s = &out.stats;
            for i in 0..h * w {
                let bound = s.sigma_rgb.data()[i] * s.sigma_ref.data()[i] + STATS_EPS;
                prop_assert!(s.cov_rgb_ref.data()[i].abs() <= bound);
                let bound = s.sigma_t.data()[i] * s.sigma_ref.data()[i] + STATS_EPS;
                prop_assert!(s.cov_t_ref.data()[i].abs() <= bound);
            }
        }

        #[test]
        fn aggregation_is_convex(vals in prop::collection::vec(-20.0f32..20.0, 12)) {
            let f = Tensor::new(vec![3, 2, 2], vals).unwrap();
            let out = aggregate_channels(&f).unwrap();
            for p in 0..4 {
                let ch: Vec<f32> = (0..3).map(|c| f.data()[c * 4 + p]).collect();
                let lo = ch.iter().copied().fold(f32::INFINITY, f32::min);
                let hi = ch.iter().copied().fold(f32::NEG_INFINITY, f32::max);
                prop_assert!(out.data()[p] >= lo - 1e-5 && out.data()[p] <= hi + 1e-5);
            }
        }
    }
}
