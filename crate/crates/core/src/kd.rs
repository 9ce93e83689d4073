//! Core-knowledge feature distillation.
//!
//! The teacher's 1x1 head weights `W [C_out, C_in]` define the space both
//! features are compared in. The student, which only has `d` channels, is
//! projected with the top-`d` entries of each weight row, the teacher with
//! the full rows, and the loss is the squared distance between the two
//! projections. The weights stay frozen; gradients flow to the student only.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numeric::compensated_sum;
use crate::tensor::{read_tensor, Tensor};

/// Weights with `|w|` below this are reported as near zero.
pub const NEAR_ZERO_THRESHOLD: f32 = 0.01;

/// The teacher head's 1x1 convolution weights, `[C_out, C_in]`.
#[derive(Clone, Debug, PartialEq)]
pub struct TeacherHead {
    w_t: Tensor,
}

impl TeacherHead {
    /// Accepts `[C_out, C_in]` or `[C_out, C_in, 1, 1]` weights.
    pub fn new(w_t: Tensor) -> Result<Self> {
        let w_t = match *w_t.dims() {
            [_, _] => w_t,
            [o, i, 1, 1] => w_t.reshape(&[o, i])?,
            _ => {
                return Err(Error::Shape(format!(
                    "head weights must be [C_out, C_in] or [C_out, C_in, 1, 1], got {:?}",
                    w_t.dims()
                )))
            }
        };
        Ok(Self { w_t })
    }

    pub fn weights(&self) -> &Tensor {
        &self.w_t
    }

    pub fn out_channels(&self) -> usize {
        self.w_t.dims()[0]
    }

    pub fn in_channels(&self) -> usize {
        self.w_t.dims()[1]
    }

    fn row(&self, o: usize) -> &[f32] {
        let c = self.in_channels();
        &self.w_t.data()[o * c..(o + 1) * c]
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Histogram {
    pub lo: f32,
    pub hi: f32,
    pub counts: Vec<u64>,
}

impl Histogram {
    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }
}

/// Uniform-bin histogram of all head weights over `[lo, hi]`.
///
/// Values outside the range land in the end bins; the top bin is closed on
/// the right.
pub fn weight_histogram(head: &TeacherHead, bins: usize, lo: f32, hi: f32) -> Result<Histogram> {
    if bins == 0 || lo >= hi || !lo.is_finite() || !hi.is_finite() {
        return Err(Error::InvalidArgument(format!(
            "histogram needs bins >= 1 and lo < hi, got {bins} bins over [{lo}, {hi}]"
        )));
    }
    let width = (hi as f64 - lo as f64) / bins as f64;
    let mut counts = vec![0u64; bins];
    for &v in head.w_t.data() {
        let idx = ((v as f64 - lo as f64) / width).floor();
        let idx = idx.clamp(0.0, (bins - 1) as f64) as usize;
        counts[idx] += 1;
    }
    Ok(Histogram { lo, hi, counts })
}

/// Fraction of head weights with `|w| < threshold`.
pub fn near_zero_fraction(head: &TeacherHead, threshold: f32) -> f64 {
    let n = head
        .w_t
        .data()
        .iter()
        .filter(|v| v.abs() < threshold)
        .count();
    n as f64 / head.w_t.len() as f64
}

/// Sampled head weights `[C_out, d]` and the source column of each entry.
#[derive(Clone, Debug, PartialEq)]
pub struct CoreWeights {
    pub s_w: Tensor,
    pub selection: Vec<Vec<usize>>,
}

/// Keeps the `d` largest-magnitude weights of every output row, in their
/// original column order. Equal magnitudes prefer the lower column.
pub fn sample_core(head: &TeacherHead, d: usize) -> Result<CoreWeights> {
    let c_in = head.in_channels();
    if d == 0 || d > c_in {
        return Err(Error::OutOfRange(format!("d = {d} not in 1..={c_in}")));
    }
    let mut values = Vec::with_capacity(head.out_channels() * d);
    let mut selection = Vec::with_capacity(head.out_channels());
    for o in 0..head.out_channels() {
        let row = head.row(o);
        let mut order: Vec<usize> = (0..c_in).collect();
        order.sort_by(|&a, &b| row[b].abs().total_cmp(&row[a].abs()).then(a.cmp(&b)));
        let mut picked = order[..d].to_vec();
        picked.sort_unstable();
        values.extend(picked.iter().map(|&i| row[i]));
        selection.push(picked);
    }
    Ok(CoreWeights {
        s_w: Tensor::new(vec![head.out_channels(), d], values)?,
        selection,
    })
}

/// 1x1 convolution: `out[o](p) = sum_k w[o, k] * x[k](p)`.
pub fn project(x: &Tensor, w: &Tensor) -> Result<Tensor> {
    let (k, h, wd) = x.chw()?;
    let (c_out, wk) = match *w.dims() {
        [a, b] => (a, b),
        _ => {
            return Err(Error::Shape(format!(
                "projection weights must be 2-D, got {:?}",
                w.dims()
            )))
        }
    };
    if wk != k {
        return Err(Error::mismatch(&[c_out, k], w.dims()));
    }
    let n = h * wd;
    let (xs, ws) = (x.data(), w.data());
    let mut out = vec![0.0f32; c_out * n];
    let mut acc = vec![0.0f64; n];
    for o in 0..c_out {
        acc.fill(0.0);
        for c in 0..k {
            let wv = ws[o * k + c] as f64;
            if wv == 0.0 {
                continue;
            }
            for (a, &v) in acc.iter_mut().zip(&xs[c * n..(c + 1) * n]) {
                *a += wv * v as f64;
            }
        }
        out[o * n..(o + 1) * n]
            .iter_mut()
            .zip(&acc)
            .for_each(|(dst, &a)| *dst = a as f32);
    }
    Tensor::new(vec![c_out, h, wd], out)
}

/// `||a - b||^2` over all elements, compensated.
pub fn squared_distance(a: &Tensor, b: &Tensor) -> Result<f64> {
    b.ensure_dims(a.dims())?;
    Ok(compensated_sum(a.data().iter().zip(b.data()).map(
        |(&x, &y)| {
            let d = x as f64 - y as f64;
            d * d
        },
    )))
}

/// Plain feature mimicking through an adaptation layer `[C_in, d]`.
pub fn loss_naive(x_s: &Tensor, x_t: &Tensor, adapter_w: &Tensor) -> Result<f64> {
    squared_distance(&project(x_s, adapter_w)?, x_t)
}

/// Adapted student and teacher, both pushed through the head weights.
pub fn loss_projected(
    x_s: &Tensor,
    x_t: &Tensor,
    adapter_w: &Tensor,
    head: &TeacherHead,
) -> Result<f64> {
    let adapted = project(x_s, adapter_w)?;
    squared_distance(
        &project(&adapted, head.weights())?,
        &project(x_t, head.weights())?,
    )
}

#[derive(Clone, Debug)]
pub struct CoreLoss {
    pub loss: f64,
    /// Student projected through the sampled weights.
    pub y_ct: Tensor,
    /// Teacher projected through the full weights.
    pub y_t: Tensor,
    pub core: CoreWeights,
}

fn check_level(x_s: &Tensor, x_t: &Tensor, head: &TeacherHead, d: usize) -> Result<()> {
    let (sc, sh, sw) = x_s.chw()?;
    let (tc, th, tw) = x_t.chw()?;
    if (sh, sw) != (th, tw) {
        return Err(Error::mismatch(&[tc, sh, sw], x_t.dims()));
    }
    if sc != d {
        return Err(Error::mismatch(&[d, sh, sw], x_s.dims()));
    }
    if tc != head.in_channels() {
        return Err(Error::mismatch(&[head.in_channels(), th, tw], x_t.dims()));
    }
    Ok(())
}

/// Core-knowledge distillation loss for one pyramid level.
pub fn loss_core(x_s: &Tensor, x_t: &Tensor, head: &TeacherHead, d: usize) -> Result<CoreLoss> {
    let core = sample_core(head, d)?;
    check_level(x_s, x_t, head, d)?;
    let y_ct = project(x_s, &core.s_w)?;
    let y_t = project(x_t, head.weights())?;
    Ok(CoreLoss {
        loss: squared_distance(&y_ct, &y_t)?,
        y_ct,
        y_t,
        core,
    })
}

/// Closed-form gradient of [`loss_core`] with respect to the student feature:
/// `2 * sum_o s_w[o, k] * (y_ct[o] - y_t[o])`.
pub fn loss_core_grad(x_s: &Tensor, x_t: &Tensor, head: &TeacherHead, d: usize) -> Result<Tensor> {
    let CoreLoss {
        y_ct, y_t, core, ..
    } = loss_core(x_s, x_t, head, d)?;
    let (c_out, h, w) = y_ct.chw()?;
    let n = h * w;
    let s = core.s_w.data();
    let mut grad = vec![0.0f64; d * n];
    for o in 0..c_out {
        let diff: Vec<f64> = y_ct.data()[o * n..(o + 1) * n]
            .iter()
            .zip(&y_t.data()[o * n..(o + 1) * n])
            .map(|(&a, &b)| a as f64 - b as f64)
            .collect();
        for k in 0..d {
            let sv = 2.0 * s[o * d + k] as f64;
            for (g, r) in grad[k * n..(k + 1) * n].iter_mut().zip(&diff) {
                *g += sv * r;
            }
        }
    }
    Tensor::new(vec![d, h, w], grad.into_iter().map(|g| g as f32).collect())
}

/// How a level's squared error is reduced to a scalar.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Reduction {
    #[default]
    Sum,
    /// Divides by the number of projected elements `C_out * H * W`.
    Mean,
}

impl std::str::FromStr for Reduction {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sum" => Ok(Reduction::Sum),
            "mean" => Ok(Reduction::Mean),
            other => Err(Error::InvalidArgument(format!(
                "reduction must be sum or mean, got {other:?}"
            ))),
        }
    }
}

/// One pyramid level: student feature `[d, H, W]`, teacher feature
/// `[C_in, H, W]` and that level's head.
#[derive(Clone, Debug)]
pub struct FeatureLevel {
    pub x_s: Tensor,
    pub x_t: Tensor,
    pub head: TeacherHead,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct LevelLosses {
    pub per_level: Vec<f64>,
    pub total: f64,
}

/// Applies [`loss_core`] to every level and sums the results.
///
/// `d` defaults to each level's student channel count.
pub fn distill_levels(
    levels: &[FeatureLevel],
    d: Option<usize>,
    reduction: Reduction,
) -> Result<LevelLosses> {
    let per_level = levels
        .iter()
        .map(|lvl| {
            let d = d.unwrap_or(lvl.x_s.dims()[0]);
            let out = loss_core(&lvl.x_s, &lvl.x_t, &lvl.head, d)?;
            Ok(match reduction {
                Reduction::Sum => out.loss,
                Reduction::Mean => out.loss / out.y_t.len() as f64,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let total = compensated_sum(per_level.iter().copied());
    Ok(LevelLosses { per_level, total })
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct LevelEntry {
    x_s: PathBuf,
    x_t: PathBuf,
    w_t: PathBuf,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ManifestDoc {
    levels: Vec<LevelEntry>,
}

/// Loads `{"levels": [{"x_s", "x_t", "w_t"}]}`; relative paths resolve
/// against the manifest's directory.
pub fn load_manifest(path: impl AsRef<Path>) -> Result<Vec<FeatureLevel>> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let doc: ManifestDoc = serde_json::from_str(&text)
        .map_err(|e| Error::InvalidArgument(format!("manifest {}: {e}", path.display())))?;
    if doc.levels.is_empty() {
        return Err(Error::InvalidArgument("manifest lists no levels".into()));
    }
    let base = path.parent().unwrap_or(Path::new("."));
    doc.levels
        .iter()
        .map(|l| {
            Ok(FeatureLevel {
                x_s: read_tensor(base.join(&l.x_s))?,
                x_t: read_tensor(base.join(&l.x_t))?,
                head: TeacherHead::new(read_tensor(base.join(&l.w_t))?)?,
            })
        })
        .collect()
}

/// Detector loss terms and their sum.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct LossBreakdown {
    pub l_cls: f64,
    pub l_reg: f64,
    pub l_weak: f64,
    pub l_feat: f64,
    pub l_total: f64,
}

/// `l_cls + l_reg + l_weak + l_feat`; `l_cls` and `l_reg` come from the detector.
pub fn total_loss(l_cls: f64, l_reg: f64, l_weak: f64, l_feat: f64) -> Result<LossBreakdown> {
    for (name, v) in [
        ("cls", l_cls),
        ("reg", l_reg),
        ("weak", l_weak),
        ("feat", l_feat),
    ] {
        if !(v >= 0.0 && v.is_finite()) {
            return Err(Error::OutOfRange(format!(
                "loss term {name} = {v} must be finite and >= 0"
            )));
        }
    }
    Ok(LossBreakdown {
        l_cls,
        l_reg,
        l_weak,
        l_feat,
        l_total: compensated_sum([l_cls, l_reg, l_weak, l_feat]),
    })
}
