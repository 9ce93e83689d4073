//! Weak-supervision targets and losses.
//!
//! Image level: a multi-label vector from the box annotations, per-class
//! max over classifier scores of overlapping crops, soft targets mixed from
//! the hard labels and the peer model's prediction, and BCE between them.
//! Box level: per-class binary masks filled from boxes, scored with BCE.

use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numeric::compensated_sum;
use crate::tensor::Tensor;

pub const DEFAULT_CROP_SIZE: usize = 224;
pub const DEFAULT_CROP_STRIDE: usize = 112;
pub const DEFAULT_LAMBDA: f32 = 0.1;
/// Predictions are kept at least this far from 0 and 1 inside logarithms.
pub const BCE_EPS: f64 = 1e-7;

/// Half-open pixel box `[x0, x1) x [y0, y1)` labelled with a class.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BoxAnnotation {
    pub class_id: usize,
    pub x0: usize,
    pub y0: usize,
    pub x1: usize,
    pub y1: usize,
}

impl BoxAnnotation {
    pub fn new(class_id: usize, x0: usize, y0: usize, x1: usize, y1: usize) -> Result<Self> {
        if x0 >= x1 || y0 >= y1 {
            return Err(Error::InvalidArgument(format!(
                "empty box [{x0}, {x1}) x [{y0}, {y1})"
            )));
        }
        Ok(Self {
            class_id,
            x0,
            y0,
            x1,
            y1,
        })
    }

    /// Snaps real-valued corners outward to whole pixels and clips to the image.
    pub fn clipped(
        class_id: usize,
        corners: [f64; 4],
        width: usize,
        height: usize,
    ) -> Result<Self> {
        if corners.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument("box corner is not finite".into()));
        }
        let [x0, y0, x1, y1] = corners;
        let snap = |v: f64, limit: usize| v.clamp(0.0, limit as f64) as usize;
        Self::new(
            class_id,
            snap(x0.floor(), width),
            snap(y0.floor(), height),
            snap(x1.ceil(), width),
            snap(y1.ceil(), height),
        )
    }

    pub fn area(&self) -> usize {
        (self.x1 - self.x0) * (self.y1 - self.y0)
    }

    pub fn contains(&self, x: usize, y: usize) -> bool {
        (self.x0..self.x1).contains(&x) && (self.y0..self.y1).contains(&y)
    }

    fn check(&self, classes: usize, width: usize, height: usize) -> Result<()> {
        if self.class_id >= classes {
            return Err(Error::OutOfRange(format!(
                "class id {} with {classes} classes",
                self.class_id
            )));
        }
        if self.x1 > width || self.y1 > height {
            return Err(Error::OutOfRange(format!(
                "box {self:?} exceeds {width}x{height}"
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct BoxRecord {
    class: usize,
    x0: f64,
    y0: f64,
    x1: f64,
    y1: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct AnnotationDoc {
    width: usize,
    height: usize,
    boxes: Vec<BoxRecord>,
}

/// Boxes of one image together with its pixel extents.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageAnnotations {
    pub width: usize,
    pub height: usize,
    pub boxes: Vec<BoxAnnotation>,
}

impl ImageAnnotations {
    /// Parses `{"width", "height", "boxes": [{"class", "x0", "y0", "x1", "y1"}]}`.
    pub fn from_json(text: &str) -> Result<Self> {
        let doc: AnnotationDoc = serde_json::from_str(text)
            .map_err(|e| Error::InvalidArgument(format!("annotation JSON: {e}")))?;
        if doc.width == 0 || doc.height == 0 {
            return Err(Error::InvalidArgument(
                "image extents must be positive".into(),
            ));
        }
        let boxes = doc
            .boxes
            .iter()
            .map(|b| {
                BoxAnnotation::clipped(b.class, [b.x0, b.y0, b.x1, b.y1], doc.width, doc.height)
            })
            .collect::<Result<_>>()?;
        Ok(Self {
            width: doc.width,
            height: doc.height,
            boxes,
        })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MultiLabelTarget {
    pub q: Tensor,
}

/// `q[i] = 1` iff class `i` appears in at least one box.
pub fn build_multilabel(annotations: &[BoxAnnotation], classes: usize) -> Result<MultiLabelTarget> {
    if classes == 0 {
        return Err(Error::InvalidArgument(
            "class count must be positive".into(),
        ));
    }
    let mut q = vec![0.0f32; classes];
    for b in annotations {
        if b.class_id >= classes {
            return Err(Error::OutOfRange(format!(
                "class id {} with {classes} classes",
                b.class_id
            )));
        }
        q[b.class_id] = 1.0;
    }
    Ok(MultiLabelTarget {
        q: Tensor::from_parts(vec![classes], q),
    })
}

/// Square crop windows over an image, offsets in `(x, y)` pixel order.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CropGrid {
    pub crop_size: usize,
    pub stride: usize,
    pub crops: Vec<(usize, usize)>,
}

fn axis_offsets(extent: usize, size: usize, stride: usize) -> Vec<usize> {
    let mut offs: Vec<usize> = (0..)
        .map(|k| k * stride)
        .take_while(|o| o + size <= extent)
        .collect();
    let last = *offs.last().expect("extent >= size");
    if last + size < extent {
        offs.push(extent - size);
    }
    offs
}

/// Sliding crop grid; a final flush-to-edge window is added per axis when
/// the stride does not land exactly on the border.
pub fn crop_grid(height: usize, width: usize, crop_size: usize, stride: usize) -> Result<CropGrid> {
    if crop_size == 0 || stride == 0 {
        return Err(Error::InvalidArgument(
            "crop size and stride must be positive".into(),
        ));
    }
    if height < crop_size || width < crop_size {
        return Err(Error::InvalidArgument(format!(
            "image {height}x{width} smaller than crop {crop_size}"
        )));
    }
    let ys = axis_offsets(height, crop_size, stride);
    let xs = axis_offsets(width, crop_size, stride);
    let crops = ys
        .iter()
        .flat_map(|&y| xs.iter().map(move |&x| (x, y)))
        .collect();
    Ok(CropGrid {
        crop_size,
        stride,
        crops,
    })
}

/// Copies a `size x size` window at `(x, y)` out of a `[C, H, W]` image.
pub fn extract_crop(image: &Tensor, x: usize, y: usize, size: usize) -> Result<Tensor> {
    let (c, h, w) = image.chw()?;
    if x + size > w || y + size > h {
        return Err(Error::OutOfRange(format!(
            "crop at ({x}, {y}) of side {size} exceeds {h}x{w}"
        )));
    }
    let src = image.data();
    let mut out = Vec::with_capacity(c * size * size);
    for ch in 0..c {
        for row in y..y + size {
            let start = (ch * h + row) * w + x;
            out.extend_from_slice(&src[start..start + size]);
        }
    }
    Tensor::new(vec![c, size, size], out)
}

fn check_probabilities(t: &Tensor, what: &str) -> Result<()> {
    match t.data().iter().find(|v| !(0.0..=1.0).contains(*v)) {
        Some(v) => Err(Error::OutOfRange(format!(
            "{what} value {v} outside [0, 1]"
        ))),
        None => Ok(()),
    }
}

/// Per-class maximum over crops of a `[n_crops, c]` score matrix.
pub fn da_clip_aggregate(per_crop_probs: &Tensor) -> Result<Tensor> {
    let (n, c) = match per_crop_probs.dims() {
        &[n, c] => (n, c),
        other => {
            return Err(Error::Shape(format!(
                "per-crop scores must be [n_crops, c], got {other:?}"
            )))
        }
    };
    check_probabilities(per_crop_probs, "crop probability")?;
    let rows = per_crop_probs.data().chunks_exact(c);
    let mut out = vec![f32::NEG_INFINITY; c];
    for row in rows.take(n) {
        out.iter_mut().zip(row).for_each(|(o, &v)| *o = o.max(v));
    }
    Tensor::new(vec![c], out)
}

/// Divide-and-aggregate classification: scores every crop of `image` with
/// `classifier` and keeps the per-class maximum.
///
/// Crops are scored concurrently; the classifier must return `classes`
/// probabilities per crop.
pub fn da_clip<F>(image: &Tensor, grid: &CropGrid, classes: usize, classifier: F) -> Result<Tensor>
where
    F: Fn(&Tensor) -> Result<Vec<f32>> + Sync,
{
    if grid.crops.is_empty() {
        return Err(Error::InvalidArgument("crop grid is empty".into()));
    }
    let rows = grid
        .crops
        .par_iter()
        .map(|&(x, y)| {
            let crop = extract_crop(image, x, y, grid.crop_size)?;
            let probs = classifier(&crop)?;
            if probs.len() != classes {
                return Err(Error::mismatch(&[classes], &[probs.len()]));
            }
            Ok(probs)
        })
        .collect::<Result<Vec<_>>>()?;
    let scores = Tensor::new(vec![rows.len(), classes], rows.concat())?;
    da_clip_aggregate(&scores)
}

#[derive(Clone, Debug, PartialEq)]
pub struct SoftTarget {
    pub q_tilde: Tensor,
    pub lambda: f32,
}

/// `(1 - lambda) * q + lambda * q_hat`.
pub fn soft_target(q: &MultiLabelTarget, q_hat: &Tensor, lambda: f32) -> Result<SoftTarget> {
    if !(0.0..=1.0).contains(&lambda) {
        return Err(Error::OutOfRange(format!("lambda {lambda} outside [0, 1]")));
    }
    q_hat.ensure_dims(q.q.dims())?;
    check_probabilities(q_hat, "prediction")?;
    let mixed =
        q.q.data()
            .iter()
            .zip(q_hat.data())
            .map(|(&t, &p)| ((1.0 - lambda as f64) * t as f64 + lambda as f64 * p as f64) as f32)
            .collect();
    Ok(SoftTarget {
        q_tilde: Tensor::new(q.q.dims().to_vec(), mixed)?,
        lambda,
    })
}

/// One binary cross-entropy term.
///
/// Zero-weight terms are skipped and logarithm arguments are floored at
/// [`BCE_EPS`], so a perfect hard prediction costs exactly zero while a
/// saturated wrong one stays finite.
#[inline]
fn bce_term(t: f64, p: f64) -> f64 {
    let mut loss = 0.0;
    if t > 0.0 {
        loss -= t * p.max(BCE_EPS).ln();
    }
    if t < 1.0 {
        loss -= (1.0 - t) * (1.0 - p).max(BCE_EPS).ln();
    }
    loss
}

fn bce_sum(target: &Tensor, pred: &Tensor) -> Result<f64> {
    pred.ensure_dims(target.dims())?;
    check_probabilities(target, "target")?;
    check_probabilities(pred, "prediction")?;
    Ok(compensated_sum(
        target
            .data()
            .iter()
            .zip(pred.data())
            .map(|(&t, &p)| bce_term(t as f64, p as f64)),
    ))
}

/// Summed multi-label BCE of `pred` against `target`.
pub fn bce_multilabel(target: &Tensor, pred: &Tensor) -> Result<f64> {
    if target.ndim() != 1 {
        return Err(Error::Shape(format!(
            "multi-label vectors must be 1-D, got {:?}",
            target.dims()
        )));
    }
    bce_sum(target, pred)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct MutualLosses {
    /// Adapter soft target scoring the backbone prediction.
    pub ad_to_bb: f64,
    /// Backbone soft target scoring the adapter prediction.
    pub bb_to_ad: f64,
}

/// Cross-supervision between the adapter and the backbone classification head.
pub fn mutual_losses(
    q: &MultiLabelTarget,
    q_hat_ad: &Tensor,
    q_hat_bb: &Tensor,
    lambda: f32,
) -> Result<MutualLosses> {
    let soft_ad = soft_target(q, q_hat_ad, lambda)?;
    let soft_bb = soft_target(q, q_hat_bb, lambda)?;
    Ok(MutualLosses {
        ad_to_bb: bce_multilabel(&soft_ad.q_tilde, q_hat_bb)?,
        bb_to_ad: bce_multilabel(&soft_bb.q_tilde, q_hat_ad)?,
    })
}

/// Per-class binary box masks, `[c, H, W]`.
#[derive(Clone, Debug, PartialEq)]
pub struct BoxMask {
    pub g: Tensor,
}

impl BoxMask {
    pub fn ones(&self, class: usize) -> Result<usize> {
        Ok(self.g.plane(class)?.iter().filter(|&&v| v == 1.0).count())
    }
}

pub fn rasterize_boxes(
    annotations: &[BoxAnnotation],
    classes: usize,
    height: usize,
    width: usize,
) -> Result<BoxMask> {
    let mut g = Tensor::zeros(&[classes, height, width])?.into_data();
    for b in annotations {
        b.check(classes, width, height)?;
        let plane = &mut g[b.class_id * height * width..][..height * width];
        for y in b.y0..b.y1 {
            plane[y * width + b.x0..y * width + b.x1].fill(1.0);
        }
    }
    Tensor::new(vec![classes, height, width], g).map(|g| BoxMask { g })
}

/// Box-level BCE summed over all `c * H * W` mask elements.
pub fn bce_mask(g: &BoxMask, g_hat: &Tensor) -> Result<f64> {
    bce_sum(&g.g, g_hat)
}

/// The three weak-supervision terms and their sum.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct WeakLosses {
    pub ad_to_bb: f64,
    pub bb_to_ad: f64,
    pub box_level: f64,
}

impl WeakLosses {
    pub fn new(mutual: MutualLosses, box_level: f64) -> Self {
        Self {
            ad_to_bb: mutual.ad_to_bb,
            bb_to_ad: mutual.bb_to_ad,
            box_level,
        }
    }

    pub fn total(&self) -> f64 {
        weak_loss_total(self.ad_to_bb, self.bb_to_ad, self.box_level)
    }
}

pub fn weak_loss_total(ad_to_bb: f64, bb_to_ad: f64, box_level: f64) -> f64 {
    compensated_sum([ad_to_bb, bb_to_ad, box_level])
}
