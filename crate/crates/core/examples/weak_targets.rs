//! Image-level and box-level weak supervision.
//!
//! Builds targets from an annotation document, runs divide-and-aggregate
//! classification with a toy classifier, mixes soft targets and evaluates
//! the three BCE terms.

use shapefuse::weak::{
    bce_mask, build_multilabel, crop_grid, da_clip, mutual_losses, rasterize_boxes,
    ImageAnnotations, WeakLosses, DEFAULT_LAMBDA,
};
use shapefuse::Tensor;

const CLASSES: usize = 3;

pub fn run_example() -> shapefuse::Result<()> {
    let ann = ImageAnnotations::from_json(
        r#"{"width": 448, "height": 336, "boxes": [
            {"class": 0, "x0": 20, "y0": 30, "x1": 120, "y1": 200},
            {"class": 0, "x0": 90, "y0": 150, "x1": 180, "y1": 300},
            {"class": 2, "x0": 300, "y0": 40, "x1": 430.5, "y1": 120}
        ]}"#,
    )?;
    let q = build_multilabel(&ann.boxes, CLASSES)?;
    println!("q = {:?}", q.q.data());

    let g = rasterize_boxes(&ann.boxes, CLASSES, ann.height, ann.width)?;
    for c in 0..CLASSES {
        println!("class {c}: {} mask pixels", g.ones(c)?);
    }

    // Toy classifier: class k scores the mean of image channel k.
    let image = Tensor::from_fn(&[CLASSES, ann.height, ann.width], |i| {
        let plane = ann.height * ann.width;
        let (c, p) = (i / plane, i % plane);
        let (y, x) = (p / ann.width, p % ann.width);
        let inside = ann
            .boxes
            .iter()
            .any(|b| b.class_id == c && b.contains(x, y));
        if inside {
            1.0
        } else {
            0.0
        }
    })?;
    let grid = crop_grid(ann.height, ann.width, 224, 112)?;
    let q_hat_ad = da_clip(&image, &grid, CLASSES, |crop| {
        let (_, h, w) = crop.chw()?;
        Ok((0..CLASSES)
            .map(|c| {
                let s: f32 = crop.plane(c).unwrap().iter().sum();
                (4.0 * s / (h * w) as f32).min(0.99)
            })
            .collect())
    })?;
    println!(
        "{} crops, aggregated adapter scores {:?}",
        grid.crops.len(),
        q_hat_ad.data()
    );

    let q_hat_bb = Tensor::new(vec![CLASSES], vec![0.8, 0.1, 0.6])?;
    let mutual = mutual_losses(&q, &q_hat_ad, &q_hat_bb, DEFAULT_LAMBDA)?;

    // A segmentation head that is right everywhere but unsure inside boxes.
    let g_hat = g.g.map(|v| if v > 0.5 { 0.7 } else { 0.05 })?;
    let losses = WeakLosses::new(mutual, bce_mask(&g, &g_hat)?);
    println!(
        "H(q_ad~, q_bb^) = {:.4}, H(q_bb~, q_ad^) = {:.4}, H(G, G^) = {:.1}, total {:.1}",
        losses.ad_to_bb,
        losses.bb_to_ad,
        losses.box_level,
        losses.total()
    );
    Ok(())
}

#[allow(dead_code)]
fn main() -> shapefuse::Result<()> {
    run_example()
}
