//! Shape-priority gating on a synthetic street scene.
//!
//! Computes the gradient field, the raw and normalized masks and the gated
//! inputs, prints where each modality wins and writes the results as
//! `ZTEN` tensors plus PNG previews.
//!
//! ```text
//! cargo run --example fuse_pair -- /tmp/fused
//! ```

use std::path::Path;

use shapefuse::synthetic::street_scene;
use shapefuse::tensor::{write_mask_png, write_tensor};
use shapefuse::{fuse, ShapeConfig};

pub fn run_example(out_dir: &Path) -> shapefuse::Result<()> {
    let pair = street_scene(128, 160)?;
    let out = fuse(&pair, &ShapeConfig::default())?;

    let m_rgb = out.masks.m_rgb.data();
    let rgb_wins = m_rgb.iter().filter(|&&v| v > 0.5).count();
    let t_wins = m_rgb.iter().filter(|&&v| v < 0.5).count();
    println!("dynamic range L = {:.3}", out.field.dynamic_range);
    println!(
        "xi1 = {:.3e}, xi2 = {:.3e}, window {}",
        out.params.xi1(),
        out.params.xi2(),
        out.params.window
    );
    println!(
        "rgb favoured at {rgb_wins} px, thermal at {t_wins} px, tied at {} px",
        m_rgb.len() - rgb_wins - t_wins
    );
    println!(
        "raw rgb mask in [{:.3}, {:.3}], raw thermal mask in [{:.3}, {:.3}]",
        out.masks.m_raw_rgb.min_value(),
        out.masks.m_raw_rgb.max_value(),
        out.masks.m_raw_t.min_value(),
        out.masks.m_raw_t.max_value()
    );

    std::fs::create_dir_all(out_dir)?;
    write_tensor(&out.concatenated()?, out_dir.join("gated.zten"))?;
    write_tensor(&out.masks.m_rgb, out_dir.join("mask_rgb.zten"))?;
    write_mask_png(&out.masks.m_rgb, out_dir.join("mask_rgb.png"))?;
    write_mask_png(&out.masks.m_t, out_dir.join("mask_thermal.png"))?;
    println!("wrote results to {}", out_dir.display());
    Ok(())
}

#[allow(dead_code)]
fn main() -> shapefuse::Result<()> {
    let dir = std::env::args()
        .nth(1)
        .map(Into::into)
        .unwrap_or_else(|| std::env::temp_dir().join("shapefuse_fuse_pair"));
    run_example(&dir)
}
