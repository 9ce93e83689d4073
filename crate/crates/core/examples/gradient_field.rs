//! Gradient magnitudes, the union reference and its 3x3 max-pool boost.

use shapefuse::gradient::{boost, gradient_magnitude, luma, union_reference};
use shapefuse::synthetic::street_scene;

pub fn run_example() -> shapefuse::Result<()> {
    let pair = street_scene(64, 80)?;
    let grad_rgb = gradient_magnitude(&luma(pair.rgb())?)?;
    let grad_t = gradient_magnitude(pair.thermal())?;
    let reference = union_reference(&grad_rgb, &grad_t)?;
    let boosted = boost(&reference)?;

    let nonzero = |t: &shapefuse::Tensor| t.data().iter().filter(|&&v| v > 1e-3).count();
    for (name, t) in [
        ("rgb gradient", &grad_rgb),
        ("thermal gradient", &grad_t),
        ("union reference", &reference),
        ("boosted reference", &boosted),
    ] {
        println!(
            "{name:>18}: max {:.3}, {} px above 1e-3",
            t.max_value(),
            nonzero(t)
        );
    }
    // Boosting only ever raises values.
    assert!(boosted
        .data()
        .iter()
        .zip(reference.data())
        .all(|(b, r)| b >= r));
    Ok(())
}

#[allow(dead_code)]
fn main() -> shapefuse::Result<()> {
    run_example()
}
