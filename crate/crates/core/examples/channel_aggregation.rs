//! First-layer responses with and without gating, summarized with the
//! softmax channel aggregation used for feature visualizations.

use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};
use shapefuse::shape::{aggregate_channels, fused_feature};
use shapefuse::synthetic::street_scene;
use shapefuse::{fuse, ShapeConfig, Tensor};

pub fn run_example() -> shapefuse::Result<()> {
    let pair = street_scene(48, 64)?;
    let plain = Tensor::concat_channels(&[pair.rgb(), pair.thermal()])?;
    let gated = fuse(&pair, &ShapeConfig::default())?.concatenated()?;

    let mut rng = StdRng::seed_from_u64(3);
    let weights = Tensor::from_fn(&[8, 4, 7, 7], |_| rng.gen_range(-0.1..0.1))?;
    for (name, input) in [("plain", &plain), ("gated", &gated)] {
        let feature = fused_feature(input, &weights, None)?;
        let agg = aggregate_channels(&feature)?;
        println!(
            "{name:>5}: feature {:?}, aggregated in [{:.4}, {:.4}]",
            feature.dims(),
            agg.min_value(),
            agg.max_value()
        );
    }
    Ok(())
}

#[allow(dead_code)]
fn main() -> shapefuse::Result<()> {
    run_example()
}
