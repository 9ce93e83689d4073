//! `ZTEN` tensor files and detector-style standardization.

use shapefuse::synthetic::street_scene;
use shapefuse::tensor::{encode_tensor, read_tensor, standardize, write_tensor};
use shapefuse::{NormalizationSpec, Tensor};

pub fn run_example() -> shapefuse::Result<()> {
    let t = Tensor::from_fn(&[2, 3], |i| i as f32 * 0.5)?;
    let bytes = encode_tensor(&t)?;
    println!(
        "[2, 3] tensor -> {} bytes, header {:02x?}",
        bytes.len(),
        &bytes[..16]
    );

    let path = std::env::temp_dir().join(format!("shapefuse_example_{}.zten", std::process::id()));
    write_tensor(&t, &path)?;
    let back = read_tensor(&path)?;
    std::fs::remove_file(&path)?;
    assert!(back.bit_eq(&t));
    println!("round trip is bit exact");

    let pair = street_scene(32, 40)?;
    for (name, spec) in [
        ("M3FD", NormalizationSpec::M3FD),
        ("FLIR", NormalizationSpec::FLIR),
    ] {
        let (rgb, thermal) = standardize(&pair, &spec)?;
        println!(
            "{name}: rgb in [{:.2}, {:.2}], thermal in [{:.2}, {:.2}]",
            rgb.min_value(),
            rgb.max_value(),
            thermal.min_value(),
            thermal.max_value()
        );
    }
    Ok(())
}

#[allow(dead_code)]
fn main() -> shapefuse::Result<()> {
    run_example()
}
