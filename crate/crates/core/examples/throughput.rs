//! Times the fusion pass on a synthetic 640x512 pair, the working
//! resolution of both RGB-thermal benchmarks.
//!
//! ```text
//! cargo run --release --example throughput -- 100
//! ```

use shapefuse::bench::{run_bench, BenchOptions};
use shapefuse::synthetic::street_scene;

pub fn run_example(iterations: usize) -> shapefuse::Result<()> {
    let pair = street_scene(512, 640)?;
    let opts = BenchOptions {
        iterations,
        warmup: 2,
        batch_pairs: 8,
        batch_threads: 4,
        batch_repeats: 1,
        ..Default::default()
    };
    let r = run_bench(&pair, None, &opts)?;
    let s = r.single_thread;
    println!(
        "{}x{}, {} passes on one thread",
        r.width, r.height, s.samples
    );
    println!(
        "  min {:.2} ms  median {:.2} ms  p95 {:.2} ms  ({:.1} Mpx/s)",
        s.min_ms,
        s.median_ms,
        s.p95_ms,
        r.pixels_per_second / 1e6
    );
    println!(
        "  stages: gradients {:.2} | stats {:.2} | masks {:.2} | gating {:.2} ms",
        r.stages.gradients_ms, r.stages.window_stats_ms, r.stages.masks_ms, r.stages.gating_ms
    );
    if let Some(b) = r.batch {
        println!(
            "  batch of {}: {:.1} ms serial, {:.1} ms on {} threads ({:.2}x, {} cores)",
            b.pairs, b.serial_ms, b.parallel_ms, b.threads, b.speedup, b.available_cores
        );
    }
    Ok(())
}

#[allow(dead_code)]
fn main() -> shapefuse::Result<()> {
    let iterations = std::env::args()
        .nth(1)
        .and_then(|a| a.parse().ok())
        .unwrap_or(50);
    run_example(iterations)
}
