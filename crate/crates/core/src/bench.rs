//! Wall-clock harness for the fusion pass.
//!
//! A pass is gradients, window statistics, masks and gating on one pair.
//! The single-pair timings run on a one-thread pool; the batch section
//! fuses several copies of the pair on a one-thread pool and on an
//! `n`-thread pool and reports the ratio.

use std::path::Path;
use std::time::{Duration, Instant};

use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::shape::{fuse, ShapeConfig, StageTimings};
use crate::tensor::{load_image_pair, MultispectralPair};

#[derive(Clone, Debug)]
pub struct BenchOptions {
    pub iterations: usize,
    pub warmup: usize,
    /// Decode the PNG pair inside every timed pass.
    pub include_io: bool,
    /// Copies of the pair fused per batch run; 0 skips the batch section.
    pub batch_pairs: usize,
    pub batch_threads: usize,
    /// Batch runs per pool size; the fastest is kept.
    pub batch_repeats: usize,
    pub config: ShapeConfig,
}

impl Default for BenchOptions {
    fn default() -> Self {
        Self {
            iterations: 100,
            warmup: 3,
            include_io: false,
            batch_pairs: 16,
            batch_threads: 4,
            batch_repeats: 3,
            config: ShapeConfig::default(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct TimingSummary {
    pub samples: usize,
    pub min_ms: f64,
    pub median_ms: f64,
    pub p95_ms: f64,
    pub mean_ms: f64,
}

impl TimingSummary {
    pub fn from_samples(samples: &[Duration]) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::InvalidArgument("no timing samples".into()));
        }
        let mut ms: Vec<f64> = samples.iter().map(|d| d.as_secs_f64() * 1e3).collect();
        ms.sort_by(f64::total_cmp);
        let n = ms.len();
        let median = if n % 2 == 1 {
            ms[n / 2]
        } else {
            0.5 * (ms[n / 2 - 1] + ms[n / 2])
        };
        // Nearest-rank percentile.
        let p95 = ms[((0.95 * n as f64).ceil() as usize).clamp(1, n) - 1];
        Ok(Self {
            samples: n,
            min_ms: ms[0],
            median_ms: median,
            p95_ms: p95,
            mean_ms: ms.iter().sum::<f64>() / n as f64,
        })
    }
}

/// Median milliseconds spent per stage.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct StageBreakdown {
    pub decode_ms: Option<f64>,
    pub gradients_ms: f64,
    pub window_stats_ms: f64,
    pub masks_ms: f64,
    pub gating_ms: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct BatchReport {
    pub pairs: usize,
    pub threads: usize,
    pub available_cores: usize,
    pub serial_ms: f64,
    pub parallel_ms: f64,
    pub speedup: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct BenchReport {
    pub width: usize,
    pub height: usize,
    pub iterations: usize,
    pub warmup: usize,
    pub include_io: bool,
    pub single_thread: TimingSummary,
    pub pixels_per_second: f64,
    pub stages: StageBreakdown,
    pub batch: Option<BatchReport>,
}

/// Decode time (when measured) and stage timings of one pass.
type Sample = (Option<Duration>, StageTimings);

fn pool(threads: usize) -> Result<rayon::ThreadPool> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| Error::InvalidArgument(format!("thread pool: {e}")))
}

fn median_ms(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Times full passes over `pair`.
///
/// `files` must name the pair's PNGs when `include_io` is set.
pub fn run_bench(
    pair: &MultispectralPair,
    files: Option<(&Path, &Path)>,
    opts: &BenchOptions,
) -> Result<BenchReport> {
    if opts.iterations == 0 {
        return Err(Error::InvalidArgument("iterations must be >= 1".into()));
    }
    if opts.include_io && files.is_none() {
        return Err(Error::InvalidArgument(
            "include_io needs the input file paths".into(),
        ));
    }

    let single = pool(1)?;
    let one_pass = || -> Result<(Option<Duration>, StageTimings)> {
        if opts.include_io {
            let (rgb, thermal) = files.expect("checked above");
            let t0 = Instant::now();
            let loaded = load_image_pair(rgb, thermal)?;
            let decode = t0.elapsed();
            Ok((Some(decode), fuse(&loaded, &opts.config)?.timings))
        } else {
            Ok((None, fuse(pair, &opts.config)?.timings))
        }
    };

    let (totals, stages) = single.install(|| -> Result<_> {
        for _ in 0..opts.warmup {
            one_pass()?;
        }
        let mut totals = Vec::with_capacity(opts.iterations);
        let mut stages = Vec::with_capacity(opts.iterations);
        for _ in 0..opts.iterations {
            let t0 = Instant::now();
            let s = one_pass()?;
            totals.push(t0.elapsed());
            stages.push(s);
        }
        Ok((totals, stages))
    })?;

    let summary = TimingSummary::from_samples(&totals)?;
    let ms = |f: &dyn Fn(&Sample) -> Duration| {
        median_ms(stages.iter().map(|s| f(s).as_secs_f64() * 1e3).collect())
    };
    let breakdown = StageBreakdown {
        decode_ms: opts.include_io.then(|| ms(&|s| s.0.unwrap_or_default())),
        gradients_ms: ms(&|s| s.1.gradients),
        window_stats_ms: ms(&|s| s.1.window_stats),
        masks_ms: ms(&|s| s.1.masks),
        gating_ms: ms(&|s| s.1.gating),
    };
    let pixels = pair.width() * pair.height();

    let batch = if opts.batch_pairs > 0 {
        Some(run_batch(pair, opts)?)
    } else {
        None
    };

    Ok(BenchReport {
        width: pair.width(),
        height: pair.height(),
        iterations: opts.iterations,
        warmup: opts.warmup,
        include_io: opts.include_io,
        pixels_per_second: pixels as f64 / (summary.median_ms / 1e3),
        single_thread: summary,
        stages: breakdown,
        batch,
    })
}

/// Fuses `batch_pairs` copies of the pair on 1 and on `batch_threads` workers.
pub fn run_batch(pair: &MultispectralPair, opts: &BenchOptions) -> Result<BatchReport> {
    if opts.batch_threads == 0 {
        return Err(Error::InvalidArgument("batch threads must be >= 1".into()));
    }
    let pairs: Vec<&MultispectralPair> = vec![pair; opts.batch_pairs.max(1)];
    let time_with = |threads: usize| -> Result<f64> {
        let p = pool(threads)?;
        let mut best = f64::INFINITY;
        for _ in 0..opts.batch_repeats.max(1) {
            let t0 = Instant::now();
            p.install(|| {
                pairs
                    .par_iter()
                    .map(|pr| fuse(pr, &opts.config).map(|_| ()))
                    .collect::<Result<Vec<_>>>()
            })?;
            best = best.min(t0.elapsed().as_secs_f64() * 1e3);
        }
        Ok(best)
    };
    let serial_ms = time_with(1)?;
    let parallel_ms = time_with(opts.batch_threads)?;
    Ok(BatchReport {
        pairs: pairs.len(),
        threads: opts.batch_threads,
        available_cores: std::thread::available_parallelism().map_or(1, |n| n.get()),
        serial_ms,
        parallel_ms,
        speedup: serial_ms / parallel_ms,
    })
}
