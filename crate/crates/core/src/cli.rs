//! The `shapefuse` command line.
//!
//! Exit codes: 0 success, 1 usage error, 2 invalid input, 3 internal or
//! output failure. Every subcommand accepts `--json` for a machine-readable
//! report on stdout.

use std::ffi::OsString;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bench::{run_bench, BenchOptions, BenchReport};
use crate::error::Error;
use crate::kd::{
    distill_levels, load_manifest, near_zero_fraction, weight_histogram, Histogram, Reduction,
    TeacherHead, NEAR_ZERO_THRESHOLD,
};
use crate::shape::{fuse, ShapeConfig, DEFAULT_K1, DEFAULT_K2, DEFAULT_WINDOW};
use crate::tensor::{load_image_pair, read_tensor, write_mask_png, write_tensor, Tensor};
use crate::weak::{
    build_multilabel, crop_grid, da_clip_aggregate, rasterize_boxes, soft_target, ImageAnnotations,
    DEFAULT_CROP_SIZE, DEFAULT_CROP_STRIDE, DEFAULT_LAMBDA,
};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_INPUT: i32 = 2;
pub const EXIT_INTERNAL: i32 = 3;

pub const THREADS_ENV: &str = "SHAPEFUSE_THREADS";

#[derive(Debug, Parser)]
#[command(
    name = "shapefuse",
    version,
    about = "RGB-thermal early-fusion toolkit"
)]
struct Cli {
    /// TOML file with defaults for the tunables; flags take precedence.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Worker threads (overrides SHAPEFUSE_THREADS and the config file).
    #[arg(long, global = true)]
    threads: Option<usize>,

    /// Print a JSON report on stdout.
    #[arg(long, global = true)]
    json: bool,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Compute gating masks and gated inputs for one pair or a directory of pairs.
    Fuse(FuseArgs),
    /// Build multi-label and box-mask targets from an annotation file.
    Targets(TargetsArgs),
    /// Evaluate the core distillation loss over a feature manifest.
    Kd(KdArgs),
    /// Time the fusion pass.
    Bench(BenchArgs),
    /// Histogram and sparsity of a weight tensor.
    Stats(StatsArgs),
}

#[derive(Debug, Args)]
struct ShapeFlags {
    #[arg(long)]
    window: Option<usize>,
    #[arg(long)]
    k1: Option<f32>,
    #[arg(long)]
    k2: Option<f32>,
}

#[derive(Debug, Args)]
struct FuseArgs {
    #[arg(long, required_unless_present = "batch", requires = "thermal")]
    rgb: Option<PathBuf>,
    #[arg(long, requires = "rgb")]
    thermal: Option<PathBuf>,
    /// Directory with `rgb/NAME.png` and `thermal/NAME.png` pairs.
    #[arg(long, conflicts_with_all = ["rgb", "thermal"])]
    batch: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    /// Also write 8-bit PNG previews of the normalized masks.
    #[arg(long)]
    png: bool,
    #[command(flatten)]
    shape: ShapeFlags,
}

#[derive(Debug, Args)]
struct TargetsArgs {
    #[arg(long)]
    annotations: PathBuf,
    #[arg(long)]
    classes: usize,
    #[arg(long)]
    out: PathBuf,
    /// `[n_crops, c]` classifier scores to aggregate into a soft target.
    #[arg(long)]
    crop_probs: Option<PathBuf>,
    #[arg(long)]
    lambda: Option<f32>,
    #[arg(long)]
    crop_size: Option<usize>,
    #[arg(long)]
    stride: Option<usize>,
}

#[derive(Debug, Args)]
struct KdArgs {
    #[arg(long)]
    manifest: PathBuf,
    /// Student channels to sample; defaults to each level's student width.
    #[arg(long)]
    d: Option<usize>,
    #[arg(long)]
    reduction: Option<Reduction>,
    #[arg(long, default_value_t = 20)]
    bins: usize,
    #[arg(long, default_value_t = NEAR_ZERO_THRESHOLD)]
    threshold: f32,
}

#[derive(Debug, Args)]
struct BenchArgs {
    #[arg(long)]
    rgb: PathBuf,
    #[arg(long)]
    thermal: PathBuf,
    #[arg(long, default_value_t = 100)]
    iterations: usize,
    #[arg(long, default_value_t = 3)]
    warmup: usize,
    /// Count PNG decoding inside each timed pass.
    #[arg(long)]
    include_io: bool,
    /// Copies of the pair fused in the batch comparison (0 disables it).
    #[arg(long, default_value_t = 16)]
    batch_pairs: usize,
    #[command(flatten)]
    shape: ShapeFlags,
}

#[derive(Debug, Args)]
struct StatsArgs {
    #[arg(long)]
    weights: PathBuf,
    #[arg(long, default_value_t = 20)]
    bins: usize,
    #[arg(long, allow_hyphen_values = true)]
    lo: Option<f32>,
    #[arg(long, allow_hyphen_values = true)]
    hi: Option<f32>,
    #[arg(long, default_value_t = NEAR_ZERO_THRESHOLD)]
    threshold: f32,
}

/// Tunables shared by all subcommands.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub window: usize,
    pub k1: f32,
    pub k2: f32,
    pub lambda: f32,
    pub crop_size: usize,
    pub stride: usize,
    pub threads: usize,
    pub reduction: Reduction,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            window: DEFAULT_WINDOW,
            k1: DEFAULT_K1,
            k2: DEFAULT_K2,
            lambda: DEFAULT_LAMBDA,
            crop_size: DEFAULT_CROP_SIZE,
            stride: DEFAULT_CROP_STRIDE,
            threads: std::thread::available_parallelism().map_or(1, |n| n.get()),
            reduction: Reduction::Sum,
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self, Error> {
        toml::from_str(text).map_err(|e| Error::InvalidArgument(format!("config: {e}")))
    }

    pub fn shape(&self) -> ShapeConfig {
        ShapeConfig {
            k1: self.k1,
            k2: self.k2,
            window: self.window,
        }
    }

    fn apply_shape_flags(&mut self, f: &ShapeFlags) {
        self.window = f.window.unwrap_or(self.window);
        self.k1 = f.k1.unwrap_or(self.k1);
        self.k2 = f.k2.unwrap_or(self.k2);
    }
}

#[derive(Debug)]
struct CliError {
    code: i32,
    message: String,
}

impl CliError {
    fn input(e: impl std::fmt::Display) -> Self {
        Self {
            code: EXIT_INPUT,
            message: e.to_string(),
        }
    }

    fn internal(e: impl std::fmt::Display) -> Self {
        Self {
            code: EXIT_INTERNAL,
            message: e.to_string(),
        }
    }
}

type CliResult<T> = Result<T, CliError>;

fn resolve_config(cli: &Cli, env_threads: Option<String>) -> CliResult<RunConfig> {
    let mut cfg = match &cli.config {
        Some(path) => {
            let text = fs::read_to_string(path)
                .map_err(|e| CliError::input(format!("config {}: {e}", path.display())))?;
            RunConfig::from_toml(&text).map_err(CliError::input)?
        }
        None => RunConfig::default(),
    };
    if let Some(v) = env_threads {
        cfg.threads = v
            .trim()
            .parse()
            .map_err(|_| CliError::input(format!("{THREADS_ENV}={v:?} is not a count")))?;
    }
    if let Some(t) = cli.threads {
        cfg.threads = t;
    }
    if cfg.threads == 0 {
        return Err(CliError::input("thread count must be >= 1"));
    }
    Ok(cfg)
}

/// Parses `args` (including the program name), runs the command and
/// returns the process exit code.
pub fn run<I, T>(args: I, stdout: &mut dyn Write, stderr: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let text = e.render().to_string();
            let _ = if e.use_stderr() {
                write!(stderr, "{text}")
            } else {
                write!(stdout, "{text}")
            };
            return code;
        }
    };
    match execute(&cli, std::env::var(THREADS_ENV).ok(), stdout) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            let _ = writeln!(stderr, "error: {}", e.message);
            e.code
        }
    }
}

fn execute(cli: &Cli, env_threads: Option<String>, out: &mut dyn Write) -> CliResult<()> {
    let mut cfg = resolve_config(cli, env_threads)?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.threads)
        .build()
        .map_err(CliError::internal)?;
    match &cli.command {
        Command::Fuse(a) => {
            cfg.apply_shape_flags(&a.shape);
            let report = pool.install(|| cmd_fuse(a, &cfg))?;
            emit(out, cli.json, &report, print_fuse)
        }
        Command::Targets(a) => {
            cfg.lambda = a.lambda.unwrap_or(cfg.lambda);
            cfg.crop_size = a.crop_size.unwrap_or(cfg.crop_size);
            cfg.stride = a.stride.unwrap_or(cfg.stride);
            let report = cmd_targets(a, &cfg)?;
            emit(out, cli.json, &report, print_targets)
        }
        Command::Kd(a) => {
            cfg.reduction = a.reduction.unwrap_or(cfg.reduction);
            let report = pool.install(|| cmd_kd(a, &cfg))?;
            emit(out, cli.json, &report, print_kd)
        }
        Command::Bench(a) => {
            cfg.apply_shape_flags(&a.shape);
            let report = cmd_bench(a, &cfg)?;
            emit(out, cli.json, &report, print_bench)
        }
        Command::Stats(a) => {
            let report = cmd_stats(a)?;
            emit(out, cli.json, &report, print_stats)
        }
    }
}

fn emit<R: Serialize>(
    out: &mut dyn Write,
    json: bool,
    report: &R,
    text: fn(&mut dyn Write, &R) -> std::io::Result<()>,
) -> CliResult<()> {
    let res = if json {
        serde_json::to_string_pretty(report)
            .map_err(std::io::Error::other)
            .and_then(|s| writeln!(out, "{s}"))
    } else {
        text(out, report)
    };
    res.map_err(CliError::internal)
}

// ---------------------------------------------------------------- fuse

#[derive(Debug, Serialize)]
pub struct FusePairReport {
    pub name: String,
    pub height: usize,
    pub width: usize,
    pub dynamic_range: f32,
    pub mean_mask_rgb: f64,
    pub mean_mask_thermal: f64,
    pub outputs: Vec<String>,
    pub timings_ms: crate::shape::StageTimings,
}

#[derive(Debug, Serialize)]
pub struct FuseReport {
    pub command: &'static str,
    pub window: usize,
    pub k1: f32,
    pub k2: f32,
    pub pairs: Vec<FusePairReport>,
}

fn mean(t: &Tensor) -> f64 {
    t.data().iter().map(|&v| v as f64).sum::<f64>() / t.len() as f64
}

fn fuse_one(
    name: &str,
    rgb: &Path,
    thermal: &Path,
    out_dir: &Path,
    png: bool,
    cfg: &RunConfig,
) -> CliResult<FusePairReport> {
    let pair = load_image_pair(rgb, thermal).map_err(CliError::input)?;
    let result = fuse(&pair, &cfg.shape()).map_err(CliError::input)?;
    fs::create_dir_all(out_dir)
        .map_err(|e| CliError::internal(format!("{}: {e}", out_dir.display())))?;

    let tensors = [
        ("gated_rgb.zten", &result.gated_rgb),
        ("gated_thermal.zten", &result.gated_t),
        ("mask_rgb.zten", &result.masks.m_rgb),
        ("mask_thermal.zten", &result.masks.m_t),
        ("mask_raw_rgb.zten", &result.masks.m_raw_rgb),
        ("mask_raw_thermal.zten", &result.masks.m_raw_t),
    ];
    let mut outputs = Vec::new();
    for (file, t) in tensors {
        let path = out_dir.join(file);
        write_tensor(t, &path).map_err(CliError::internal)?;
        outputs.push(path.display().to_string());
    }
    if png {
        for (file, t) in [
            ("mask_rgb.png", &result.masks.m_rgb),
            ("mask_thermal.png", &result.masks.m_t),
        ] {
            let path = out_dir.join(file);
            write_mask_png(t, &path).map_err(CliError::internal)?;
            outputs.push(path.display().to_string());
        }
    }
    Ok(FusePairReport {
        name: name.to_string(),
        height: pair.height(),
        width: pair.width(),
        dynamic_range: result.field.dynamic_range,
        mean_mask_rgb: mean(&result.masks.m_rgb),
        mean_mask_thermal: mean(&result.masks.m_t),
        outputs,
        timings_ms: result.timings,
    })
}

fn batch_pairs(dir: &Path) -> CliResult<Vec<(String, PathBuf, PathBuf)>> {
    let rgb_dir = dir.join("rgb");
    let t_dir = dir.join("thermal");
    let entries = fs::read_dir(&rgb_dir)
        .map_err(|e| CliError::input(format!("{}: {e}", rgb_dir.display())))?;
    let mut names: Vec<String> = entries
        .filter_map(|e| e.ok())
        .map(|e| e.file_name().to_string_lossy().into_owned())
        .filter(|n| n.to_ascii_lowercase().ends_with(".png"))
        .collect();
    names.sort();
    if names.is_empty() {
        return Err(CliError::input(format!(
            "no PNG files in {}",
            rgb_dir.display()
        )));
    }
    names
        .into_iter()
        .map(|n| {
            let t = t_dir.join(&n);
            if !t.is_file() {
                return Err(CliError::input(format!(
                    "missing thermal image {}",
                    t.display()
                )));
            }
            let stem = Path::new(&n)
                .file_stem()
                .map(|s| s.to_string_lossy().into_owned())
                .unwrap_or_else(|| n.clone());
            Ok((stem, rgb_dir.join(&n), t))
        })
        .collect()
}

fn cmd_fuse(a: &FuseArgs, cfg: &RunConfig) -> CliResult<FuseReport> {
    let pairs = match (&a.batch, &a.rgb, &a.thermal) {
        (Some(dir), _, _) => {
            let found = batch_pairs(dir)?;
            found
                .par_iter()
                .map(|(name, rgb, t)| fuse_one(name, rgb, t, &a.out.join(name), a.png, cfg))
                .collect::<CliResult<Vec<_>>>()?
        }
        (None, Some(rgb), Some(t)) => vec![fuse_one("pair", rgb, t, &a.out, a.png, cfg)?],
        _ => {
            return Err(CliError::input(
                "fuse needs --rgb and --thermal, or --batch",
            ))
        }
    };
    Ok(FuseReport {
        command: "fuse",
        window: cfg.window,
        k1: cfg.k1,
        k2: cfg.k2,
        pairs,
    })
}

fn print_fuse(out: &mut dyn Write, r: &FuseReport) -> std::io::Result<()> {
    for p in &r.pairs {
        writeln!(
            out,
            "{}: {}x{}  L={:.4}  mean m_rgb={:.4} m_t={:.4}",
            p.name, p.width, p.height, p.dynamic_range, p.mean_mask_rgb, p.mean_mask_thermal
        )?;
        let t = &p.timings_ms;
        writeln!(
            out,
            "  gradients {:.3} ms | window stats {:.3} ms | masks {:.3} ms | gating {:.3} ms",
            t.gradients.as_secs_f64() * 1e3,
            t.window_stats.as_secs_f64() * 1e3,
            t.masks.as_secs_f64() * 1e3,
            t.gating.as_secs_f64() * 1e3,
        )?;
        for o in &p.outputs {
            writeln!(out, "  wrote {o}")?;
        }
    }
    Ok(())
}

// ------------------------------------------------------------- targets

#[derive(Debug, Serialize)]
pub struct SoftTargetReport {
    pub lambda: f32,
    pub q_hat: Vec<f32>,
    pub q_tilde: Vec<f32>,
}

#[derive(Debug, Serialize)]
pub struct TargetsReport {
    pub command: &'static str,
    pub width: usize,
    pub height: usize,
    pub classes: usize,
    pub boxes: usize,
    pub q: Vec<f32>,
    pub mask_ones_per_class: Vec<usize>,
    /// Crop windows for the divide-and-aggregate classifier; `None` when
    /// the image is smaller than one crop.
    pub crops: Option<usize>,
    pub soft_target: Option<SoftTargetReport>,
    pub outputs: Vec<String>,
}

fn cmd_targets(a: &TargetsArgs, cfg: &RunConfig) -> CliResult<TargetsReport> {
    let ann = ImageAnnotations::load(&a.annotations).map_err(CliError::input)?;
    let q = build_multilabel(&ann.boxes, a.classes).map_err(CliError::input)?;
    let mask =
        rasterize_boxes(&ann.boxes, a.classes, ann.height, ann.width).map_err(CliError::input)?;
    let grid = crop_grid(ann.height, ann.width, cfg.crop_size, cfg.stride).ok();

    let soft = match &a.crop_probs {
        Some(path) => {
            let probs = read_tensor(path).map_err(CliError::input)?;
            if let (Some(g), Some(&n)) = (&grid, probs.dims().first()) {
                if n != g.crops.len() {
                    return Err(CliError::input(format!(
                        "{} has {n} crop rows, the crop grid has {}",
                        path.display(),
                        g.crops.len()
                    )));
                }
            }
            let q_hat = da_clip_aggregate(&probs).map_err(CliError::input)?;
            let st = soft_target(&q, &q_hat, cfg.lambda).map_err(CliError::input)?;
            Some((q_hat, st))
        }
        None => None,
    };

    fs::create_dir_all(&a.out)
        .map_err(|e| CliError::internal(format!("{}: {e}", a.out.display())))?;
    let mut outputs = Vec::new();
    let mut write = |file: &str, t: &Tensor| -> CliResult<()> {
        let path = a.out.join(file);
        write_tensor(t, &path).map_err(CliError::internal)?;
        outputs.push(path.display().to_string());
        Ok(())
    };
    write("q.zten", &q.q)?;
    write("g.zten", &mask.g)?;
    if let Some((q_hat, st)) = &soft {
        write("q_hat.zten", q_hat)?;
        write("q_soft.zten", &st.q_tilde)?;
    }

    Ok(TargetsReport {
        command: "targets",
        width: ann.width,
        height: ann.height,
        classes: a.classes,
        boxes: ann.boxes.len(),
        q: q.q.data().to_vec(),
        mask_ones_per_class: (0..a.classes)
            .map(|c| mask.ones(c))
            .collect::<Result<_, _>>()
            .map_err(CliError::internal)?,
        crops: grid.map(|g| g.crops.len()),
        soft_target: soft.map(|(q_hat, st)| SoftTargetReport {
            lambda: st.lambda,
            q_hat: q_hat.data().to_vec(),
            q_tilde: st.q_tilde.data().to_vec(),
        }),
        outputs,
    })
}

fn print_targets(out: &mut dyn Write, r: &TargetsReport) -> std::io::Result<()> {
    writeln!(
        out,
        "{}x{} image, {} boxes, {} classes",
        r.width, r.height, r.boxes, r.classes
    )?;
    writeln!(out, "q = {:?}", r.q)?;
    writeln!(out, "mask pixels per class = {:?}", r.mask_ones_per_class)?;
    match r.crops {
        Some(n) => writeln!(out, "crop grid: {n} windows")?,
        None => writeln!(out, "crop grid: image smaller than one crop")?,
    }
    if let Some(s) = &r.soft_target {
        writeln!(out, "q_hat = {:?}", s.q_hat)?;
        writeln!(out, "q_tilde (lambda {}) = {:?}", s.lambda, s.q_tilde)?;
    }
    for o in &r.outputs {
        writeln!(out, "wrote {o}")?;
    }
    Ok(())
}

// ------------------------------------------------------------------ kd

#[derive(Debug, Serialize)]
pub struct KdLevelReport {
    pub index: usize,
    pub c_out: usize,
    pub c_in: usize,
    pub d: usize,
    pub loss: f64,
    pub near_zero_fraction: f64,
    pub histogram: Histogram,
}

#[derive(Debug, Serialize)]
pub struct KdReport {
    pub command: &'static str,
    pub reduction: Reduction,
    pub threshold: f32,
    pub levels: Vec<KdLevelReport>,
    pub total: f64,
    /// Over all head weights of all levels.
    pub near_zero_fraction: f64,
}

fn symmetric_range(head: &TeacherHead) -> (f32, f32) {
    let m = head
        .weights()
        .data()
        .iter()
        .fold(0.0f32, |m, v| m.max(v.abs()));
    if m > 0.0 {
        (-m, m)
    } else {
        (-1.0, 1.0)
    }
}

fn cmd_kd(a: &KdArgs, cfg: &RunConfig) -> CliResult<KdReport> {
    let levels = load_manifest(&a.manifest).map_err(CliError::input)?;
    let losses = distill_levels(&levels, a.d, cfg.reduction).map_err(CliError::input)?;
    let mut near = 0.0f64;
    let mut count = 0usize;
    let reports = levels
        .iter()
        .zip(&losses.per_level)
        .enumerate()
        .map(|(index, (lvl, &loss))| {
            let (lo, hi) = symmetric_range(&lvl.head);
            let frac = near_zero_fraction(&lvl.head, a.threshold);
            let n = lvl.head.weights().len();
            near += frac * n as f64;
            count += n;
            Ok(KdLevelReport {
                index,
                c_out: lvl.head.out_channels(),
                c_in: lvl.head.in_channels(),
                d: a.d.unwrap_or(lvl.x_s.dims()[0]),
                loss,
                near_zero_fraction: frac,
                histogram: weight_histogram(&lvl.head, a.bins, lo, hi).map_err(CliError::input)?,
            })
        })
        .collect::<CliResult<Vec<_>>>()?;
    Ok(KdReport {
        command: "kd",
        reduction: cfg.reduction,
        threshold: a.threshold,
        levels: reports,
        total: losses.total,
        near_zero_fraction: near / count as f64,
    })
}

fn print_histogram(out: &mut dyn Write, h: &Histogram) -> std::io::Result<()> {
    let peak = h.counts.iter().copied().max().unwrap_or(0).max(1);
    let width = (h.hi - h.lo) / h.counts.len() as f32;
    for (i, &c) in h.counts.iter().enumerate() {
        let lo = h.lo + i as f32 * width;
        let bar = "#".repeat((40 * c / peak) as usize);
        writeln!(out, "    [{:>9.4}, {:>9.4}) {:>8} {bar}", lo, lo + width, c)?;
    }
    Ok(())
}

fn print_kd(out: &mut dyn Write, r: &KdReport) -> std::io::Result<()> {
    for l in &r.levels {
        writeln!(
            out,
            "level {}: W [{} x {}], d = {}, loss = {:.6e}, |w| < {} for {:.1}%",
            l.index,
            l.c_out,
            l.c_in,
            l.d,
            l.loss,
            r.threshold,
            100.0 * l.near_zero_fraction
        )?;
        print_histogram(out, &l.histogram)?;
    }
    writeln!(out, "total ({:?}) = {:.6e}", r.reduction, r.total)?;
    writeln!(
        out,
        "near-zero weights overall: {:.1}%",
        100.0 * r.near_zero_fraction
    )
}

// --------------------------------------------------------------- bench

#[derive(Debug, Serialize)]
pub struct BenchCliReport {
    pub command: &'static str,
    pub threads: usize,
    #[serde(flatten)]
    pub report: BenchReport,
}

fn cmd_bench(a: &BenchArgs, cfg: &RunConfig) -> CliResult<BenchCliReport> {
    let pair = load_image_pair(&a.rgb, &a.thermal).map_err(CliError::input)?;
    let opts = BenchOptions {
        iterations: a.iterations,
        warmup: a.warmup,
        include_io: a.include_io,
        batch_pairs: a.batch_pairs,
        batch_threads: cfg.threads,
        config: cfg.shape(),
        ..Default::default()
    };
    let report = run_bench(&pair, Some((&a.rgb, &a.thermal)), &opts).map_err(CliError::input)?;
    Ok(BenchCliReport {
        command: "bench",
        threads: cfg.threads,
        report,
    })
}

fn print_bench(out: &mut dyn Write, r: &BenchCliReport) -> std::io::Result<()> {
    let b = &r.report;
    let s = &b.single_thread;
    writeln!(
        out,
        "{}x{} pair, {} iterations ({} warmup), single thread{}",
        b.width,
        b.height,
        b.iterations,
        b.warmup,
        if b.include_io {
            ", decode included"
        } else {
            ""
        }
    )?;
    writeln!(
        out,
        "  min {:.3} ms | median {:.3} ms | p95 {:.3} ms | mean {:.3} ms",
        s.min_ms, s.median_ms, s.p95_ms, s.mean_ms
    )?;
    writeln!(out, "  {:.2} Mpixel/s", b.pixels_per_second / 1e6)?;
    let st = &b.stages;
    if let Some(d) = st.decode_ms {
        writeln!(out, "  decode       {d:.3} ms")?;
    }
    writeln!(out, "  gradients    {:.3} ms", st.gradients_ms)?;
    writeln!(out, "  window stats {:.3} ms", st.window_stats_ms)?;
    writeln!(out, "  masks        {:.3} ms", st.masks_ms)?;
    writeln!(out, "  gating       {:.3} ms", st.gating_ms)?;
    if let Some(batch) = &b.batch {
        writeln!(
            out,
            "batch of {}: 1 thread {:.1} ms, {} threads {:.1} ms, speedup {:.2}x ({} cores available)",
            batch.pairs,
            batch.serial_ms,
            batch.threads,
            batch.parallel_ms,
            batch.speedup,
            batch.available_cores
        )?;
    }
    Ok(())
}

// --------------------------------------------------------------- stats

#[derive(Debug, Serialize)]
pub struct StatsReport {
    pub command: &'static str,
    pub dims: Vec<usize>,
    pub count: usize,
    pub min: f32,
    pub max: f32,
    pub mean_abs: f64,
    pub threshold: f32,
    pub near_zero_fraction: f64,
    pub histogram: Histogram,
}

fn cmd_stats(a: &StatsArgs) -> CliResult<StatsReport> {
    let w = read_tensor(&a.weights).map_err(CliError::input)?;
    let dims = w.dims().to_vec();
    let flat = w.reshape(&[1, w.len()]).map_err(CliError::internal)?;
    let head = TeacherHead::new(flat).map_err(CliError::input)?;
    let (dlo, dhi) = symmetric_range(&head);
    let histogram = weight_histogram(&head, a.bins, a.lo.unwrap_or(dlo), a.hi.unwrap_or(dhi))
        .map_err(CliError::input)?;
    let data = head.weights().data();
    Ok(StatsReport {
        command: "stats",
        dims,
        count: data.len(),
        min: head.weights().min_value(),
        max: head.weights().max_value(),
        mean_abs: data.iter().map(|v| v.abs() as f64).sum::<f64>() / data.len() as f64,
        threshold: a.threshold,
        near_zero_fraction: near_zero_fraction(&head, a.threshold),
        histogram,
    })
}

fn print_stats(out: &mut dyn Write, r: &StatsReport) -> std::io::Result<()> {
    writeln!(
        out,
        "{:?}: {} values in [{}, {}], mean |w| {:.4e}",
        r.dims, r.count, r.min, r.max, r.mean_abs
    )?;
    writeln!(
        out,
        "|w| < {}: {:.1}%",
        r.threshold,
        100.0 * r.near_zero_fraction
    )?;
    print_histogram(out, &r.histogram)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn parse(args: &[&str]) -> Cli {
        Cli::try_parse_from(args).unwrap()
    }

    #[test]
    fn default_tunables() {
        let c = RunConfig::default();
        assert_eq!((c.k1, c.k2, c.window), (0.01, 0.03, 7));
        assert_eq!(c.lambda, 0.1);
        assert_eq!((c.crop_size, c.stride), (224, 112));
        assert_eq!(c.reduction, Reduction::Sum);
    }

    #[test]
    fn thread_precedence() {
        let cli = parse(&["shapefuse", "stats", "--weights", "w.zten"]);
        assert_eq!(resolve_config(&cli, Some("3".into())).unwrap().threads, 3);
        let cli = parse(&[
            "shapefuse",
            "--threads",
            "2",
            "stats",
            "--weights",
            "w.zten",
        ]);
        assert_eq!(resolve_config(&cli, Some("3".into())).unwrap().threads, 2);
        assert_eq!(
            resolve_config(&cli, Some("x".into())).unwrap_err().code,
            EXIT_INPUT
        );
    }

    #[test]
    fn toml_config_partial_and_strict() {
        let c = RunConfig::from_toml("window = 5\nreduction = \"mean\"\n").unwrap();
        assert_eq!(c.window, 5);
        assert_eq!(c.reduction, Reduction::Mean);
        assert_eq!(c.k2, 0.03);
        assert!(RunConfig::from_toml("windw = 5").is_err());
    }

    #[test]
    fn usage_errors_exit_one() {
        let (mut o, mut e) = (Vec::new(), Vec::new());
        assert_eq!(run(["shapefuse", "frobnicate"], &mut o, &mut e), EXIT_USAGE);
        assert_eq!(run(["shapefuse", "kd"], &mut o, &mut e), EXIT_USAGE);
        assert_eq!(run(["shapefuse", "--help"], &mut o, &mut e), EXIT_OK);
    }
}
