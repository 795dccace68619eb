//! `bilgrid`: edge-aware filtering, guided upsampling, keypoint registration,
//! warping, metrics and benchmarks on the command line.
//!
//! Exit codes: 0 ok, 2 usage, 3 I/O, 4 degenerate input, 5 non-convergence.
//! Reports go to stdout as JSON; progress and timings go to stderr.

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use bilgrid::deform::{integrate_velocity, warp, DEFAULT_STEPS};
use bilgrid::io::{read_field, read_image, read_keypoints, read_label_mask, read_tensor, write_field, write_image, write_tensor};
use bilgrid::metrics::{dice, hd95, mse, relative_rms, sdlogj, smoothness, tre};
use bilgrid::pipeline::{bilateral_filter, brute_force_bilateral, joint_bilateral_upsample, make_guidance};
use bilgrid::solver::{field_residual_report, keypoint_field};
use bilgrid::synth::piecewise_constant;
use bilgrid::{Error, GridParams, GuidanceMode, Image, InpaintConfig, Kernel, Tensor};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::{json, Map, Value};

const THREADS_ENV: &str = "BILGRID_THREADS";

#[derive(Parser)]
#[command(name = "bilgrid", version, about = "Bilateral-grid filtering and keypoint registration")]
struct Cli {
    /// Worker threads (default: $BILGRID_THREADS, else all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Cross-bilateral filter via splat, blur and slice.
    Filter(FilterArgs),
    /// Joint bilateral upsampling of a low-resolution tensor.
    Upsample(UpsampleArgs),
    /// Dense displacement field from keypoint pairs.
    Register(RegisterArgs),
    /// Warp an image with a displacement field.
    Warp(WarpArgs),
    /// Evaluate segmentation and deformation metrics.
    Metrics(MetricsArgs),
    /// Time the grid filter against the brute-force filter.
    Bench(BenchArgs),
}

#[derive(Args, Clone)]
struct GridFlags {
    /// Spatial sampling rate s_s (pixels per cell).
    #[arg(long, default_value_t = 8.0)]
    ss: f64,
    /// Range sampling rate s_r.
    #[arg(long, default_value_t = 0.1)]
    sr: f64,
    /// Gaussian blur sigma in grid cells.
    #[arg(long, default_value_t = 1.0)]
    sigma: f64,
    #[arg(long, value_enum, default_value_t = KernelArg::Linear)]
    splat_kernel: KernelArg,
    #[arg(long, value_enum, default_value_t = KernelArg::Linear)]
    slice_kernel: KernelArg,
}

impl GridFlags {
    fn params(&self) -> Result<GridParams, Error> {
        let p = GridParams::new(self.ss, self.sr, self.sigma)
            .with_kernels(self.splat_kernel.into(), self.slice_kernel.into());
        p.validate()?;
        Ok(p)
    }
}

#[derive(Copy, Clone, ValueEnum)]
enum KernelArg {
    Nearest,
    Linear,
}

impl From<KernelArg> for Kernel {
    fn from(k: KernelArg) -> Self {
        match k {
            KernelArg::Nearest => Kernel::Nearest,
            KernelArg::Linear => Kernel::Linear,
        }
    }
}

#[derive(Copy, Clone, ValueEnum)]
enum GuidanceArg {
    Intensity,
    Luminance,
    External,
}

impl From<GuidanceArg> for GuidanceMode {
    fn from(g: GuidanceArg) -> Self {
        match g {
            GuidanceArg::Intensity => GuidanceMode::Intensity,
            GuidanceArg::Luminance => GuidanceMode::Luminance,
            GuidanceArg::External => GuidanceMode::External,
        }
    }
}

#[derive(Args)]
struct FilterArgs {
    #[arg(long = "in")]
    input: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Guidance image (default: the input itself).
    #[arg(long)]
    guide: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = GuidanceArg::Intensity)]
    guidance: GuidanceArg,
    #[command(flatten)]
    grid: GridFlags,
}

#[derive(Args)]
struct UpsampleArgs {
    /// Low-resolution tensor, `[channels, small...]` or `[small...]`.
    #[arg(long)]
    low: PathBuf,
    /// Full-resolution guidance image.
    #[arg(long)]
    guide: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    scale: usize,
    #[arg(long, value_enum, default_value_t = GuidanceArg::Intensity)]
    guidance: GuidanceArg,
    #[command(flatten)]
    grid: GridFlags,
}

#[derive(Args)]
struct RegisterArgs {
    #[arg(long)]
    fixed: PathBuf,
    /// Keypoint pairs, one `fixed... moving...` row per line.
    #[arg(long)]
    keypoints: PathBuf,
    /// Output displacement field (tensor plus `.json` sidecar).
    #[arg(long)]
    out: PathBuf,
    #[arg(long, requires = "warped")]
    moving: Option<PathBuf>,
    #[arg(long, requires = "moving")]
    warped: Option<PathBuf>,
    /// Also write the JSON report here.
    #[arg(long)]
    report: Option<PathBuf>,
    /// Treat the field as a stationary velocity and integrate it.
    #[arg(long)]
    diffeo: bool,
    #[arg(long, default_value_t = DEFAULT_STEPS)]
    steps: u32,
    #[arg(long, default_value_t = InpaintConfig::default().tol)]
    tol: f64,
    #[arg(long, default_value_t = InpaintConfig::default().max_iter)]
    max_iter: usize,
    #[arg(long, default_value_t = InpaintConfig::default().weight_threshold)]
    weight_threshold: f64,
    #[arg(long, default_value_t = InpaintConfig::default().range_coupling)]
    range_coupling: f64,
    #[command(flatten)]
    grid: GridFlags,
}

#[derive(Args)]
struct WarpArgs {
    #[arg(long = "in")]
    input: PathBuf,
    #[arg(long)]
    field: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Copy, Clone, PartialEq, Eq, ValueEnum)]
enum MetricArg {
    Dice,
    Hd95,
    Sdlogj,
    Folds,
    Tre,
    Mse,
    Smoothness,
}

#[derive(Args)]
struct MetricsArgs {
    /// Metrics to compute (default: all whose inputs are given).
    #[arg(long, value_enum, value_delimiter = ',')]
    metrics: Vec<MetricArg>,
    #[arg(long)]
    mask_a: Option<PathBuf>,
    #[arg(long)]
    mask_b: Option<PathBuf>,
    /// Labels for Dice/HD95 (default: all foreground labels).
    #[arg(long, value_delimiter = ',')]
    labels: Vec<u32>,
    #[arg(long)]
    field: Option<PathBuf>,
    /// Region for SDlogJ (default: interior voxels).
    #[arg(long)]
    jacobian_mask: Option<PathBuf>,
    #[arg(long)]
    keypoints: Option<PathBuf>,
    #[arg(long)]
    image_a: Option<PathBuf>,
    #[arg(long)]
    image_b: Option<PathBuf>,
}

#[derive(Args)]
struct BenchArgs {
    #[arg(long, default_value_t = 512)]
    size: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Brute-force spatial sigma in pixels.
    #[arg(long, default_value_t = 16.0)]
    sigma_s: f64,
    /// Brute-force range sigma.
    #[arg(long, default_value_t = 0.1)]
    sigma_r: f64,
    #[arg(long, value_delimiter = ',', default_values_t = [2.0, 4.0, 8.0, 16.0])]
    rates: Vec<f64>,
    #[arg(long, default_value_t = 12)]
    regions: usize,
    #[arg(long, default_value_t = 0.05)]
    noise: f64,
    /// Timing repetitions; the minimum is reported.
    #[arg(long, default_value_t = 3)]
    repeats: usize,
}

/// Failure with its exit code.
struct Failure {
    code: u8,
    message: String,
}

impl Failure {
    fn usage(message: impl Into<String>) -> Self {
        Failure {
            code: 2,
            message: message.into(),
        }
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match &e {
            Error::Io(_)
            | Error::Json(_)
            | Error::MalformedHeader(_)
            | Error::Truncated { .. }
            | Error::UnsupportedDtype(_)
            | Error::UnsupportedFormat(_)
            | Error::UnsupportedBitDepth(_)
            | Error::Codec(_)
            | Error::RaggedRow { .. }
            | Error::NonNumeric { .. }
            | Error::BadColumnCount { .. } => 3,
            Error::DegenerateGuidance
            | Error::GuidanceOutOfRange(_)
            | Error::NoConstraints
            | Error::KeypointOutOfExtent { .. }
            | Error::LabelAbsent(_) => 4,
            Error::InvalidShape(_)
            | Error::ShapeMismatch { .. }
            | Error::LengthMismatch { .. }
            | Error::InvalidParameter(_)
            | Error::ScaleMismatch(_) => 2,
        };
        Failure {
            code,
            message: e.to_string(),
        }
    }
}

type CmdResult = Result<u8, Failure>;

fn require_exists(paths: &[&Path]) -> Result<(), Failure> {
    for p in paths {
        if !p.exists() {
            return Err(Failure {
                code: 3,
                message: format!("{}: no such file", p.display()),
            });
        }
    }
    Ok(())
}

fn shape_string(shape: &[usize]) -> String {
    shape.iter().map(|e| e.to_string()).collect::<Vec<_>>().join("x")
}

fn print_json(v: &Value) {
    println!("{}", serde_json::to_string_pretty(v).expect("serializable"));
}

fn load_guidance(image: &Image, guide: Option<&Path>, mode: GuidanceArg) -> Result<Tensor, Failure> {
    let source = match guide {
        Some(p) => read_image(p)?,
        None => image.clone(),
    };
    if source.spatial_shape() != image.spatial_shape() {
        return Err(Failure::usage(format!(
            "guidance extent {:?} differs from image extent {:?}",
            source.spatial_shape(),
            image.spatial_shape()
        )));
    }
    Ok(make_guidance(&source, mode.into())?)
}

fn cmd_filter(a: &FilterArgs) -> CmdResult {
    let params = a.grid.params()?;
    require_exists(&[&a.input])?;
    if let Some(g) = &a.guide {
        require_exists(&[g])?;
    }
    let image = read_image(&a.input)?;
    let guidance = load_guidance(&image, a.guide.as_deref(), a.guidance)?;
    let start = Instant::now();
    let out = bilateral_filter(&image, &guidance, &params)?;
    let elapsed = start.elapsed();
    let shape = params.grid_shape(image.spatial_shape());
    eprintln!(
        "grid {} (range extent {}), filtered in {:.1} ms",
        shape_string(&shape),
        params.range_extent(),
        elapsed.as_secs_f64() * 1e3
    );
    write_image(&out, &a.out)?;
    Ok(0)
}

fn cmd_upsample(a: &UpsampleArgs) -> CmdResult {
    let params = a.grid.params()?;
    if a.scale == 0 {
        return Err(Failure::usage("--scale must be >= 1"));
    }
    require_exists(&[&a.low, &a.guide])?;
    let guide = read_image(&a.guide)?;
    let guidance = load_guidance(&guide, None, a.guidance)?;
    let low = read_tensor(&a.low)?;
    let low = if low.rank() == guidance.rank() {
        let mut shape = vec![1];
        shape.extend_from_slice(low.shape());
        low.reshape(shape)?
    } else {
        low
    };
    let start = Instant::now();
    let out = joint_bilateral_upsample(&low, &guidance, &params, a.scale)?;
    eprintln!(
        "grid {}, upsampled {} -> {} in {:.1} ms",
        shape_string(&params.grid_shape(guidance.shape())),
        shape_string(low.trailing_shape()),
        shape_string(out.trailing_shape()),
        start.elapsed().as_secs_f64() * 1e3
    );
    write_tensor(&out, &a.out)?;
    Ok(0)
}

fn cmd_register(a: &RegisterArgs) -> CmdResult {
    let params = a.grid.params()?;
    let cfg = InpaintConfig {
        tol: a.tol,
        max_iter: a.max_iter,
        weight_threshold: a.weight_threshold,
        range_coupling: a.range_coupling,
    };
    cfg.validate()?;
    if a.steps == 0 || a.steps > 30 {
        return Err(Failure::usage("--steps must lie in 1..=30"));
    }
    require_exists(&[&a.fixed, &a.keypoints])?;
    if let Some(m) = &a.moving {
        require_exists(&[m])?;
    }
    let fixed = read_image(&a.fixed)?;
    let kps = read_keypoints(&a.keypoints)?;
    if !kps.is_empty() && kps.dim() != fixed.spatial_shape().len() {
        return Err(Failure::usage(format!(
            "{}-D keypoints for a {}-D image",
            kps.dim(),
            fixed.spatial_shape().len()
        )));
    }
    let start = Instant::now();
    let reg = keypoint_field(&kps, &fixed, &params, &cfg)?;
    let field = if a.diffeo {
        integrate_velocity(&reg.field, a.steps)?
    } else {
        reg.field
    };
    eprintln!(
        "grid {}, {} keypoints, {} iterations, solved in {:.1} ms",
        shape_string(reg.solve.grid.grid_shape()),
        kps.len(),
        reg.solve.iterations,
        start.elapsed().as_secs_f64() * 1e3
    );
    write_field(&field, &a.out)?;
    if let (Some(m), Some(w)) = (&a.moving, &a.warped) {
        let moving = read_image(m)?;
        write_image(&warp(&moving, &field)?, w)?;
    }

    let solver = field_residual_report(&reg.solve, &cfg);
    let tre = tre(&field, &kps)?;
    let report = json!({
        "grid_shape": reg.solve.grid.grid_shape(),
        "keypoints": kps.len(),
        "iterations": solver.iterations,
        "converged": solver.converged,
        "warning": solver.warning,
        "residual": reg.solve.residual,
        "max_laplace_residual": solver.max_laplace_residual,
        "max_constraint_violation": solver.max_constraint_violation,
        "constrained_cells": solver.constrained_cells,
        "free_cells": solver.free_cells,
        "channel_min": solver.channel_min,
        "channel_max": solver.channel_max,
        "diffeo": a.diffeo,
        "steps": if a.diffeo { Some(a.steps) } else { None },
        "tre_mean": tre.mean,
        "tre": tre.per_landmark,
    });
    if let Some(p) = &a.report {
        std::fs::write(p, serde_json::to_string_pretty(&report).expect("serializable")).map_err(Error::from)?;
    }
    print_json(&report);
    if solver.converged {
        Ok(0)
    } else {
        eprintln!("warning: solver stopped at max_iter without converging");
        Ok(5)
    }
}

fn cmd_warp(a: &WarpArgs) -> CmdResult {
    require_exists(&[&a.input, &a.field])?;
    let image = read_image(&a.input)?;
    let field = read_field(&a.field)?;
    let start = Instant::now();
    let out = warp(&image, &field)?;
    eprintln!("warped {} in {:.1} ms", shape_string(image.spatial_shape()), start.elapsed().as_secs_f64() * 1e3);
    write_image(&out, &a.out)?;
    Ok(0)
}

fn cmd_metrics(a: &MetricsArgs) -> CmdResult {
    let masks = a.mask_a.is_some() && a.mask_b.is_some();
    let field = a.field.is_some();
    let available = |m: MetricArg| match m {
        MetricArg::Dice | MetricArg::Hd95 => masks,
        MetricArg::Sdlogj | MetricArg::Folds | MetricArg::Smoothness => field,
        MetricArg::Tre => field && a.keypoints.is_some(),
        MetricArg::Mse => a.image_a.is_some() && a.image_b.is_some(),
    };
    let all = [
        MetricArg::Dice,
        MetricArg::Hd95,
        MetricArg::Sdlogj,
        MetricArg::Folds,
        MetricArg::Tre,
        MetricArg::Mse,
        MetricArg::Smoothness,
    ];
    let selected: Vec<MetricArg> = if a.metrics.is_empty() {
        all.into_iter().filter(|&m| available(m)).collect()
    } else {
        a.metrics.clone()
    };
    if selected.is_empty() {
        return Err(Failure::usage("no metric selected and no inputs given"));
    }
    if let Some(&m) = selected.iter().find(|&&m| !available(m)) {
        let name = m.to_possible_value().expect("named").get_name().to_string();
        return Err(Failure::usage(format!("metric {name} lacks its required inputs")));
    }
    let wants = |m: MetricArg| selected.contains(&m);
    let paths: Vec<&Path> = [&a.mask_a, &a.mask_b, &a.field, &a.jacobian_mask, &a.keypoints, &a.image_a, &a.image_b]
        .into_iter()
        .flatten()
        .map(PathBuf::as_path)
        .collect();
    require_exists(&paths)?;

    let mut out = Map::new();
    if wants(MetricArg::Dice) || wants(MetricArg::Hd95) {
        let ma = read_label_mask(a.mask_a.as_ref().expect("checked"))?;
        let mb = read_label_mask(a.mask_b.as_ref().expect("checked"))?;
        let score = dice(&ma, &mb, &a.labels)?;
        if wants(MetricArg::Dice) {
            out.insert("dice".into(), json!(score.mean));
        }
        if wants(MetricArg::Hd95) {
            let labels: Vec<u32> = score.per_label.iter().map(|p| p.0).collect();
            if labels.is_empty() {
                return Err(Failure::from(Error::LabelAbsent(0)));
            }
            let mut total = 0.0;
            for &l in &labels {
                total += hd95(&ma, &mb, l)?;
            }
            out.insert("hd95".into(), json!(total / labels.len() as f64));
        }
    }
    if field {
        let u = read_field(a.field.as_ref().expect("checked"))?;
        if wants(MetricArg::Sdlogj) || wants(MetricArg::Folds) {
            let mask = a.jacobian_mask.as_ref().map(read_label_mask).transpose()?;
            let stats = sdlogj(&u, mask.as_ref())?;
            if wants(MetricArg::Sdlogj) {
                out.insert("sdlogj".into(), json!(stats.sdlogj));
            }
            if wants(MetricArg::Folds) {
                out.insert("folds".into(), json!(stats.folds));
            }
        }
        if wants(MetricArg::Tre) {
            let kps = read_keypoints(a.keypoints.as_ref().expect("checked"))?;
            out.insert("tre".into(), json!(tre(&u, &kps)?.mean));
        }
        if wants(MetricArg::Smoothness) {
            out.insert("smoothness".into(), json!(smoothness(&u)));
        }
    }
    if wants(MetricArg::Mse) {
        let ia = read_image(a.image_a.as_ref().expect("checked"))?;
        let ib = read_image(a.image_b.as_ref().expect("checked"))?;
        out.insert("mse".into(), json!(mse(&ia, &ib)?));
    }
    print_json(&Value::Object(out));
    Ok(0)
}

fn min_ms<T>(repeats: usize, mut f: impl FnMut() -> Result<T, Error>) -> Result<(f64, T), Error> {
    let mut best = f64::INFINITY;
    let mut last = None;
    for _ in 0..repeats.max(1) {
        let t = Instant::now();
        let v = f()?;
        best = best.min(t.elapsed().as_secs_f64() * 1e3);
        last = Some(v);
    }
    Ok((best, last.expect("at least one run")))
}

fn cmd_bench(a: &BenchArgs) -> CmdResult {
    if a.size == 0 || a.repeats == 0 || a.rates.is_empty() {
        return Err(Failure::usage("--size, --repeats and --rates must be nonzero"));
    }
    if !(a.sigma_s > 0.0) || !(a.sigma_r > 0.0) {
        return Err(Failure::usage("--sigma-s and --sigma-r must be > 0"));
    }
    let configs: Vec<GridParams> = a
        .rates
        .iter()
        .map(|&s| {
            let p = GridParams::matched(s, a.sigma_s, a.sigma_r);
            p.validate().map(|_| p)
        })
        .collect::<Result<_, _>>()?;

    let image = piecewise_constant(a.size, a.size, a.regions, a.noise, a.seed);
    let guidance = make_guidance(&image, GuidanceMode::External)?;
    let (brute_ms, reference) = min_ms(a.repeats, || brute_force_bilateral(&image, &guidance, a.sigma_s, a.sigma_r))?;
    eprintln!("brute force: {brute_ms:.1} ms");
    let mut rows = Vec::new();
    for p in &configs {
        let (ms, out) = min_ms(a.repeats, || bilateral_filter(&image, &guidance, p))?;
        let shape = p.grid_shape(image.spatial_shape());
        eprintln!("s_s {}: grid {} {ms:.1} ms", p.spatial_rate, shape_string(&shape));
        rows.push(json!({
            "spatial_rate": p.spatial_rate,
            "range_rate": p.range_rate,
            "sigma": p.sigma,
            "grid_shape": shape,
            "ms": ms,
            "speedup": brute_ms / ms,
            "relative_rms": relative_rms(&out, &reference)?,
        }));
    }
    print_json(&json!({
        "size": a.size,
        "seed": a.seed,
        "sigma_s": a.sigma_s,
        "sigma_r": a.sigma_r,
        "threads": rayon::current_num_threads(),
        "brute_force_ms": brute_ms,
        "grid": rows,
    }));
    Ok(0)
}

fn thread_count(flag: Option<usize>) -> Result<Option<usize>, Failure> {
    if let Some(n) = flag {
        return if n == 0 {
            Err(Failure::usage("--threads must be >= 1"))
        } else {
            Ok(Some(n))
        };
    }
    match std::env::var(THREADS_ENV) {
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(n) if n > 0 => Ok(Some(n)),
            _ => Err(Failure::usage(format!("{THREADS_ENV} must be a positive integer, got {v:?}"))),
        },
        Err(_) => Ok(None),
    }
}

fn run(cli: Cli) -> CmdResult {
    if let Some(n) = thread_count(cli.threads)? {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Failure::usage(e.to_string()))?;
    }
    match &cli.command {
        Command::Filter(a) => cmd_filter(a),
        Command::Upsample(a) => cmd_upsample(a),
        Command::Register(a) => cmd_register(a),
        Command::Warp(a) => cmd_warp(a),
        Command::Metrics(a) => cmd_metrics(a),
        Command::Bench(a) => cmd_bench(a),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => ExitCode::from(code),
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}
