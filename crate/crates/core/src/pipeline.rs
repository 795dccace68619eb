//! Splat, blur, slice: cross-bilateral filtering and joint bilateral
//! upsampling on a bilateral grid, plus the brute-force reference filter.
//!
//! Spatial grid coordinates are pixel-center aligned: pixel `x` maps to
//! `(x + 0.5) / s_s - 0.5`, so each grid cell covers `s_s` pixels. The range
//! coordinate is `guidance / s_r`. Both are clamped to the grid extent.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::io::Image;
use crate::kernel::Kernel;
use crate::splat::{slice_normalized, splat_homogeneous, BilateralGrid, SamplingGrid};
use crate::tensor::{strides, Tensor};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GridParams {
    /// Pixels per spatial grid cell (`s_s`).
    pub spatial_rate: f64,
    /// Guidance units per range cell (`s_r`), in `(0, 1]`.
    pub range_rate: f64,
    /// Gaussian blur standard deviation in grid cells.
    pub sigma: f64,
    pub splat_kernel: Kernel,
    pub slice_kernel: Kernel,
    pub range_extent: Option<usize>,
}

impl Default for GridParams {
    fn default() -> Self {
        GridParams {
            spatial_rate: 8.0,
            range_rate: 0.1,
            sigma: 1.0,
            splat_kernel: Kernel::Linear,
            slice_kernel: Kernel::Linear,
            range_extent: None,
        }
    }
}

impl GridParams {
    pub fn new(spatial_rate: f64, range_rate: f64, sigma: f64) -> Self {
        GridParams {
            spatial_rate,
            range_rate,
            sigma,
            ..GridParams::default()
        }
    }

    /// Parameters whose splat-blur-slice approximates a Gaussian
    /// cross-bilateral filter with `sigma_s` pixels and `sigma_r` range units:
    /// blur `sigma_s / s_s` cells on every axis, range rate scaled to match.
    pub fn matched(spatial_rate: f64, sigma_s: f64, sigma_r: f64) -> Self {
        let sigma = sigma_s / spatial_rate;
        GridParams::new(spatial_rate, (sigma_r / sigma).min(1.0), sigma)
    }

    pub fn with_kernels(mut self, splat: Kernel, slice: Kernel) -> Self {
        self.splat_kernel = splat;
        self.slice_kernel = slice;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.spatial_rate > 0.0 && self.spatial_rate.is_finite()) {
            return Err(Error::InvalidParameter(format!(
                "spatial sampling rate must be > 0, got {}",
                self.spatial_rate
            )));
        }
        if !(self.range_rate > 0.0 && self.range_rate <= 1.0) {
            return Err(Error::InvalidParameter(format!(
                "range sampling rate must lie in (0, 1], got {}",
                self.range_rate
            )));
        }
        if !(self.sigma >= 0.0 && self.sigma.is_finite()) {
            return Err(Error::InvalidParameter(format!(
                "sigma must be >= 0, got {}",
                self.sigma
            )));
        }
        if self.range_extent == Some(0) {
            return Err(Error::InvalidParameter("range extent must be >= 1".into()));
        }
        Ok(())
    }

    pub fn range_extent(&self) -> usize {
        self.range_extent
            .unwrap_or_else(|| ((1.0 / self.range_rate).round() as usize).max(1))
    }

    /// `ceil(extent / s_s)` per spatial axis followed by the range extent.
    pub fn grid_shape(&self, spatial_shape: &[usize]) -> Vec<usize> {
        let mut shape: Vec<usize> = spatial_shape
            .iter()
            .map(|&e| ((e as f64 / self.spatial_rate).ceil() as usize).max(1))
            .collect();
        shape.push(self.range_extent());
        shape
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GuidanceMode {
    /// Channel mean, min-max normalized.
    Intensity,
    /// Rec. 601 luma of an RGB image, min-max normalized.
    Luminance,
    /// Single channel used as given; must already lie in `[0, 1]`.
    External,
}

fn min_max_normalize(values: Vec<f64>, shape: &[usize]) -> Result<Tensor> {
    let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let span = hi - lo;
    if !(span > 0.0) {
        return Err(Error::DegenerateGuidance);
    }
    Tensor::new(shape.to_vec(), values.iter().map(|v| (v - lo) / span).collect())
}

fn check_unit_range(t: &Tensor) -> Result<()> {
    match t.data().iter().find(|v| !(0.0..=1.0).contains(*v)) {
        Some(&v) => Err(Error::GuidanceOutOfRange(v)),
        None => Ok(()),
    }
}

/// Builds a `[spatial...]` guidance map in `[0, 1]` from an image.
pub fn make_guidance(image: &Image, mode: GuidanceMode) -> Result<Tensor> {
    let t = image.tensor();
    let shape = image.spatial_shape();
    let n: usize = shape.iter().product();
    let c = image.channels();
    match mode {
        GuidanceMode::Intensity => {
            let values = (0..n)
                .map(|p| (0..c).map(|ch| t.channel(ch)[p]).sum::<f64>() / c as f64)
                .collect();
            min_max_normalize(values, shape)
        }
        GuidanceMode::Luminance => {
            let values = match c {
                1 => t.channel(0).to_vec(),
                3 => (0..n)
                    .map(|p| {
                        0.299 * t.channel(0)[p] + 0.587 * t.channel(1)[p] + 0.114 * t.channel(2)[p]
                    })
                    .collect(),
                _ => {
                    return Err(Error::InvalidParameter(format!(
                        "luminance guidance needs 1 or 3 channels, got {c}"
                    )))
                }
            };
            min_max_normalize(values, shape)
        }
        GuidanceMode::External => {
            if c != 1 {
                return Err(Error::InvalidParameter(format!(
                    "external guidance must have one channel, got {c}"
                )));
            }
            let g = Tensor::new(shape.to_vec(), t.channel(0).to_vec())?;
            check_unit_range(&g)?;
            Ok(g)
        }
    }
}

/// Grid coordinates for samples on a regular lattice whose pixels are
/// `pixel_scale` reference pixels wide.
fn lattice_sampling_grid(
    spatial_shape: &[usize],
    pixel_scale: f64,
    grid_shape: &[usize],
    params: &GridParams,
    guidance: &Tensor,
) -> Result<SamplingGrid> {
    if guidance.shape() != spatial_shape {
        return Err(Error::shape(spatial_shape, guidance.shape()));
    }
    check_unit_range(guidance)?;
    let rank = spatial_shape.len();
    let mut axes: Vec<Tensor> = (0..rank)
        .map(|a| {
            let hi = (grid_shape[a] - 1) as f64;
            Tensor::from_fn(spatial_shape, |idx| {
                ((idx[a] as f64 + 0.5) * pixel_scale / params.spatial_rate - 0.5).clamp(0.0, hi)
            })
        })
        .collect();
    let r_hi = (grid_shape[rank] - 1) as f64;
    axes.push(guidance.map(|g| (g / params.range_rate).clamp(0.0, r_hi)));
    SamplingGrid::new(axes)
}

/// Per-pixel grid coordinates and the matching grid shape.
pub fn build_sampling_grid(
    spatial_shape: &[usize],
    params: &GridParams,
    guidance: &Tensor,
) -> Result<(SamplingGrid, Vec<usize>)> {
    params.validate()?;
    let grid_shape = params.grid_shape(spatial_shape);
    let g = lattice_sampling_grid(spatial_shape, 1.0, &grid_shape, params, guidance)?;
    Ok((g, grid_shape))
}

/// Normalized Gaussian taps over `[-ceil(3 sigma), ceil(3 sigma)]`.
pub fn gaussian_kernel_1d(sigma: f64) -> Vec<f64> {
    if sigma <= 0.0 {
        return vec![1.0];
    }
    let r = (3.0 * sigma).ceil() as i64;
    let mut k: Vec<f64> = (-r..=r)
        .map(|d| (-(d * d) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let s: f64 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= s);
    k
}

fn convolve_axis(buf: &mut [f64], shape: &[usize], axis: usize, taps: &[f64], line: &mut Vec<f64>) {
    let r = (taps.len() / 2) as isize;
    let n = shape[axis];
    let stride = strides(shape)[axis];
    let outer: usize = shape[..axis].iter().product();
    line.resize(n, 0.0);
    for o in 0..outer {
        for i in 0..stride {
            let base = o * n * stride + i;
            for (k, v) in line.iter_mut().enumerate() {
                *v = buf[base + k * stride];
            }
            for k in 0..n as isize {
                let lo = (k - r).max(0);
                let hi = (k + r).min(n as isize - 1);
                let mut acc = 0.0;
                for j in lo..=hi {
                    acc += taps[(j - k + r) as usize] * line[j as usize];
                }
                buf[base + k as usize * stride] = acc;
            }
        }
    }
}

/// Separable Gaussian blur over every grid axis, zero padded, applied to all
/// channels (the weight channel included). `sigma == 0` is the identity.
pub fn gaussian_blur_grid(grid: &BilateralGrid, sigma: f64) -> Result<BilateralGrid> {
    if !(sigma >= 0.0 && sigma.is_finite()) {
        return Err(Error::InvalidParameter(format!("sigma must be >= 0, got {sigma}")));
    }
    if sigma == 0.0 {
        return Ok(grid.clone());
    }
    let taps = gaussian_kernel_1d(sigma);
    let shape = grid.grid_shape().to_vec();
    let cells = grid.num_cells();
    let mut t = grid.tensor().clone();
    t.data_mut().par_chunks_mut(cells).for_each(|chan| {
        let mut line = Vec::new();
        for axis in 0..shape.len() {
            convolve_axis(chan, &shape, axis, &taps, &mut line);
        }
    });
    BilateralGrid::new(t, grid.has_weight())
}

/// Cross-bilateral filter of `image` guided by `guidance` (`[spatial...]`).
pub fn bilateral_filter(image: &Image, guidance: &Tensor, params: &GridParams) -> Result<Image> {
    let (g, grid_shape) = build_sampling_grid(image.spatial_shape(), params, guidance)?;
    let grid = splat_homogeneous(image.tensor(), &g, &grid_shape, params.splat_kernel)?;
    let blurred = gaussian_blur_grid(&grid, params.sigma)?;
    let eps = image.tensor().dtype().weight_epsilon();
    let (values, _) = slice_normalized(&blurred, &g, params.slice_kernel, eps)?;
    image.with_tensor(values)
}

/// Block mean over `scale`-wide cells on every axis.
pub fn box_downsample(t: &Tensor, scale: usize) -> Result<Tensor> {
    if scale == 0 || t.shape().iter().any(|e| e % scale != 0) {
        return Err(Error::ScaleMismatch(format!(
            "shape {:?} is not divisible by {scale}",
            t.shape()
        )));
    }
    let small: Vec<usize> = t.shape().iter().map(|e| e / scale).collect();
    let mut out = Tensor::zeros(&small);
    let st_small = strides(&small);
    let norm = (scale as f64).powi(t.rank() as i32);
    let mut idx = vec![0usize; t.rank()];
    for &v in t.data() {
        let flat: usize = idx
            .iter()
            .zip(&st_small)
            .map(|(i, s)| (i / scale) * s)
            .sum();
        out.data_mut()[flat] += v / norm;
        crate::tensor::increment(&mut idx, t.shape());
    }
    Ok(out)
}

/// Upsamples `low` (`[channels, small...]`) to the extent of `guidance_hi`
/// (`[large...]`, each extent `scale` times the small one).
///
/// The low-resolution samples are splatted at their footprint centers with a
/// box-downsampled guidance, blurred, then sliced at full resolution with the
/// full-resolution guidance. `spatial_rate` is measured in high-resolution
/// pixels.
pub fn joint_bilateral_upsample(
    low: &Tensor,
    guidance_hi: &Tensor,
    params: &GridParams,
    scale: usize,
) -> Result<Tensor> {
    params.validate()?;
    let small = low.trailing_shape();
    if scale == 0
        || small.len() != guidance_hi.rank()
        || small.iter().zip(guidance_hi.shape()).any(|(s, h)| s * scale != *h)
    {
        return Err(Error::ScaleMismatch(format!(
            "guidance extent {:?} is not {scale} x low extent {small:?}",
            guidance_hi.shape()
        )));
    }
    let grid_shape = params.grid_shape(guidance_hi.shape());
    let guidance_lo = box_downsample(guidance_hi, scale)?;
    let g_lo = lattice_sampling_grid(small, scale as f64, &grid_shape, params, &guidance_lo)?;
    let g_hi = lattice_sampling_grid(guidance_hi.shape(), 1.0, &grid_shape, params, guidance_hi)?;
    let grid = splat_homogeneous(low, &g_lo, &grid_shape, params.splat_kernel)?;
    let blurred = gaussian_blur_grid(&grid, params.sigma)?;
    let (values, _) = slice_normalized(&blurred, &g_hi, params.slice_kernel, low.dtype().weight_epsilon())?;
    Ok(values)
}

/// Exact Gaussian cross-bilateral filter over a square window of radius
/// `ceil(3 sigma_s)` pixels. Quadratic in the window size.
pub fn brute_force_bilateral(image: &Image, guidance: &Tensor, sigma_s: f64, sigma_r: f64) -> Result<Image> {
    let shape = image.spatial_shape().to_vec();
    if guidance.shape() != shape.as_slice() {
        return Err(Error::shape(&shape, guidance.shape()));
    }
    if !(sigma_s >= 0.0) || !(sigma_r > 0.0) {
        return Err(Error::InvalidParameter(format!(
            "need sigma_s >= 0 and sigma_r > 0, got {sigma_s}, {sigma_r}"
        )));
    }
    let rank = shape.len();
    let radius = if sigma_s > 0.0 { (3.0 * sigma_s).ceil() as usize } else { 0 };
    let spatial: Vec<f64> = (0..=radius)
        .map(|d| {
            if sigma_s > 0.0 {
                (-((d * d) as f64) / (2.0 * sigma_s * sigma_s)).exp()
            } else {
                1.0
            }
        })
        .collect();
    let inv_2r2 = 1.0 / (2.0 * sigma_r * sigma_r);
    let st = strides(&shape);
    let n: usize = shape.iter().product();
    let c = image.channels();
    let src = image.tensor().data();
    let gd = guidance.data();

    let mut sample_major = vec![0.0; n * c];
    sample_major
        .par_chunks_mut(c)
        .enumerate()
        .for_each(|(p, out)| {
            let mut centre = [0usize; 3];
            crate::tensor::unravel(p, &shape, &mut centre[..rank]);
            let mut lo = [0usize; 3];
            let mut hi = [0usize; 3];
            for a in 0..rank {
                lo[a] = centre[a].saturating_sub(radius);
                hi[a] = (centre[a] + radius).min(shape[a] - 1);
            }
            let gp = gd[p];
            let mut wsum = 0.0;
            let mut q = lo;
            'window: loop {
                let mut ws = 1.0;
                let mut flat = 0;
                for a in 0..rank {
                    ws *= spatial[centre[a].abs_diff(q[a])];
                    flat += q[a] * st[a];
                }
                let dg = gd[flat] - gp;
                let w = ws * (-dg * dg * inv_2r2).exp();
                wsum += w;
                for (ch, v) in out.iter_mut().enumerate() {
                    *v += w * src[ch * n + flat];
                }
                let mut a = rank;
                loop {
                    if a == 0 {
                        break 'window;
                    }
                    a -= 1;
                    if q[a] < hi[a] {
                        q[a] += 1;
                        break;
                    }
                    q[a] = lo[a];
                }
            }
            for v in out.iter_mut() {
                *v /= wsum;
            }
        });

    let mut data = vec![0.0; n * c];
    for (p, vals) in sample_major.chunks(c).enumerate() {
        for (ch, &v) in vals.iter().enumerate() {
            data[ch * n + p] = v;
        }
    }
    let mut out_shape = vec![c];
    out_shape.extend_from_slice(&shape);
    image.with_tensor(Tensor::new(out_shape, data)?)
}
