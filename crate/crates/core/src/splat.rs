//! Splatting, slicing and their analytic adjoints.
//!
//! A [`SamplingGrid`] assigns every sample (pixel, voxel or keypoint) one
//! continuous coordinate per grid axis. Splatting scatters sample values into
//! the grid with separable kernel weights:
//!
//! ```text
//! grid[c, i, j, k] = sum_s  u[c, s] * K(gx[s], i) * K(gy[s], j) * K(gr[s], k)
//! ```
//!
//! and slicing gathers with the same weights. The two are exact adjoints, so
//! the gradient of one is the other plus a coordinate term built from
//! [`Kernel::derivative`].
//!
//! All routines are deterministic: splatting parallelizes over channels (each
//! channel accumulates samples in order), slicing over samples.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::kernel::Kernel;
use crate::tensor::{strides, Tensor};

/// Highest grid rank handled (three spatial axes, one range axis, slack).
pub const MAX_GRID_RANK: usize = 6;

const SAMPLE_CHUNK: usize = 1024;

/// Per-sample grid coordinates, one tensor per grid axis, all sharing the
/// sample shape. Coordinates are in grid-cell units.
#[derive(Debug, Clone, PartialEq)]
pub struct SamplingGrid {
    coords: Vec<Tensor>,
}

impl SamplingGrid {
    pub fn new(coords: Vec<Tensor>) -> Result<Self> {
        let Some(first) = coords.first() else {
            return Err(Error::InvalidParameter(
                "sampling grid needs at least one axis".into(),
            ));
        };
        if coords.len() > MAX_GRID_RANK {
            return Err(Error::InvalidParameter(format!(
                "grid rank {} exceeds {MAX_GRID_RANK}",
                coords.len()
            )));
        }
        for c in &coords[1..] {
            if c.shape() != first.shape() {
                return Err(Error::shape(first.shape(), c.shape()));
            }
        }
        if coords.iter().any(|c| !c.is_finite()) {
            return Err(Error::InvalidParameter("non-finite grid coordinate".into()));
        }
        Ok(SamplingGrid { coords })
    }

    pub fn num_axes(&self) -> usize {
        self.coords.len()
    }

    pub fn sample_shape(&self) -> &[usize] {
        self.coords[0].shape()
    }

    pub fn num_samples(&self) -> usize {
        self.coords[0].len()
    }

    pub fn axis(&self, a: usize) -> &Tensor {
        &self.coords[a]
    }

    pub fn axes(&self) -> &[Tensor] {
        &self.coords
    }

    pub fn into_axes(self) -> Vec<Tensor> {
        self.coords
    }

    /// Verifies every coordinate lies in `[0, extent - 1]` of its grid axis.
    pub fn check_bounds(&self, grid_shape: &[usize]) -> Result<()> {
        if grid_shape.len() != self.num_axes() {
            return Err(Error::InvalidParameter(format!(
                "grid rank {} does not match {} coordinate axes",
                grid_shape.len(),
                self.num_axes()
            )));
        }
        for (c, &e) in self.coords.iter().zip(grid_shape) {
            let hi = (e - 1) as f64;
            if let Some(&v) = c.data().iter().find(|&&v| !(0.0..=hi).contains(&v)) {
                return Err(Error::InvalidParameter(format!(
                    "coordinate {v} outside [0, {hi}]"
                )));
            }
        }
        Ok(())
    }
}

/// Channel-first grid `[channels, spatial..., range]`; when `has_weight` the
/// last channel holds the homogeneous weight.
#[derive(Debug, Clone, PartialEq)]
pub struct BilateralGrid {
    data: Tensor,
    has_weight: bool,
}

impl BilateralGrid {
    pub fn new(data: Tensor, has_weight: bool) -> Result<Self> {
        if data.rank() < 2 {
            return Err(Error::InvalidParameter(
                "grid tensor needs a channel axis and at least one grid axis".into(),
            ));
        }
        if has_weight && data.channel(data.channels() - 1).iter().any(|&w| w < 0.0) {
            return Err(Error::InvalidParameter("negative homogeneous weight".into()));
        }
        Ok(BilateralGrid { data, has_weight })
    }

    pub fn tensor(&self) -> &Tensor {
        &self.data
    }

    pub fn into_tensor(self) -> Tensor {
        self.data
    }

    pub fn has_weight(&self) -> bool {
        self.has_weight
    }

    /// Extents of the grid axes (spatial then range).
    pub fn grid_shape(&self) -> &[usize] {
        self.data.trailing_shape()
    }

    pub fn num_cells(&self) -> usize {
        self.grid_shape().iter().product()
    }

    /// Channel count excluding the weight channel.
    pub fn data_channels(&self) -> usize {
        self.data.channels() - usize::from(self.has_weight)
    }

    pub fn channel(&self, c: usize) -> &[f64] {
        self.data.channel(c)
    }

    pub fn weight(&self) -> Option<&[f64]> {
        self.has_weight
            .then(|| self.data.channel(self.data.channels() - 1))
    }

    /// Data channels only, as a standalone tensor.
    pub fn data_tensor(&self) -> Tensor {
        let cells = self.num_cells();
        let mut shape = self.data.shape().to_vec();
        shape[0] = self.data_channels();
        Tensor::new(shape, self.data.data()[..self.data_channels() * cells].to_vec())
            .expect("consistent shape")
    }
}

#[derive(Clone, Copy)]
struct AxisTaps {
    idx: [usize; 2],
    w: [f64; 2],
    dw: [f64; 2],
    len: usize,
}

impl AxisTaps {
    fn new(p: f64, extent: usize, kernel: Kernel) -> Self {
        let mut t = AxisTaps {
            idx: [0; 2],
            w: [0.0; 2],
            dw: [0.0; 2],
            len: 0,
        };
        let s = kernel.support(p);
        for q in s.iter() {
            if q >= 0 && (q as usize) < extent {
                t.idx[t.len] = q as usize;
                t.w[t.len] = kernel.weight(p, q);
                t.dw[t.len] = kernel.derivative(p, q);
                t.len += 1;
            }
        }
        t
    }
}

struct Stencil {
    taps: [AxisTaps; MAX_GRID_RANK],
    rank: usize,
}

impl Stencil {
    fn at(g: &SamplingGrid, s: usize, grid_shape: &[usize], kernel: Kernel) -> Self {
        let empty = AxisTaps {
            idx: [0; 2],
            w: [0.0; 2],
            dw: [0.0; 2],
            len: 0,
        };
        let mut taps = [empty; MAX_GRID_RANK];
        for (a, t) in taps.iter_mut().enumerate().take(grid_shape.len()) {
            *t = AxisTaps::new(g.coords[a].data()[s], grid_shape[a], kernel);
        }
        Stencil {
            taps,
            rank: grid_shape.len(),
        }
    }

    /// Calls `f(flat_cell, weight)` for each cell with a nonzero tap.
    fn for_each(&self, strides: &[usize], mut f: impl FnMut(usize, f64)) {
        let taps = &self.taps[..self.rank];
        if taps.iter().any(|t| t.len == 0) {
            return;
        }
        let mut k = [0usize; MAX_GRID_RANK];
        loop {
            let mut flat = 0;
            let mut w = 1.0;
            for (a, t) in taps.iter().enumerate() {
                flat += t.idx[k[a]] * strides[a];
                w *= t.w[k[a]];
            }
            f(flat, w);
            if !advance(&mut k, taps) {
                return;
            }
        }
    }

    /// Calls `f(flat_cell, grad)` with `grad[a] = dK_a * prod_{b != a} K_b`.
    fn for_each_grad(&self, strides: &[usize], mut f: impl FnMut(usize, &[f64])) {
        let taps = &self.taps[..self.rank];
        if taps.iter().any(|t| t.len == 0) {
            return;
        }
        let mut k = [0usize; MAX_GRID_RANK];
        let mut grad = [0.0; MAX_GRID_RANK];
        loop {
            let mut flat = 0;
            for (a, t) in taps.iter().enumerate() {
                flat += t.idx[k[a]] * strides[a];
                let mut g = t.dw[k[a]];
                for (b, u) in taps.iter().enumerate() {
                    if b != a {
                        g *= u.w[k[b]];
                    }
                }
                grad[a] = g;
            }
            f(flat, &grad[..self.rank]);
            if !advance(&mut k, taps) {
                return;
            }
        }
    }
}

fn advance(k: &mut [usize; MAX_GRID_RANK], taps: &[AxisTaps]) -> bool {
    for a in (0..taps.len()).rev() {
        k[a] += 1;
        if k[a] < taps[a].len {
            return true;
        }
        k[a] = 0;
    }
    false
}

fn check_samples(u: &Tensor, g: &SamplingGrid) -> Result<()> {
    if u.rank() < 2 || u.trailing_shape() != g.sample_shape() {
        let mut expected = vec![u.shape()[0]];
        expected.extend_from_slice(g.sample_shape());
        return Err(Error::shape(&expected, u.shape()));
    }
    Ok(())
}

fn check_grid(grid: &Tensor, g: &SamplingGrid) -> Result<()> {
    if grid.rank() != g.num_axes() + 1 {
        return Err(Error::InvalidParameter(format!(
            "grid tensor rank {} does not match {} coordinate axes plus channels",
            grid.rank(),
            g.num_axes()
        )));
    }
    Ok(())
}

fn splat_channels(
    channels: usize,
    value: impl Fn(usize, usize) -> f64 + Sync,
    g: &SamplingGrid,
    grid_shape: &[usize],
    kernel: Kernel,
) -> Result<Tensor> {
    if grid_shape.len() != g.num_axes() {
        return Err(Error::InvalidParameter(format!(
            "grid shape {grid_shape:?} does not match {} coordinate axes",
            g.num_axes()
        )));
    }
    crate::tensor::check_shape(grid_shape)?;
    let cells: usize = grid_shape.iter().product();
    let st = strides(grid_shape);
    let n = g.num_samples();
    let mut out = vec![0.0; channels * cells];
    out.par_chunks_mut(cells).enumerate().for_each(|(c, dst)| {
        for s in 0..n {
            let v = value(c, s);
            if v == 0.0 {
                continue;
            }
            Stencil::at(g, s, grid_shape, kernel).for_each(&st, |flat, w| dst[flat] += v * w);
        }
    });
    let mut shape = vec![channels];
    shape.extend_from_slice(grid_shape);
    Tensor::new(shape, out)
}

/// Scatters each channel of `u` (`[channels, samples...]`) into a grid.
pub fn splat(u: &Tensor, g: &SamplingGrid, grid_shape: &[usize], kernel: Kernel) -> Result<BilateralGrid> {
    check_samples(u, g)?;
    let n = g.num_samples();
    let data = u.data();
    let t = splat_channels(u.channels(), |c, s| data[c * n + s], g, grid_shape, kernel)?;
    BilateralGrid::new(t, false)
}

/// Like [`splat`], with an appended weight channel equal to the splat of ones.
pub fn splat_homogeneous(
    u: &Tensor,
    g: &SamplingGrid,
    grid_shape: &[usize],
    kernel: Kernel,
) -> Result<BilateralGrid> {
    check_samples(u, g)?;
    let n = g.num_samples();
    let c_in = u.channels();
    let data = u.data();
    let t = splat_channels(
        c_in + 1,
        |c, s| if c < c_in { data[c * n + s] } else { 1.0 },
        g,
        grid_shape,
        kernel,
    )?;
    BilateralGrid::new(t, true)
}

/// Gathers every channel of a `[channels, grid...]` tensor at the sample
/// coordinates. No normalization is applied.
pub fn slice_tensor(grid: &Tensor, g: &SamplingGrid, kernel: Kernel) -> Result<Tensor> {
    check_grid(grid, g)?;
    let grid_shape = grid.trailing_shape();
    let st = strides(grid_shape);
    let channels = grid.channels();
    let cells: usize = grid_shape.iter().product();
    let n = g.num_samples();
    let src = grid.data();

    let mut sample_major = vec![0.0; n * channels];
    sample_major
        .par_chunks_mut(SAMPLE_CHUNK * channels)
        .enumerate()
        .for_each(|(chunk, dst)| {
            let base = chunk * SAMPLE_CHUNK;
            for (i, vals) in dst.chunks_mut(channels).enumerate() {
                Stencil::at(g, base + i, grid_shape, kernel).for_each(&st, |flat, w| {
                    for (c, v) in vals.iter_mut().enumerate() {
                        *v += src[c * cells + flat] * w;
                    }
                });
            }
        });

    let mut out = vec![0.0; n * channels];
    for (s, vals) in sample_major.chunks(channels).enumerate() {
        for (c, &v) in vals.iter().enumerate() {
            out[c * n + s] = v;
        }
    }
    let mut shape = vec![channels];
    shape.extend_from_slice(g.sample_shape());
    Tensor::new(shape, out)
}

/// Slices every channel of the grid, the weight channel included.
pub fn slice(grid: &BilateralGrid, g: &SamplingGrid, kernel: Kernel) -> Result<Tensor> {
    slice_tensor(grid.tensor(), g, kernel)
}

/// `data / weight` where `weight > epsilon`, else 0. `weight` is broadcast
/// over the channels of `data` and must match one channel in length.
pub fn normalize_by_weight(data: &Tensor, weight: &[f64], epsilon: f64) -> Result<Tensor> {
    let per = data.len() / data.channels();
    if weight.len() != per {
        return Err(Error::shape(&[per], &[weight.len()]));
    }
    let mut out = data.clone();
    for c in 0..data.channels() {
        for (v, &w) in out.channel_mut(c).iter_mut().zip(weight) {
            *v = if w > epsilon { *v / w } else { 0.0 };
        }
    }
    Ok(out)
}

/// Slices a homogeneous grid and divides the data channels by the sliced
/// weight. Returns `(values, sliced_weight)`.
pub fn slice_normalized(
    grid: &BilateralGrid,
    g: &SamplingGrid,
    kernel: Kernel,
    epsilon: f64,
) -> Result<(Tensor, Tensor)> {
    if !grid.has_weight() {
        return Err(Error::InvalidParameter("grid has no weight channel".into()));
    }
    let sliced = slice(grid, g, kernel)?;
    let n = g.num_samples();
    let c = grid.data_channels();
    let data = sliced.data();
    let mut shape = vec![c];
    shape.extend_from_slice(g.sample_shape());
    let values = Tensor::new(shape, data[..c * n].to_vec())?;
    let weight = Tensor::new(g.sample_shape().to_vec(), data[c * n..].to_vec())?;
    let values = normalize_by_weight(&values, weight.data(), epsilon)?;
    Ok((values, weight))
}

/// `d/dG` of `sum_{c, s, cell} per_sample[c, s] * grid[c, cell] * prod_a K(G_a[s], cell_a)`.
fn coordinate_gradient(
    per_sample: &Tensor,
    grid: &Tensor,
    g: &SamplingGrid,
    kernel: Kernel,
) -> Result<Vec<Tensor>> {
    let grid_shape = grid.trailing_shape();
    let st = strides(grid_shape);
    let rank = grid_shape.len();
    let channels = grid.channels();
    if per_sample.channels() != channels {
        return Err(Error::InvalidParameter(format!(
            "{} sample channels vs {channels} grid channels",
            per_sample.channels()
        )));
    }
    let cells: usize = grid_shape.iter().product();
    let n = g.num_samples();
    let (ps, gd) = (per_sample.data(), grid.data());

    let mut sample_major = vec![0.0; n * rank];
    sample_major
        .par_chunks_mut(SAMPLE_CHUNK * rank)
        .enumerate()
        .for_each(|(chunk, dst)| {
            let base = chunk * SAMPLE_CHUNK;
            for (i, acc) in dst.chunks_mut(rank).enumerate() {
                let s = base + i;
                Stencil::at(g, s, grid_shape, kernel).for_each_grad(&st, |flat, grad| {
                    let mut coupling = 0.0;
                    for c in 0..channels {
                        coupling += ps[c * n + s] * gd[c * cells + flat];
                    }
                    for (a, v) in acc.iter_mut().enumerate() {
                        *v += coupling * grad[a];
                    }
                });
            }
        });

    Ok((0..rank)
        .map(|a| {
            let data = (0..n).map(|s| sample_major[s * rank + a]).collect();
            Tensor::new(g.sample_shape().to_vec(), data).expect("sample shape")
        })
        .collect())
}

/// Gradients of a splat with respect to its samples and coordinates, given
/// the upstream gradient `d_grid` (`[channels, grid...]`).
pub fn splat_backward(
    d_grid: &Tensor,
    u: &Tensor,
    g: &SamplingGrid,
    kernel: Kernel,
) -> Result<(Tensor, Vec<Tensor>)> {
    check_samples(u, g)?;
    check_grid(d_grid, g)?;
    let du = slice_tensor(d_grid, g, kernel)?;
    let dg = coordinate_gradient(u, d_grid, g, kernel)?;
    Ok((du, dg))
}

/// Gradients of a slice with respect to the grid and coordinates, given the
/// upstream gradient `d_v` (`[channels, samples...]`).
pub fn slice_backward(
    d_v: &Tensor,
    grid: &Tensor,
    g: &SamplingGrid,
    kernel: Kernel,
) -> Result<(Tensor, Vec<Tensor>)> {
    check_samples(d_v, g)?;
    check_grid(grid, g)?;
    let d_grid = splat(d_v, g, grid.trailing_shape(), kernel)?.into_tensor();
    let dg = coordinate_gradient(d_v, grid, g, kernel)?;
    Ok((d_grid, dg))
}
