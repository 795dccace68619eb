//! Dense displacement fields from sparse keypoint pairs.
//!
//! Keypoint displacements are splatted into a homogeneous bilateral grid at
//! the fixed keypoint positions. Cells with weight above a threshold become
//! Dirichlet constraints holding their weight-normalized displacement; the
//! remaining cells are filled with the harmonic interpolant (minimum of the
//! summed squared grid gradient) by Jacobi iteration. Slicing the filled grid
//! with the fixed image as guidance yields a dense, edge-aware field.

use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::interp::{sample_channels, sample_clamped};
use crate::io::{Image, KeypointSet};
use crate::kernel::Kernel;
use crate::pipeline::{build_sampling_grid, make_guidance, GridParams, GuidanceMode};
use crate::splat::{slice_tensor, splat_homogeneous, BilateralGrid, SamplingGrid};
use crate::tensor::{strides, unravel, Tensor};

/// Per-voxel displacement `u` (voxel units, one channel per spatial axis)
/// defining `phi(x) = x + u(x)`.
#[derive(Debug, Clone, PartialEq)]
pub struct DisplacementField {
    vectors: Tensor,
    spacing: Vec<f64>,
}

impl DisplacementField {
    pub fn new(vectors: Tensor) -> Result<Self> {
        let rank = vectors.rank().saturating_sub(1);
        Self::with_spacing(vectors, vec![1.0; rank])
    }

    pub fn with_spacing(vectors: Tensor, spacing: Vec<f64>) -> Result<Self> {
        let rank = vectors.rank().saturating_sub(1);
        if rank == 0 || vectors.channels() != rank {
            return Err(Error::InvalidParameter(format!(
                "displacement field needs one channel per spatial axis, got shape {:?}",
                vectors.shape()
            )));
        }
        if spacing.len() != rank || spacing.iter().any(|&s| !(s > 0.0 && s.is_finite())) {
            return Err(Error::InvalidParameter(format!("invalid spacing {spacing:?}")));
        }
        if !vectors.is_finite() {
            return Err(Error::InvalidParameter("non-finite displacement".into()));
        }
        Ok(DisplacementField { vectors, spacing })
    }

    pub fn zeros(spatial_shape: &[usize]) -> Self {
        let mut shape = vec![spatial_shape.len()];
        shape.extend_from_slice(spatial_shape);
        DisplacementField::new(Tensor::zeros(&shape)).expect("valid shape")
    }

    /// Builds a field from `f(position) -> displacement`.
    pub fn from_fn(spatial_shape: &[usize], f: impl Fn(&[usize]) -> Vec<f64>) -> Self {
        let mut shape = vec![spatial_shape.len()];
        shape.extend_from_slice(spatial_shape);
        let t = Tensor::from_fn(&shape, |idx| f(&idx[1..])[idx[0]]);
        DisplacementField::new(t).expect("valid shape")
    }

    pub fn vectors(&self) -> &Tensor {
        &self.vectors
    }

    pub fn into_vectors(self) -> Tensor {
        self.vectors
    }

    pub fn spacing(&self) -> &[f64] {
        &self.spacing
    }

    pub fn with_new_spacing(mut self, spacing: Vec<f64>) -> Result<Self> {
        if spacing.len() != self.dim() {
            return Err(Error::InvalidParameter(format!("invalid spacing {spacing:?}")));
        }
        self.spacing = spacing;
        Ok(self)
    }

    pub fn dim(&self) -> usize {
        self.vectors.channels()
    }

    pub fn spatial_shape(&self) -> &[usize] {
        self.vectors.trailing_shape()
    }

    /// Displacement at a continuous position (multilinear, clamped).
    pub fn sample(&self, point: &[f64]) -> Vec<f64> {
        sample_channels(&self.vectors, point)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        DisplacementField {
            vectors: self.vectors.map(f),
            spacing: self.spacing.clone(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct InpaintConfig {
    /// Stop once the largest Jacobi update falls to this value.
    pub tol: f64,
    pub max_iter: usize,
    /// Cells with homogeneous weight above this are constraints.
    pub weight_threshold: f64,
    /// Neighbor weight along the range axis relative to spatial axes.
    pub range_coupling: f64,
}

impl Default for InpaintConfig {
    fn default() -> Self {
        InpaintConfig {
            tol: 1e-5,
            max_iter: 5000,
            weight_threshold: 1e-6,
            range_coupling: 1.0,
        }
    }
}

impl InpaintConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tol > 0.0) || self.max_iter == 0 {
            return Err(Error::InvalidParameter(
                "inpainting needs tol > 0 and max_iter >= 1".into(),
            ));
        }
        if !(self.weight_threshold >= 0.0) || !(self.range_coupling >= 0.0) {
            return Err(Error::InvalidParameter(
                "weight threshold and range coupling must be >= 0".into(),
            ));
        }
        Ok(())
    }
}

/// Result of [`inpaint_grid`]: the filled grid and solver bookkeeping.
#[derive(Debug, Clone)]
pub struct Inpainted {
    /// Filled displacement values, `[channels, grid...]`, no weight channel.
    pub grid: BilateralGrid,
    /// Constraint mask per cell.
    pub constrained: Vec<bool>,
    /// Normalized constraint values, `[channels, grid...]` (0 on free cells).
    pub pinned: Tensor,
    pub iterations: usize,
    /// Largest update of the final sweep, an upper bound on the residual.
    pub residual: f64,
    pub converged: bool,
}

/// Splats keypoint displacements `moving - fixed` (plus unit weight) into a
/// homogeneous grid at the fixed keypoint positions.
pub fn sparse_displacement_grid(
    kps: &KeypointSet,
    guidance: &Tensor,
    params: &GridParams,
) -> Result<BilateralGrid> {
    params.validate()?;
    let spatial = guidance.shape();
    let dim = spatial.len();
    let grid_shape = params.grid_shape(spatial);
    let n = kps.len();
    if n == 0 {
        let mut shape = vec![dim + 1];
        shape.extend_from_slice(&grid_shape);
        return BilateralGrid::new(Tensor::zeros(&shape), true);
    }
    kps.validate_extent(spatial)?;

    let mut axes: Vec<Vec<f64>> = vec![Vec::with_capacity(n); dim + 1];
    let mut disp = vec![0.0; dim * n];
    for i in 0..n {
        let p = kps.fixed(i);
        for a in 0..dim {
            let hi = (grid_shape[a] - 1) as f64;
            axes[a].push(((p[a] + 0.5) / params.spatial_rate - 0.5).clamp(0.0, hi));
        }
        let g = sample_clamped(guidance.data(), spatial, p);
        let r_hi = (grid_shape[dim] - 1) as f64;
        axes[dim].push((g / params.range_rate).clamp(0.0, r_hi));
        for (a, d) in kps.displacement(i).into_iter().enumerate() {
            disp[a * n + i] = d;
        }
    }
    let g = SamplingGrid::new(
        axes.into_iter()
            .map(|v| Tensor::new(vec![n], v))
            .collect::<Result<_>>()?,
    )?;
    let u = Tensor::new(vec![dim, n], disp)?;
    splat_homogeneous(&u, &g, &grid_shape, Kernel::Linear)
}

/// Compressed neighbor lists for the weighted grid Laplacian with
/// in-bounds-only (Neumann) boundary handling.
struct Neighbors {
    offsets: Vec<usize>,
    index: Vec<usize>,
    weight: Vec<f64>,
    total: Vec<f64>,
}

impl Neighbors {
    fn build(grid_shape: &[usize], range_coupling: f64) -> Self {
        let rank = grid_shape.len();
        let cells: usize = grid_shape.iter().product();
        let st = strides(grid_shape);
        let mut nb = Neighbors {
            offsets: Vec::with_capacity(cells + 1),
            index: Vec::with_capacity(cells * 2 * rank),
            weight: Vec::with_capacity(cells * 2 * rank),
            total: Vec::with_capacity(cells),
        };
        let mut idx = vec![0usize; rank];
        nb.offsets.push(0);
        for flat in 0..cells {
            unravel(flat, grid_shape, &mut idx);
            let mut total = 0.0;
            for a in 0..rank {
                let w = if a + 1 == rank { range_coupling } else { 1.0 };
                if w == 0.0 {
                    continue;
                }
                if idx[a] > 0 {
                    nb.index.push(flat - st[a]);
                    nb.weight.push(w);
                    total += w;
                }
                if idx[a] + 1 < grid_shape[a] {
                    nb.index.push(flat + st[a]);
                    nb.weight.push(w);
                    total += w;
                }
            }
            nb.total.push(total);
            nb.offsets.push(nb.index.len());
        }
        nb
    }

    fn average(&self, values: &[f64], cell: usize) -> Option<f64> {
        if self.total[cell] == 0.0 {
            return None;
        }
        let (lo, hi) = (self.offsets[cell], self.offsets[cell + 1]);
        let mut acc = 0.0;
        for k in lo..hi {
            acc += self.weight[k] * values[self.index[k]];
        }
        Some(acc / self.total[cell])
    }
}

const SWEEP_CHUNK: usize = 4096;

/// One Jacobi sweep; returns the largest change over free cells.
fn jacobi_sweep(nb: &Neighbors, constrained: &[bool], old: &[f64], new: &mut [f64]) -> f64 {
    new.par_chunks_mut(SWEEP_CHUNK)
        .enumerate()
        .map(|(chunk, dst)| {
            let base = chunk * SWEEP_CHUNK;
            let mut delta: f64 = 0.0;
            for (i, v) in dst.iter_mut().enumerate() {
                let cell = base + i;
                *v = old[cell];
                if constrained[cell] {
                    continue;
                }
                if let Some(avg) = nb.average(old, cell) {
                    delta = delta.max((avg - old[cell]).abs());
                    *v = avg;
                }
            }
            delta
        })
        .reduce(|| 0.0, f64::max)
}

fn laplace_residual(nb: &Neighbors, constrained: &[bool], values: &[f64]) -> f64 {
    (0..values.len())
        .filter(|&c| !constrained[c])
        .filter_map(|c| nb.average(values, c).map(|avg| (avg - values[c]).abs()))
        .fold(0.0, f64::max)
}

/// Fills the unconstrained cells of a homogeneous grid with the discrete
/// harmonic interpolant of the constrained, weight-normalized values.
///
/// Free cells start at the mean constraint value of their channel. Returns
/// the best iterate with `converged == false` if `max_iter` is reached.
pub fn inpaint_grid(grid: &BilateralGrid, cfg: &InpaintConfig) -> Result<Inpainted> {
    cfg.validate()?;
    let weight = grid
        .weight()
        .ok_or_else(|| Error::InvalidParameter("inpainting needs a homogeneous grid".into()))?;
    let constrained: Vec<bool> = weight.iter().map(|&w| w > cfg.weight_threshold).collect();
    let n_constrained = constrained.iter().filter(|&&c| c).count();
    if n_constrained == 0 {
        return Err(Error::NoConstraints);
    }
    let grid_shape = grid.grid_shape().to_vec();
    let cells = grid.num_cells();
    let channels = grid.data_channels();
    let nb = Neighbors::build(&grid_shape, cfg.range_coupling);

    let mut pinned = vec![0.0; channels * cells];
    for c in 0..channels {
        let data = grid.channel(c);
        for i in (0..cells).filter(|&i| constrained[i]) {
            pinned[c * cells + i] = data[i] / weight[i];
        }
    }

    let solved: Vec<(Vec<f64>, usize, f64)> = (0..channels)
        .into_par_iter()
        .map(|c| {
            let pin = &pinned[c * cells..(c + 1) * cells];
            let mean = pin.iter().sum::<f64>() / n_constrained as f64;
            let mut old: Vec<f64> = (0..cells)
                .map(|i| if constrained[i] { pin[i] } else { mean })
                .collect();
            let mut new = vec![0.0; cells];
            let mut last = f64::INFINITY;
            let mut iters = 0;
            while iters < cfg.max_iter {
                last = jacobi_sweep(&nb, &constrained, &old, &mut new);
                std::mem::swap(&mut old, &mut new);
                iters += 1;
                if last <= cfg.tol {
                    break;
                }
            }
            (old, iters, last)
        })
        .collect();

    let iterations = solved.iter().map(|s| s.1).max().unwrap_or(0);
    let residual = solved.iter().map(|s| s.2).fold(0.0, f64::max);
    let mut data = Vec::with_capacity(channels * cells);
    for (values, _, _) in solved {
        data.extend(values);
    }
    let mut shape = vec![channels];
    shape.extend_from_slice(&grid_shape);
    Ok(Inpainted {
        grid: BilateralGrid::new(Tensor::new(shape.clone(), data)?, false)?,
        constrained,
        pinned: Tensor::new(shape, pinned)?,
        iterations,
        residual,
        converged: residual <= cfg.tol,
    })
}

/// Solver diagnostics in a JSON-ready form.
#[derive(Debug, Clone, Serialize, PartialEq)]
pub struct ResidualReport {
    pub iterations: usize,
    pub converged: bool,
    pub warning: bool,
    pub max_laplace_residual: f64,
    pub max_constraint_violation: f64,
    pub constrained_cells: usize,
    pub free_cells: usize,
    pub channel_min: Vec<f64>,
    pub channel_max: Vec<f64>,
}

pub fn field_residual_report(solve: &Inpainted, cfg: &InpaintConfig) -> ResidualReport {
    let grid = &solve.grid;
    let cells = grid.num_cells();
    let nb = Neighbors::build(grid.grid_shape(), cfg.range_coupling);
    let mut max_res: f64 = 0.0;
    let mut max_violation: f64 = 0.0;
    let mut channel_min = Vec::new();
    let mut channel_max = Vec::new();
    for c in 0..grid.data_channels() {
        let values = grid.channel(c);
        max_res = max_res.max(laplace_residual(&nb, &solve.constrained, values));
        let pin = solve.pinned.channel(c);
        for i in (0..cells).filter(|&i| solve.constrained[i]) {
            max_violation = max_violation.max((values[i] - pin[i]).abs());
        }
        channel_min.push(values.iter().copied().fold(f64::INFINITY, f64::min));
        channel_max.push(values.iter().copied().fold(f64::NEG_INFINITY, f64::max));
    }
    let constrained_cells = solve.constrained.iter().filter(|&&c| c).count();
    ResidualReport {
        iterations: solve.iterations,
        converged: solve.converged,
        warning: !solve.converged,
        max_laplace_residual: max_res,
        max_constraint_violation: max_violation,
        constrained_cells,
        free_cells: cells - constrained_cells,
        channel_min,
        channel_max,
    }
}

/// Dense field plus the grid solve that produced it.
#[derive(Debug, Clone)]
pub struct KeypointRegistration {
    pub field: DisplacementField,
    pub solve: Inpainted,
}

/// Keypoint-driven dense field with an explicit `[spatial...]` guidance map.
pub fn keypoint_field_with_guidance(
    kps: &KeypointSet,
    guidance: &Tensor,
    spacing: &[f64],
    params: &GridParams,
    cfg: &InpaintConfig,
) -> Result<KeypointRegistration> {
    let sparse = sparse_displacement_grid(kps, guidance, params)?;
    let solve = inpaint_grid(&sparse, cfg)?;
    let (g, grid_shape) = build_sampling_grid(guidance.shape(), params, guidance)?;
    debug_assert_eq!(grid_shape, solve.grid.grid_shape());
    let dense = slice_tensor(solve.grid.tensor(), &g, params.slice_kernel)?;
    let field = DisplacementField::with_spacing(dense, spacing.to_vec())?;
    Ok(KeypointRegistration { field, solve })
}

/// Training-free registration: guidance from the raw fixed image, keypoint
/// splat, harmonic inpainting, then slicing to full resolution.
pub fn keypoint_field(
    kps: &KeypointSet,
    fixed_image: &Image,
    params: &GridParams,
    cfg: &InpaintConfig,
) -> Result<KeypointRegistration> {
    let guidance = make_guidance(fixed_image, GuidanceMode::Intensity)?;
    keypoint_field_with_guidance(kps, &guidance, fixed_image.spacing(), params, cfg)
}
