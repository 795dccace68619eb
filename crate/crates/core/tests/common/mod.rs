//! Independent reference implementations shared by the integration tests.
#![allow(dead_code)]

use bilgrid::{BilateralGrid, SamplingGrid, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_tensor(rng: &mut impl Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    Tensor::from_fn(shape, |_| lo + (hi - lo) * rng.random::<f64>())
}

/// Coordinates uniform over `[0, extent - 1]` on every grid axis.
pub fn random_sampling_grid(rng: &mut impl Rng, grid_shape: &[usize], sample_shape: &[usize]) -> SamplingGrid {
    SamplingGrid::new(
        grid_shape
            .iter()
            .map(|&e| random_tensor(rng, sample_shape, 0.0, (e - 1) as f64))
            .collect(),
    )
    .unwrap()
}

/// `sqrt(sum (a - b)^2 / sum b^2)`.
pub fn relative_rms(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    let num: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum();
    let den: f64 = b.iter().map(|y| y * y).sum();
    (num / den).sqrt()
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

fn unravel(mut flat: usize, shape: &[usize]) -> Vec<usize> {
    let mut idx = vec![0; shape.len()];
    for a in (0..shape.len()).rev() {
        idx[a] = flat % shape[a];
        flat /= shape[a];
    }
    idx
}

/// Direct solve of the constrained grid Laplace system: cells with weight
/// above `threshold` are fixed at `data / weight`; every other cell equals the
/// weighted mean of its in-bounds face neighbors (last axis weighted by
/// `range_coupling`). Banded Gaussian elimination in row-major cell order.
pub fn dense_laplace_solve(grid: &BilateralGrid, threshold: f64, range_coupling: f64) -> Tensor {
    let shape = grid.grid_shape().to_vec();
    let rank = shape.len();
    let n: usize = shape.iter().product();
    let mut st = vec![1usize; rank];
    for a in (0..rank - 1).rev() {
        st[a] = st[a + 1] * shape[a + 1];
    }
    let b = if rank > 1 { st[0] } else { 1 };
    let width = 2 * b + 1;
    let weight = grid.weight().expect("homogeneous grid");
    let channels = grid.data_channels();

    let mut band = vec![0.0; n * width];
    let at = |i: usize, j: usize| i * width + (j + b - i);
    for i in 0..n {
        if weight[i] > threshold {
            band[at(i, i)] = 1.0;
            continue;
        }
        let idx = unravel(i, &shape);
        for a in 0..rank {
            let w = if a + 1 == rank { range_coupling } else { 1.0 };
            if idx[a] > 0 {
                band[at(i, i)] += w;
                band[at(i, i - st[a])] -= w;
            }
            if idx[a] + 1 < shape[a] {
                band[at(i, i)] += w;
                band[at(i, i + st[a])] -= w;
            }
        }
    }
    let mut rhs: Vec<Vec<f64>> = (0..channels)
        .map(|c| {
            let d = grid.channel(c);
            (0..n)
                .map(|i| if weight[i] > threshold { d[i] / weight[i] } else { 0.0 })
                .collect()
        })
        .collect();

    for k in 0..n {
        let pivot = band[at(k, k)];
        for i in k + 1..n.min(k + b + 1) {
            let f = band[at(i, k)] / pivot;
            if f == 0.0 {
                continue;
            }
            for j in k..n.min(k + b + 1) {
                band[at(i, j)] -= f * band[at(k, j)];
            }
            for r in rhs.iter_mut() {
                r[i] -= f * r[k];
            }
        }
    }
    let mut out = Vec::with_capacity(channels * n);
    for r in rhs.iter_mut() {
        for k in (0..n).rev() {
            let mut acc = r[k];
            for j in k + 1..n.min(k + b + 1) {
                acc -= band[at(k, j)] * r[j];
            }
            r[k] = acc / band[at(k, k)];
        }
        out.extend_from_slice(r);
    }
    let mut full = vec![channels];
    full.extend_from_slice(&shape);
    Tensor::new(full, out).unwrap()
}

/// Homogeneous grid with the given `(cell, value)` constraints at unit weight.
pub fn constraint_grid(shape: &[usize], channels: usize, cells: &[(usize, Vec<f64>)]) -> BilateralGrid {
    let n: usize = shape.iter().product();
    let mut full = vec![channels + 1];
    full.extend_from_slice(shape);
    let mut t = Tensor::zeros(&full);
    for (cell, values) in cells {
        for (c, v) in values.iter().enumerate() {
            t.data_mut()[c * n + cell] = *v;
        }
        t.data_mut()[channels * n + cell] = 1.0;
    }
    BilateralGrid::new(t, true).unwrap()
}

/// Like [`random_sampling_grid`], keeping every coordinate at least 0.01 away
/// from an integer so central differences never straddle a kernel kink.
pub fn off_kink_sampling_grid(rng: &mut impl Rng, grid_shape: &[usize], sample_shape: &[usize]) -> SamplingGrid {
    SamplingGrid::new(
        grid_shape
            .iter()
            .map(|&e| {
                Tensor::from_fn(sample_shape, |_| {
                    if e == 1 {
                        0.0
                    } else {
                        rng.random_range(0..e - 1) as f64 + rng.random_range(0.01..0.99)
                    }
                })
            })
            .collect(),
    )
    .unwrap()
}

fn with_coordinate(g: &SamplingGrid, axis: usize, sample: usize, delta: f64) -> SamplingGrid {
    let mut axes = g.axes().to_vec();
    axes[axis].data_mut()[sample] += delta;
    SamplingGrid::new(axes).unwrap()
}

fn with_entry(t: &Tensor, i: usize, delta: f64) -> Tensor {
    let mut t = t.clone();
    t.data_mut()[i] += delta;
    t
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// `||analytic - numeric|| / ||numeric||`, or the absolute gap if numeric is 0.
pub fn relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let diff: Vec<f64> = analytic.iter().zip(numeric).map(|(a, b)| a - b).collect();
    let n = norm(numeric);
    if n == 0.0 {
        norm(&diff)
    } else {
        norm(&diff) / n
    }
}

pub const FD_STEP: f64 = 1e-5;

fn central<F: Fn(f64) -> f64>(f: F) -> f64 {
    (f(FD_STEP) - f(-FD_STEP)) / (2.0 * FD_STEP)
}

pub struct GradientCase {
    pub grid_shape: Vec<usize>,
    pub sample_shape: Vec<usize>,
    pub channels: usize,
    pub kernel: bilgrid::Kernel,
}

impl GradientCase {
    pub fn random(rng: &mut impl Rng, rank: usize, kernel: bilgrid::Kernel) -> Self {
        GradientCase {
            grid_shape: (0..rank).map(|_| rng.random_range(2..6)).collect(),
            sample_shape: vec![rng.random_range(1..5), rng.random_range(1..4)],
            channels: rng.random_range(1..3),
            kernel,
        }
    }
}

/// Relative errors of the splat gradients `(dU, dG)` for `L = <splat(U, G), T>`,
/// plus the largest absolute analytic `dG` entry.
pub fn splat_gradient_errors(rng: &mut impl Rng, case: &GradientCase) -> (f64, f64, f64) {
    use bilgrid::splat::{splat, splat_backward};
    let g = off_kink_sampling_grid(rng, &case.grid_shape, &case.sample_shape);
    let mut us = vec![case.channels];
    us.extend_from_slice(&case.sample_shape);
    let mut ts = vec![case.channels];
    ts.extend_from_slice(&case.grid_shape);
    let u = random_tensor(rng, &us, -1.0, 1.0);
    let t = random_tensor(rng, &ts, -1.0, 1.0);
    let loss = |u: &Tensor, g: &SamplingGrid| splat(u, g, &case.grid_shape, case.kernel).unwrap().tensor().dot(&t);

    let (du, dg) = splat_backward(&t, &u, &g, case.kernel).unwrap();
    let du_fd: Vec<f64> = (0..u.len()).map(|i| central(|h| loss(&with_entry(&u, i, h), &g))).collect();
    let mut dg_an = Vec::new();
    let mut dg_fd = Vec::new();
    for (a, axis) in dg.iter().enumerate() {
        for s in 0..g.num_samples() {
            dg_an.push(axis.data()[s]);
            dg_fd.push(central(|h| loss(&u, &with_coordinate(&g, a, s, h))));
        }
    }
    let max_dg = dg_an.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    (relative_error(du.data(), &du_fd), relative_error(&dg_an, &dg_fd), max_dg)
}

/// Relative errors of the slice gradients `(dGrid, dG)` for `L = <slice(Grid, G), W>`,
/// plus the largest absolute analytic `dG` entry.
pub fn slice_gradient_errors(rng: &mut impl Rng, case: &GradientCase) -> (f64, f64, f64) {
    use bilgrid::splat::{slice_backward, slice_tensor};
    let g = off_kink_sampling_grid(rng, &case.grid_shape, &case.sample_shape);
    let mut gs = vec![case.channels];
    gs.extend_from_slice(&case.grid_shape);
    let mut ws = vec![case.channels];
    ws.extend_from_slice(&case.sample_shape);
    let grid = random_tensor(rng, &gs, -1.0, 1.0);
    let w = random_tensor(rng, &ws, -1.0, 1.0);
    let loss = |grid: &Tensor, g: &SamplingGrid| slice_tensor(grid, g, case.kernel).unwrap().dot(&w);

    let (dgrid, dg) = slice_backward(&w, &grid, &g, case.kernel).unwrap();
    let dgrid_fd: Vec<f64> = (0..grid.len()).map(|i| central(|h| loss(&with_entry(&grid, i, h), &g))).collect();
    let mut dg_an = Vec::new();
    let mut dg_fd = Vec::new();
    for (a, axis) in dg.iter().enumerate() {
        for s in 0..g.num_samples() {
            dg_an.push(axis.data()[s]);
            dg_fd.push(central(|h| loss(&grid, &with_coordinate(&g, a, s, h))));
        }
    }
    let max_dg = dg_an.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    (relative_error(dgrid.data(), &dgrid_fd), relative_error(&dg_an, &dg_fd), max_dg)
}

/// Relative gap `|<splat(U), T> - <U, slice(T)>| / <splat(|U|), |T|>` on a
/// random case of the given grid rank.
pub fn adjoint_gap(rng: &mut impl Rng, grid_rank: usize, kernel: bilgrid::Kernel) -> f64 {
    use bilgrid::splat::{slice_tensor, splat};
    let grid_shape: Vec<usize> = (0..grid_rank).map(|_| rng.random_range(1..9)).collect();
    let sample_shape: Vec<usize> = (0..rng.random_range(1..4)).map(|_| rng.random_range(1..7)).collect();
    let channels = rng.random_range(1..4);
    let g = random_sampling_grid(rng, &grid_shape, &sample_shape);
    let mut us = vec![channels];
    us.extend_from_slice(&sample_shape);
    let mut ts = vec![channels];
    ts.extend_from_slice(&grid_shape);
    let u = random_tensor(rng, &us, -1.0, 1.0);
    let t = random_tensor(rng, &ts, -1.0, 1.0);
    let lhs = splat(&u, &g, &grid_shape, kernel).unwrap().tensor().dot(&t);
    let rhs = u.dot(&slice_tensor(&t, &g, kernel).unwrap());
    let scale = splat(&u.map(f64::abs), &g, &grid_shape, kernel)
        .unwrap()
        .tensor()
        .dot(&t.map(f64::abs));
    if scale == 0.0 {
        (lhs - rhs).abs()
    } else {
        (lhs - rhs).abs() / scale
    }
}
