//! Applying displacement fields: warping, composition, scaling-and-squaring
//! integration of stationary velocities, and Jacobian determinants.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::interp::sample_clamped;
use crate::io::Image;
use crate::solver::DisplacementField;
use crate::tensor::{strides, unravel, Tensor};

pub const DEFAULT_STEPS: u32 = 7;

const VOXEL_CHUNK: usize = 2048;

/// Evaluates `f(flat_index, position)` for every voxel of `spatial` into a
/// `[channels, spatial...]` tensor, in parallel over voxel chunks.
fn per_voxel(
    spatial: &[usize],
    channels: usize,
    f: impl Fn(usize, &[usize], &mut [f64]) + Sync,
) -> Tensor {
    let n: usize = spatial.iter().product();
    let mut sample_major = vec![0.0; n * channels];
    sample_major
        .par_chunks_mut(VOXEL_CHUNK * channels)
        .enumerate()
        .for_each(|(chunk, dst)| {
            let mut idx = vec![0usize; spatial.len()];
            for (k, out) in dst.chunks_mut(channels).enumerate() {
                let flat = chunk * VOXEL_CHUNK + k;
                unravel(flat, spatial, &mut idx);
                f(flat, &idx, out);
            }
        });
    let mut data = vec![0.0; n * channels];
    for (i, row) in sample_major.chunks(channels).enumerate() {
        for (c, &v) in row.iter().enumerate() {
            data[c * n + i] = v;
        }
    }
    let mut shape = vec![channels];
    shape.extend_from_slice(spatial);
    Tensor::new(shape, data).expect("consistent shape")
}

fn target(u: &Tensor, flat: usize, idx: &[usize], out: &mut [f64]) {
    let n: usize = u.trailing_shape().iter().product();
    for (a, p) in out.iter_mut().enumerate() {
        *p = idx[a] as f64 + u.data()[a * n + flat];
    }
}

/// `output(x) = image(x + u(x))`, multilinear, clamped to the image extent.
pub fn warp(image: &Image, u: &DisplacementField) -> Result<Image> {
    let spatial = image.spatial_shape();
    if spatial != u.spatial_shape() {
        return Err(Error::shape(spatial, u.spatial_shape()));
    }
    let t = image.tensor();
    let vectors = u.vectors();
    let channels = image.channels();
    let dim = spatial.len();
    let out = per_voxel(spatial, channels, |flat, idx, out| {
        let mut p = [0.0f64; 4];
        target(vectors, flat, idx, &mut p[..dim]);
        for (c, v) in out.iter_mut().enumerate() {
            *v = sample_clamped(t.channel(c), spatial, &p[..dim]);
        }
    });
    image.with_tensor(out.to_dtype(t.dtype()))
}

/// `result(x) = u_inner(x) + u_outer(x + u_inner(x))`.
pub fn compose(outer: &DisplacementField, inner: &DisplacementField) -> Result<DisplacementField> {
    let spatial = inner.spatial_shape();
    if spatial != outer.spatial_shape() {
        return Err(Error::shape(spatial, outer.spatial_shape()));
    }
    if inner.spacing() != outer.spacing() {
        return Err(Error::InvalidParameter(format!(
            "spacing mismatch: {:?} vs {:?}",
            inner.spacing(),
            outer.spacing()
        )));
    }
    let (vi, vo) = (inner.vectors(), outer.vectors());
    let dim = spatial.len();
    let n: usize = spatial.iter().product();
    let out = per_voxel(spatial, dim, |flat, idx, out| {
        let mut p = [0.0f64; 4];
        target(vi, flat, idx, &mut p[..dim]);
        for (a, v) in out.iter_mut().enumerate() {
            *v = vi.data()[a * n + flat] + sample_clamped(vo.channel(a), spatial, &p[..dim]);
        }
    });
    DisplacementField::with_spacing(out, inner.spacing().to_vec())
}

/// Scaling and squaring: `u = v / 2^steps`, then `steps` self-compositions.
pub fn integrate_velocity(v: &DisplacementField, steps: u32) -> Result<DisplacementField> {
    if steps == 0 || steps > 30 {
        return Err(Error::InvalidParameter(format!(
            "integration steps must be in 1..=30, got {steps}"
        )));
    }
    let scale = 0.5f64.powi(steps as i32);
    let mut u = v.map(|x| x * scale);
    for _ in 0..steps {
        u = compose(&u, &u)?;
    }
    Ok(u)
}

/// `det(∇φ)` for `φ = x + u`, voxel units, central differences inside and
/// one-sided differences on borders. Returns a tensor over the spatial extent.
pub fn jacobian_determinant(u: &DisplacementField) -> Result<Tensor> {
    let spatial = u.spatial_shape().to_vec();
    let dim = spatial.len();
    if dim > 3 {
        return Err(Error::InvalidParameter(format!(
            "jacobian needs spatial rank 1..=3, got {dim}"
        )));
    }
    let st = strides(&spatial);
    let v = u.vectors();
    let det = per_voxel(&spatial, 1, |flat, idx, out| {
        let mut m = [[0.0f64; 3]; 3];
        for (i, row) in m.iter_mut().enumerate().take(dim) {
            let ch = v.channel(i);
            for j in 0..dim {
                let (lo, hi) = (idx[j] > 0, idx[j] + 1 < spatial[j]);
                let d = match (lo, hi) {
                    (true, true) => 0.5 * (ch[flat + st[j]] - ch[flat - st[j]]),
                    (false, true) => ch[flat + st[j]] - ch[flat],
                    (true, false) => ch[flat] - ch[flat - st[j]],
                    (false, false) => 0.0,
                };
                row[j] = d + if i == j { 1.0 } else { 0.0 };
            }
        }
        out[0] = match dim {
            1 => m[0][0],
            2 => m[0][0] * m[1][1] - m[0][1] * m[1][0],
            _ => {
                m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1])
                    - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
                    + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0])
            }
        };
    });
    det.reshape(spatial)
}
