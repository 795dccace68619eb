//! Multilinear sampling with coordinates clamped to the array extent.

use crate::tensor::{strides, Tensor};

/// Interpolates one row-major channel of extent `shape` at `point`.
///
/// Uses nested lerps `a + f (b - a)`, so equal corners reproduce their value
/// exactly and integer coordinates read the node without rounding.
pub fn sample_clamped(channel: &[f64], shape: &[usize], point: &[f64]) -> f64 {
    debug_assert_eq!(shape.len(), point.len());
    let rank = shape.len();
    assert!(rank <= 4, "sample_clamped supports rank <= 4");
    let st = strides(shape);
    let mut base = 0usize;
    let mut frac = [0.0f64; 4];
    let mut step = [0usize; 4];
    for (a, (&n, &x)) in shape.iter().zip(point).enumerate() {
        let p = x.clamp(0.0, (n - 1) as f64);
        let f = p.floor();
        base += f as usize * st[a];
        frac[a] = p - f;
        step[a] = if (f as usize) + 1 < n { st[a] } else { 0 };
    }
    // corner bit a (counted from the last axis) selects the upper node
    let mut corners = [0.0f64; 16];
    let n = 1usize << rank;
    for (corner, v) in corners.iter_mut().enumerate().take(n) {
        let mut idx = base;
        for (a, &s) in step[..rank].iter().enumerate() {
            if corner >> (rank - 1 - a) & 1 == 1 {
                idx += s;
            }
        }
        *v = channel[idx];
    }
    let mut len = n;
    for a in (0..rank).rev() {
        len /= 2;
        let f = frac[a];
        for k in 0..len {
            let (lo, hi) = (corners[2 * k], corners[2 * k + 1]);
            corners[k] = if f == 0.0 { lo } else { lo + f * (hi - lo) };
        }
    }
    corners[0]
}

/// Samples every channel of a `[channels, spatial...]` tensor at `point`.
pub fn sample_channels(t: &Tensor, point: &[f64]) -> Vec<f64> {
    (0..t.channels())
        .map(|c| sample_clamped(t.channel(c), t.trailing_shape(), point))
        .collect()
}
