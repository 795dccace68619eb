//! Seeded synthetic test images: noisy piecewise-constant scenes and steps.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::io::Image;
use crate::tensor::Tensor;

/// Standard normal sample by the Box-Muller transform.
fn normal(rng: &mut impl Rng) -> f64 {
    let u1: f64 = 1.0 - rng.random::<f64>();
    let u2: f64 = rng.random();
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

/// `[1, height, width]` image of `regions` Voronoi cells with random levels in
/// `[0.1, 0.9]` plus Gaussian noise of std `noise`, clamped to `[0, 1]`.
pub fn piecewise_constant(height: usize, width: usize, regions: usize, noise: f64, seed: u64) -> Image {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let regions = regions.max(1);
    let sites: Vec<(f64, f64, f64)> = (0..regions)
        .map(|_| {
            (
                rng.random::<f64>() * height as f64,
                rng.random::<f64>() * width as f64,
                0.1 + 0.8 * rng.random::<f64>(),
            )
        })
        .collect();
    let mut t = Tensor::zeros(&[1, height, width]);
    for y in 0..height {
        for x in 0..width {
            let (py, px) = (y as f64 + 0.5, x as f64 + 0.5);
            let level = sites
                .iter()
                .min_by(|a, b| {
                    let da = (a.0 - py).powi(2) + (a.1 - px).powi(2);
                    let db = (b.0 - py).powi(2) + (b.1 - px).powi(2);
                    da.total_cmp(&db)
                })
                .map(|s| s.2)
                .unwrap_or(0.5);
            let v = (level + noise * normal(&mut rng)).clamp(0.0, 1.0);
            t.set(&[0, y, x], v);
        }
    }
    Image::new(t).expect("rank-2 image")
}

/// `[1, len]` unit step: 0 on the first half, 1 on the second.
pub fn step_signal(len: usize) -> Image {
    Image::new(Tensor::from_fn(&[1, len], |i| if 2 * i[1] < len { 0.0 } else { 1.0 })).expect("rank-1 image")
}

/// `[1, height, width]` image whose left and right halves hold `left` and `right`.
pub fn two_region(height: usize, width: usize, left: f64, right: f64) -> Image {
    Image::new(Tensor::from_fn(&[1, height, width], |i| if 2 * i[2] < width { left } else { right }))
        .expect("rank-2 image")
}
