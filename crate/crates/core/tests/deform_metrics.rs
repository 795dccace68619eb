mod common;

use bilgrid::deform::{compose, integrate_velocity, jacobian_determinant, warp, DEFAULT_STEPS};
use bilgrid::metrics::{dice, hd95, sdlogj, smoothness, tre};
use bilgrid::{DisplacementField, Image, KeypointSet, LabelMask, Tensor};
use common::rng;
use proptest::prelude::*;
use rand::Rng;

/// Sum of a few low-frequency sinusoids per channel, rescaled so that the
/// largest component magnitude is exactly `amp`. With `vanish` the field is
/// windowed to zero on the domain boundary.
fn smooth_field(seed: u64, shape: &[usize], amp: f64, max_freq: f64, vanish: bool) -> DisplacementField {
    let mut r = rng(seed);
    let terms: Vec<Vec<(f64, f64, f64, f64)>> = (0..2)
        .map(|_| {
            (0..3)
                .map(|_| {
                    (
                        r.random_range(-1.0..1.0),
                        r.random_range(0.5..max_freq),
                        r.random_range(0.5..max_freq),
                        r.random_range(0.0..6.3),
                    )
                })
                .collect()
        })
        .collect();
    let (h, w) = (shape[0] as f64, shape[1] as f64);
    let raw = DisplacementField::from_fn(shape, |i| {
        let (y, x) = (i[0] as f64, i[1] as f64);
        let window = if vanish {
            (std::f64::consts::PI * y / (h - 1.0)).sin() * (std::f64::consts::PI * x / (w - 1.0)).sin()
        } else {
            1.0
        };
        terms
            .iter()
            .map(|ts| {
                window
                    * ts.iter()
                        .map(|&(a, fy, fx, ph)| a * (std::f64::consts::TAU * (fy * y / h + fx * x / w) + ph).sin())
                        .sum::<f64>()
            })
            .collect()
    });
    let peak = raw.vectors().data().iter().fold(0.0f64, |m, v| m.max(v.abs()));
    raw.map(|v| v * amp / peak)
}

#[test]
fn exponential_of_v_and_minus_v_cancel() {
    for seed in 0..6 {
        let v = smooth_field(seed, &[64, 64], 4.0, 2.0, true);
        let up = integrate_velocity(&v, DEFAULT_STEPS).unwrap();
        let um = integrate_velocity(&v.map(|x| -x), DEFAULT_STEPS).unwrap();
        let c = compose(&up, &um).unwrap();
        let worst = c.vectors().data().iter().fold(0.0f64, |m, x| m.max(x.abs()));
        assert!(worst <= 0.1, "seed {seed}: {worst}");
    }
}

#[test]
fn integrated_smooth_velocity_does_not_fold() {
    for seed in 10..16 {
        let v = smooth_field(seed, &[64, 64], 4.0, 2.0, false);
        let u = integrate_velocity(&v, DEFAULT_STEPS).unwrap();
        let det = jacobian_determinant(&u).unwrap();
        assert!(det.min() > 0.0, "seed {seed}: {}", det.min());
    }
}

#[test]
fn composition_is_associative_for_smooth_fields() {
    let a = smooth_field(1, &[48, 48], 0.2, 1.0, true);
    let b = smooth_field(2, &[48, 48], 0.2, 1.0, true);
    let c = smooth_field(3, &[48, 48], 0.2, 1.0, true);
    let left = compose(&compose(&a, &b).unwrap(), &c).unwrap();
    let right = compose(&a, &compose(&b, &c).unwrap()).unwrap();
    let gap = left.vectors().data().iter().zip(right.vectors().data())
        .map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
    assert!(gap <= 1e-3, "{gap}");
}

#[test]
fn smoothness_matches_direct_summation() {
    let u = smooth_field(5, &[9, 7], 2.0, 2.0, false);
    let v = u.vectors();
    let (h, w) = (9, 7);
    let mut total = 0.0;
    for c in 0..2 {
        let mut sy = 0.0;
        for y in 0..h - 1 {
            for x in 0..w {
                sy += (v.get(&[c, y + 1, x]) - v.get(&[c, y, x])).powi(2);
            }
        }
        let mut sx = 0.0;
        for y in 0..h {
            for x in 0..w - 1 {
                sx += (v.get(&[c, y, x + 1]) - v.get(&[c, y, x])).powi(2);
            }
        }
        total += sy / ((h - 1) * w) as f64 + sx / (h * (w - 1)) as f64;
    }
    assert!((smoothness(&u) - total / 2.0).abs() <= 1e-10);
}

fn blob(shape: &[usize], cy: f64, cx: f64, r: f64) -> LabelMask {
    LabelMask::from_fn(shape, |i| {
        let d = (i[0] as f64 - cy).powi(2) + (i[1] as f64 - cx).powi(2);
        if d <= r * r { 1 } else { 0 }
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn constant_velocity_integrates_to_itself(cy in -2.0f64..2.0, cx in -2.0f64..2.0, steps in 1u32..=10) {
        let v = DisplacementField::from_fn(&[20, 20], |_| vec![cy, cx]);
        let u = integrate_velocity(&v, steps).unwrap();
        for y in 5..15 {
            for x in 5..15 {
                prop_assert_eq!(u.vectors().get(&[0, y, x]), cy);
                prop_assert_eq!(u.vectors().get(&[1, y, x]), cx);
            }
        }
    }

    #[test]
    fn integer_shift_warp_is_exact(seed in any::<u64>(), dy in -3i32..=3, dx in -3i32..=3) {
        let mut r = rng(seed);
        let img = Image::new(Tensor::from_fn(&[1, 12, 10], |_| r.random::<f64>())).unwrap();
        let u = DisplacementField::from_fn(&[12, 10], |_| vec![dy as f64, dx as f64]);
        let out = warp(&img, &u).unwrap();
        for y in 0..12i32 {
            for x in 0..10i32 {
                let (sy, sx) = (y + dy, x + dx);
                if (0..12).contains(&sy) && (0..10).contains(&sx) {
                    prop_assert_eq!(out.tensor().get(&[0, y as usize, x as usize]), img.tensor().get(&[0, sy as usize, sx as usize]));
                }
            }
        }
    }

    #[test]
    fn constant_fields_have_unit_jacobian(a in -5.0f64..5.0, b in -5.0f64..5.0) {
        let u = DisplacementField::from_fn(&[6, 7], |_| vec![a, b]);
        prop_assert!(jacobian_determinant(&u).unwrap().data().iter().all(|&d| d == 1.0));
    }

    #[test]
    fn sdlogj_ignores_translation(seed in any::<u64>(), c in -4.0f64..4.0) {
        let u = smooth_field(seed, &[16, 16], 1.0, 2.0, false);
        let shifted = u.map(|x| x + c);
        let a = sdlogj(&u, None).unwrap();
        let b = sdlogj(&shifted, None).unwrap();
        prop_assert!((a.sdlogj - b.sdlogj).abs() <= 1e-12);
        prop_assert_eq!(a.folds, b.folds);
    }

    #[test]
    fn dice_and_hd95_are_symmetric(cy in 5.0f64..15.0, cx in 5.0f64..15.0, r in 2.0f64..5.0, s in 1.0f64..3.0) {
        let a = blob(&[20, 20], 10.0, 10.0, 4.0);
        let b = blob(&[20, 20], cy, cx, r);
        let dab = dice(&a, &b, &[1]).unwrap().mean;
        prop_assert_eq!(dab, dice(&b, &a, &[1]).unwrap().mean);
        prop_assert!((0.0..=1.0).contains(&dab));
        let h = hd95(&a, &b, 1).unwrap();
        prop_assert_eq!(h, hd95(&b, &a, 1).unwrap());
        let a2 = a.with_spacing(vec![s, s]).unwrap();
        let b2 = b.with_spacing(vec![s, s]).unwrap();
        prop_assert!((hd95(&a2, &b2, 1).unwrap() - s * h).abs() <= 1e-9 * (1.0 + h));
    }

    #[test]
    fn tre_vanishes_for_exact_fields(seed in any::<u64>()) {
        let mut r = rng(seed);
        let pairs: Vec<(Vec<f64>, Vec<f64>)> = (0..4)
            .map(|_| {
                let p = vec![r.random_range(3..13) as f64, r.random_range(3..13) as f64];
                let m = vec![p[0] + r.random_range(-2.0..2.0), p[1] + r.random_range(-2.0..2.0)];
                (p, m)
            })
            .collect();
        let kps = KeypointSet::from_pairs(&pairs).unwrap();
        let u = DisplacementField::from_fn(&[16, 16], |i| {
            pairs
                .iter()
                .rev()
                .find(|(p, _)| p[0] as usize == i[0] && p[1] as usize == i[1])
                .map(|(p, m)| vec![m[0] - p[0], m[1] - p[1]])
                .unwrap_or(vec![0.0, 0.0])
        });
        let report = tre(&u, &kps).unwrap();
        // duplicated voxels keep only one landmark's displacement
        for (i, (p, _)) in pairs.iter().enumerate() {
            let last = pairs.iter().rposition(|(q, _)| q == p).unwrap();
            if last == i {
                prop_assert!(report.per_landmark[i] <= 1e-6);
            }
        }
    }
}
