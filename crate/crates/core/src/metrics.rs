//! Registration and segmentation metrics: Dice, HD95, SDlogJ, TRE, MSE and
//! the squared-gradient smoothness term.

use std::collections::BTreeSet;

use rayon::prelude::*;
use serde::Serialize;

use crate::deform::jacobian_determinant;
use crate::error::{Error, Result};
use crate::io::{Image, KeypointSet};
use crate::solver::DisplacementField;
use crate::tensor::{check_shape, strides, unravel};

/// Integer label map over a spatial extent; 0 is background.
#[derive(Debug, Clone, PartialEq)]
pub struct LabelMask {
    shape: Vec<usize>,
    labels: Vec<u32>,
    spacing: Vec<f64>,
}

impl LabelMask {
    pub fn new(shape: Vec<usize>, labels: Vec<u32>, spacing: Vec<f64>) -> Result<Self> {
        check_shape(&shape)?;
        let n: usize = shape.iter().product();
        if labels.len() != n {
            return Err(Error::LengthMismatch {
                shape,
                len: labels.len(),
            });
        }
        if spacing.len() != shape.len() || spacing.iter().any(|&s| !(s > 0.0 && s.is_finite())) {
            return Err(Error::InvalidParameter(format!("invalid spacing {spacing:?}")));
        }
        Ok(LabelMask {
            shape,
            labels,
            spacing,
        })
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(&[usize]) -> u32) -> Self {
        let n: usize = shape.iter().product();
        let mut idx = vec![0; shape.len()];
        let labels = (0..n)
            .map(|i| {
                unravel(i, shape, &mut idx);
                f(&idx)
            })
            .collect();
        LabelMask::new(shape.to_vec(), labels, vec![1.0; shape.len()]).expect("valid mask")
    }

    pub fn with_spacing(self, spacing: Vec<f64>) -> Result<Self> {
        LabelMask::new(self.shape, self.labels, spacing)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn labels(&self) -> &[u32] {
        &self.labels
    }

    pub fn spacing(&self) -> &[f64] {
        &self.spacing
    }

    pub fn contains(&self, label: u32) -> bool {
        self.labels.contains(&label)
    }

    /// Sorted foreground labels present in the mask.
    pub fn foreground_labels(&self) -> Vec<u32> {
        let set: BTreeSet<u32> = self.labels.iter().copied().filter(|&l| l != 0).collect();
        set.into_iter().collect()
    }
}

#[derive(Debug, Clone, Serialize, PartialEq)]
pub struct DiceScore {
    pub per_label: Vec<(u32, f64)>,
    pub mean: f64,
}

/// Per-label Dice. An empty `labels` list scores every foreground label of
/// either mask; a label absent from both masks scores 1.
pub fn dice(a: &LabelMask, b: &LabelMask, labels: &[u32]) -> Result<DiceScore> {
    if a.shape != b.shape {
        return Err(Error::shape(&a.shape, &b.shape));
    }
    let labels: Vec<u32> = if labels.is_empty() {
        let set: BTreeSet<u32> = a
            .foreground_labels()
            .into_iter()
            .chain(b.foreground_labels())
            .collect();
        set.into_iter().collect()
    } else {
        labels.to_vec()
    };
    let per_label: Vec<(u32, f64)> = labels
        .iter()
        .map(|&l| {
            let (mut na, mut nb, mut both) = (0usize, 0usize, 0usize);
            for (&x, &y) in a.labels.iter().zip(&b.labels) {
                na += (x == l) as usize;
                nb += (y == l) as usize;
                both += (x == l && y == l) as usize;
            }
            let score = if na + nb == 0 {
                1.0
            } else {
                2.0 * both as f64 / (na + nb) as f64
            };
            (l, score)
        })
        .collect();
    let mean = if per_label.is_empty() {
        1.0
    } else {
        per_label.iter().map(|p| p.1).sum::<f64>() / per_label.len() as f64
    };
    Ok(DiceScore { per_label, mean })
}

/// Voxels of `label` with at least one face neighbor that is not `label`;
/// positions outside the extent count as background.
fn boundary(mask: &LabelMask, label: u32) -> Vec<Vec<usize>> {
    let shape = &mask.shape;
    let st = strides(shape);
    let mut idx = vec![0; shape.len()];
    let mut out = Vec::new();
    for (flat, &l) in mask.labels.iter().enumerate() {
        if l != label {
            continue;
        }
        unravel(flat, shape, &mut idx);
        let edge = (0..shape.len()).any(|a| {
            idx[a] == 0
                || idx[a] + 1 == shape[a]
                || mask.labels[flat - st[a]] != label
                || mask.labels[flat + st[a]] != label
        });
        if edge {
            out.push(idx.clone());
        }
    }
    out
}

/// Percentile `q` in [0, 1] with linear interpolation at rank `(n - 1) q`.
pub fn percentile(values: &mut [f64], q: f64) -> f64 {
    assert!(!values.is_empty());
    values.sort_by(f64::total_cmp);
    let pos = (values.len() - 1) as f64 * q;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    values[lo] + (pos - lo as f64) * (values[hi] - values[lo])
}

fn directed_distances(from: &[Vec<usize>], to: &[Vec<usize>], spacing: &[f64]) -> Vec<f64> {
    from.par_iter()
        .map(|p| {
            to.iter()
                .map(|q| {
                    p.iter()
                        .zip(q)
                        .zip(spacing)
                        .map(|((&x, &y), &s)| {
                            let d = (x as f64 - y as f64) * s;
                            d * d
                        })
                        .sum::<f64>()
                })
                .fold(f64::INFINITY, f64::min)
                .sqrt()
        })
        .collect()
}

/// Symmetric 95th-percentile boundary distance in physical units (spacing of `a`).
pub fn hd95(a: &LabelMask, b: &LabelMask, label: u32) -> Result<f64> {
    if a.shape != b.shape {
        return Err(Error::shape(&a.shape, &b.shape));
    }
    if !a.contains(label) || !b.contains(label) {
        return Err(Error::LabelAbsent(label));
    }
    let spacing = a.spacing();
    let (ba, bb) = (boundary(a, label), boundary(b, label));
    let mut dab = directed_distances(&ba, &bb, spacing);
    let mut dba = directed_distances(&bb, &ba, spacing);
    Ok(percentile(&mut dab, 0.95).max(percentile(&mut dba, 0.95)))
}

#[derive(Debug, Clone, Copy, Serialize, PartialEq)]
pub struct LogJacobianStats {
    pub sdlogj: f64,
    pub folds: usize,
}

const LOG_FLOOR: f64 = 1e-9;

/// Standard deviation of `log(max(det ∇φ, 1e-9))` and the count of
/// nonpositive determinants, over the mask foreground if given, otherwise
/// over interior voxels (all voxels along axes shorter than 3).
pub fn sdlogj(u: &DisplacementField, mask: Option<&LabelMask>) -> Result<LogJacobianStats> {
    let det = jacobian_determinant(u)?;
    let spatial = u.spatial_shape();
    let selected: Vec<f64> = match mask {
        Some(m) => {
            if m.shape != spatial {
                return Err(Error::shape(spatial, &m.shape));
            }
            det.data()
                .iter()
                .zip(&m.labels)
                .filter(|(_, &l)| l != 0)
                .map(|(&d, _)| d)
                .collect()
        }
        None => {
            let mut idx = vec![0; spatial.len()];
            det.data()
                .iter()
                .enumerate()
                .filter(|&(flat, _)| {
                    unravel(flat, spatial, &mut idx);
                    idx.iter()
                        .zip(spatial)
                        .all(|(&i, &n)| n < 3 || (i > 0 && i + 1 < n))
                })
                .map(|(_, &d)| d)
                .collect()
        }
    };
    let folds = selected.iter().filter(|&&d| d <= 0.0).count();
    if selected.is_empty() {
        return Ok(LogJacobianStats { sdlogj: 0.0, folds });
    }
    let logs: Vec<f64> = selected.iter().map(|&d| d.max(LOG_FLOOR).ln()).collect();
    let n = logs.len() as f64;
    let mean = logs.iter().sum::<f64>() / n;
    let var = logs.iter().map(|&l| (l - mean) * (l - mean)).sum::<f64>() / n;
    Ok(LogJacobianStats {
        sdlogj: var.sqrt(),
        folds,
    })
}

#[derive(Debug, Clone, Serialize, PartialEq)]
pub struct TreReport {
    pub mean: f64,
    pub per_landmark: Vec<f64>,
}

/// Distance between `p_f + u(p_f)` and `p_m` per landmark, in physical units.
pub fn tre(u: &DisplacementField, kps: &KeypointSet) -> Result<TreReport> {
    let spatial = u.spatial_shape();
    if kps.is_empty() {
        return Ok(TreReport {
            mean: 0.0,
            per_landmark: Vec::new(),
        });
    }
    kps.validate_extent(spatial)?;
    let spacing = u.spacing();
    let per_landmark: Vec<f64> = (0..kps.len())
        .map(|i| {
            let (pf, pm) = (kps.fixed(i), kps.moving(i));
            let d = u.sample(pf);
            (0..spatial.len())
                .map(|a| {
                    let e = (pf[a] + d[a] - pm[a]) * spacing[a];
                    e * e
                })
                .sum::<f64>()
                .sqrt()
        })
        .collect();
    let mean = per_landmark.iter().sum::<f64>() / per_landmark.len() as f64;
    Ok(TreReport { mean, per_landmark })
}

/// Mean squared difference over all channels and voxels.
pub fn mse(a: &Image, b: &Image) -> Result<f64> {
    let (ta, tb) = (a.tensor(), b.tensor());
    if ta.shape() != tb.shape() {
        return Err(Error::shape(ta.shape(), tb.shape()));
    }
    let sum: f64 = ta
        .data()
        .iter()
        .zip(tb.data())
        .map(|(x, y)| (x - y) * (x - y))
        .sum();
    Ok(sum / ta.len() as f64)
}

/// `sqrt(sum (a - b)^2 / sum b^2)`, with `b` the reference.
pub fn relative_rms(a: &Image, reference: &Image) -> Result<f64> {
    let (ta, tb) = (a.tensor(), reference.tensor());
    if ta.shape() != tb.shape() {
        return Err(Error::shape(tb.shape(), ta.shape()));
    }
    let num: f64 = ta.data().iter().zip(tb.data()).map(|(x, y)| (x - y) * (x - y)).sum();
    let den: f64 = tb.data().iter().map(|y| y * y).sum();
    Ok(if den == 0.0 { num.sqrt() } else { (num / den).sqrt() })
}

/// `(1/C) Σ_c Σ_a mean((Δ_a u_c)²)` with forward differences in voxel units;
/// the mean along axis `a` runs over voxels that have a forward neighbor.
pub fn smoothness(u: &DisplacementField) -> f64 {
    let spatial = u.spatial_shape();
    let st = strides(spatial);
    let v = u.vectors();
    let channels = v.channels();
    let mut total = 0.0;
    for c in 0..channels {
        let ch = v.channel(c);
        for (a, &extent) in spatial.iter().enumerate() {
            if extent < 2 {
                continue;
            }
            let mut idx = vec![0; spatial.len()];
            let mut sum = 0.0;
            let mut count = 0usize;
            for flat in 0..ch.len() {
                unravel(flat, spatial, &mut idx);
                if idx[a] + 1 < extent {
                    let d = ch[flat + st[a]] - ch[flat];
                    sum += d * d;
                    count += 1;
                }
            }
            total += sum / count as f64;
        }
    }
    total / channels as f64
}

/// Weighted sum `similarity + λ · smoothness`.
pub fn composite_loss(similarity: f64, smoothness: f64, lambda: f64) -> f64 {
    similarity + lambda * smoothness
}
