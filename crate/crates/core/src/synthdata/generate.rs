use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::DataError;
use crate::tensor::Tensor;

/// Noiseless intensity of background, class 1 and class 2 before gain/bias.
pub const CLASS_BASE_VALUES: [f64; 3] = [0.0, 1.0, 2.0];

/// Per-client acquisition shift.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClientShift {
    pub intensity_gain: f64,
    pub intensity_bias: f64,
    pub noise_std: f64,
    /// Ellipsoid semi-axis range in voxels.
    pub object_radius_range: (f64, f64),
    pub samples: usize,
}

/// One cubic `D³` volume with its label map.
#[derive(Debug, Clone, PartialEq)]
pub struct VolumeSample {
    /// `1×1×D×D×D`.
    pub volume: Tensor,
    /// `D³` class indices, row-major like the volume.
    pub labels: Vec<u8>,
    pub num_classes: u8,
}

impl VolumeSample {
    pub fn size(&self) -> usize {
        self.volume.shape()[2]
    }
}

/// Spreads `n` client shifts linearly with `heterogeneity` in `[0, 1]`.
///
/// With position `t ∈ [−1, 1]` evenly spaced over clients and `h` the
/// heterogeneity:
///
/// - gain = 1 + 0.5·h·t (0.5 and 1.5 at the extremes when h = 1)
/// - bias = 0.5·h·t
/// - noise_std = 0.1 + 0.05·h·(t + 1)
/// - radius range = (3 + h·t, 5 + h·t)
///
/// Each quantity is assigned to clients through its own random permutation of
/// the positions, so intensity, noise and size shifts are not locked together.
pub fn make_partition(
    n: usize,
    heterogeneity: f64,
    samples: usize,
    rng: &mut impl Rng,
) -> Result<Vec<ClientShift>, DataError> {
    if n == 0 {
        return Err(DataError::Invalid("at least one client is required".into()));
    }
    if !(0.0..=1.0).contains(&heterogeneity) {
        return Err(DataError::Invalid(format!("heterogeneity must be in [0, 1], got {heterogeneity}")));
    }
    let pos: Vec<f64> = (0..n)
        .map(|i| if n == 1 { 0.0 } else { -1.0 + 2.0 * i as f64 / (n - 1) as f64 })
        .collect();
    let mut perm = || {
        let mut p: Vec<usize> = (0..n).collect();
        p.shuffle(rng);
        p
    };
    let (bias_perm, noise_perm, radius_perm) = (perm(), perm(), perm());
    let h = heterogeneity;
    Ok((0..n)
        .map(|i| {
            let lo = 3.0 + h * pos[radius_perm[i]];
            ClientShift {
                intensity_gain: 1.0 + 0.5 * h * pos[i],
                intensity_bias: 0.5 * h * pos[bias_perm[i]],
                noise_std: 0.1 + 0.05 * h * (pos[noise_perm[i]] + 1.0),
                object_radius_range: (lo, lo + 2.0),
                samples,
            }
        })
        .collect())
}

/// One sample: `K − 1` ellipsoids, one per foreground class, each confined to
/// its own slab along the first axis so no class can be overwritten.
pub fn generate_sample(
    shift: &ClientShift,
    d: usize,
    k: usize,
    rng: &mut impl Rng,
) -> Result<VolumeSample, DataError> {
    if d == 0 || !d.is_multiple_of(4) {
        return Err(DataError::Invalid(format!("volume size must be a positive multiple of 4, got {d}")));
    }
    if !(2..=3).contains(&k) {
        return Err(DataError::Invalid(format!("num_classes must be 2 or 3, got {k}")));
    }
    let (lo, hi) = shift.object_radius_range;
    if !(lo > 0.0 && hi >= lo) || shift.intensity_gain <= 0.0 || shift.noise_std < 0.0 {
        return Err(DataError::Invalid(format!("invalid client shift {shift:?}")));
    }
    let slabs = k - 1;
    let slab = d / slabs;
    let mut labels = vec![0u8; d * d * d];
    for class in 1..k {
        let start = (class - 1) * slab;
        let limits = [slab as f64 / 2.0 - 1.0, d as f64 / 2.0 - 1.0, d as f64 / 2.0 - 1.0];
        let mut radii = [0.0; 3];
        for (r, max) in radii.iter_mut().zip(limits) {
            let raw = if hi > lo { rng.random_range(lo..hi) } else { lo };
            *r = raw.clamp(1.0, max.max(1.0));
        }
        let ranges = [(start, start + slab), (0, d), (0, d)];
        let mut center = [0usize; 3];
        for ((c, r), (a, b)) in center.iter_mut().zip(radii).zip(ranges) {
            let margin = r.ceil() as usize;
            let (first, last) = (a + margin, b.saturating_sub(1 + margin));
            *c = if first <= last {
                rng.random_range(first..=last)
            } else {
                (a + b) / 2
            };
        }
        for x in 0..d {
            for y in 0..d {
                for z in 0..d {
                    let q = [x, y, z]
                        .iter()
                        .zip(center)
                        .zip(radii)
                        .map(|((&p, c), r)| {
                            let t = (p as f64 - c as f64) / r;
                            t * t
                        })
                        .sum::<f64>();
                    if q <= 1.0 {
                        labels[(x * d + y) * d + z] = class as u8;
                    }
                }
            }
        }
    }
    let volume = Tensor::from_fn(&[1, 1, d, d, d], |i| {
        let noise: f64 = rng.sample(StandardNormal);
        shift.intensity_gain * CLASS_BASE_VALUES[labels[i] as usize] + shift.intensity_bias + shift.noise_std * noise
    });
    Ok(VolumeSample {
        volume,
        labels,
        num_classes: k as u8,
    })
}

/// `shift.samples` consecutive samples from one stream.
pub fn generate_shard(
    shift: &ClientShift,
    d: usize,
    k: usize,
    rng: &mut impl Rng,
) -> Result<Vec<VolumeSample>, DataError> {
    (0..shift.samples).map(|_| generate_sample(shift, d, k, rng)).collect()
}

/// Reverses the selected spatial axes of both volume and labels.
pub fn flip_axes(sample: &VolumeSample, axes: [bool; 3]) -> VolumeSample {
    let d = sample.size();
    let src = |x: usize, y: usize, z: usize| {
        let m = |p: usize, f: bool| if f { d - 1 - p } else { p };
        (m(x, axes[0]) * d + m(y, axes[1])) * d + m(z, axes[2])
    };
    let mut volume = sample.volume.clone();
    let mut labels = sample.labels.clone();
    for x in 0..d {
        for y in 0..d {
            for z in 0..d {
                let (i, j) = ((x * d + y) * d + z, src(x, y, z));
                volume.data_mut()[i] = sample.volume.data()[j];
                labels[i] = sample.labels[j];
            }
        }
    }
    VolumeSample {
        volume,
        labels,
        num_classes: sample.num_classes,
    }
}

/// Independent fair-coin flip along each spatial axis, applied to volume and
/// labels together.
pub fn random_flip(sample: &VolumeSample, rng: &mut impl Rng) -> VolumeSample {
    let axes = [rng.random_bool(0.5), rng.random_bool(0.5), rng.random_bool(0.5)];
    flip_axes(sample, axes)
}
