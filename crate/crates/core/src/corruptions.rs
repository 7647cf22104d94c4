//! Seeded corruption generators for normalized point clouds.
//!
//! Magnitudes scale with an integer severity in `1..=5`. Count-based kinds
//! compute their counts in integer arithmetic so that, for example, 4% of 100
//! points at severity 5 is exactly 20.

use std::fmt;
use std::str::FromStr;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::datasets::LabeledDataset;
use crate::error::{ensure, Error, Result};
use crate::geometry::{apply_linear, rotation_axis_angle, sq_dist, Mat3, PointCloud};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CorruptionKind {
    UniformNoise,
    GaussianNoise,
    ImpulseNoise,
    BackgroundNoise,
    Upsampling,
    DensityDecrease,
    Shear,
    Rotation,
    Occlusion,
    Scale,
}

impl CorruptionKind {
    pub const ALL: [CorruptionKind; 10] = [
        CorruptionKind::UniformNoise,
        CorruptionKind::GaussianNoise,
        CorruptionKind::ImpulseNoise,
        CorruptionKind::BackgroundNoise,
        CorruptionKind::Upsampling,
        CorruptionKind::DensityDecrease,
        CorruptionKind::Shear,
        CorruptionKind::Rotation,
        CorruptionKind::Occlusion,
        CorruptionKind::Scale,
    ];

    pub fn name(self) -> &'static str {
        match self {
            CorruptionKind::UniformNoise => "uniform-noise",
            CorruptionKind::GaussianNoise => "gaussian-noise",
            CorruptionKind::ImpulseNoise => "impulse-noise",
            CorruptionKind::BackgroundNoise => "background-noise",
            CorruptionKind::Upsampling => "upsampling",
            CorruptionKind::DensityDecrease => "density-decrease",
            CorruptionKind::Shear => "shear",
            CorruptionKind::Rotation => "rotation",
            CorruptionKind::Occlusion => "occlusion",
            CorruptionKind::Scale => "scale",
        }
    }
}

impl fmt::Display for CorruptionKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for CorruptionKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::invalid(format!("unknown corruption kind '{s}'")))
    }
}

pub const MAX_SEVERITY: u32 = 5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct CorruptionSpec {
    kind: CorruptionKind,
    severity: u32,
    pub seed: u64,
}

impl CorruptionSpec {
    pub fn new(kind: CorruptionKind, severity: u32, seed: u64) -> Result<Self> {
        ensure!(
            (1..=MAX_SEVERITY).contains(&severity),
            "severity must lie in 1..={}, got {}",
            MAX_SEVERITY,
            severity
        );
        Ok(Self { kind, severity, seed })
    }

    pub fn kind(&self) -> CorruptionKind {
        self.kind
    }

    pub fn severity(&self) -> u32 {
        self.severity
    }

    pub fn with_seed(self, seed: u64) -> Self {
        Self { seed, ..self }
    }
}

pub fn corrupt(cloud: &PointCloud, spec: &CorruptionSpec) -> Result<PointCloud> {
    apply(cloud, spec.kind, spec.severity, spec.seed)
}

/// Corrupts every cloud with seed `spec.seed ^ index`; labels and ids are kept.
pub fn corrupt_dataset(ds: &LabeledDataset, spec: &CorruptionSpec) -> Result<LabeledDataset> {
    let clouds = ds
        .clouds
        .iter()
        .enumerate()
        .map(|(i, c)| corrupt(c, &spec.with_seed(spec.seed ^ i as u64)))
        .collect::<Result<_>>()?;
    LabeledDataset::new(clouds, ds.labels.clone(), ds.class_names.clone(), ds.ids.clone())
}

/// `ceil(n * percent / 100)` without floating point.
fn percent_of(n: usize, percent: usize) -> usize {
    (n * percent).div_ceil(100)
}

/// Severity 0 is accepted here so that degenerate magnitudes can be tested.
pub(crate) fn apply(cloud: &PointCloud, kind: CorruptionKind, severity: u32, seed: u64) -> Result<PointCloud> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let s = f64::from(severity);
    let n = cloud.len();
    let floor = n.div_ceil(4);
    let pts: Vec<[f64; 3]> = cloud.points().iter().map(|p| p.map(f64::from)).collect();
    let out: Vec<[f64; 3]> = match kind {
        CorruptionKind::UniformNoise => {
            let a = 0.01 * s;
            pts.iter()
                .map(|p| p.map(|v| v + a * rng.random_range(-1.0..=1.0)))
                .collect()
        }
        CorruptionKind::GaussianNoise => {
            let sigma = 0.01 * s;
            pts.iter()
                .map(|p| {
                    p.map(|v| {
                        let z: f64 = rng.sample(StandardNormal);
                        v + sigma * z
                    })
                })
                .collect()
        }
        CorruptionKind::ImpulseNoise => {
            // A full permutation and per-point offsets are drawn regardless of
            // severity, so a higher severity displaces a superset of points.
            let order = sample(&mut rng, n, n).into_vec();
            let offsets: Vec<[f64; 3]> = (0..n)
                .map(|_| [0; 3].map(|_| rng.random_range(-0.25..=0.25)))
                .collect();
            let count = percent_of(n, 2 * severity as usize).min(n);
            let mut out = pts.clone();
            for (&i, o) in order.iter().zip(&offsets).take(count) {
                for k in 0..3 {
                    out[i][k] += o[k];
                }
            }
            out
        }
        CorruptionKind::BackgroundNoise => {
            let extra = percent_of(n, 4 * severity as usize);
            let mut out = pts.clone();
            out.extend((0..extra).map(|_| [0; 3].map(|_| rng.random_range(-1.0..=1.0))));
            out
        }
        CorruptionKind::Upsampling => {
            let extra = percent_of(n, 10 * severity as usize);
            let mut out = pts.clone();
            for _ in 0..extra {
                let src = pts[rng.random_range(0..n)];
                out.push(src.map(|v| {
                    let z: f64 = rng.sample(StandardNormal);
                    v + 0.01 * z
                }));
            }
            out
        }
        CorruptionKind::DensityDecrease => {
            let anchors: Vec<[f64; 3]> = (0..severity).map(|_| pts[rng.random_range(0..n)]).collect();
            let r2 = (0.1 * s) * (0.1 * s);
            let score: Vec<f64> = pts
                .iter()
                .map(|p| anchors.iter().map(|a| sq_dist(p, a)).fold(f64::INFINITY, f64::min))
                .collect();
            // Removal candidates are those inside some anchor ball; the ones
            // closest to an anchor go first.
            remove_with_floor(&pts, &score, |d| d < r2, floor, true)
        }
        CorruptionKind::Shear => {
            let mut m: Mat3 = crate::geometry::IDENTITY;
            for (i, row) in m.iter_mut().enumerate() {
                for (j, v) in row.iter_mut().enumerate() {
                    if i != j {
                        let mag = rng.random_range(0.02 * s..=0.05 * s);
                        *v = if rng.random_bool(0.5) { mag } else { -mag };
                    }
                }
            }
            apply_linear(&PointCloud::from_trusted(pts), &m, [0.0; 3]).into_points()
        }
        CorruptionKind::Rotation => {
            let axis = random_unit(&mut rng);
            let angle = rng.random_range(0.0..=(6.0 * s).to_radians());
            let r = rotation_axis_angle(axis, angle)?;
            apply_linear(&PointCloud::from_trusted(pts), &r, [0.0; 3]).into_points()
        }
        CorruptionKind::Occlusion => {
            let dir = random_unit(&mut rng);
            let offset = 1.0 - 0.15 * s;
            let height: Vec<f64> = pts.iter().map(|p| p[0] * dir[0] + p[1] * dir[1] + p[2] * dir[2]).collect();
            // Points beyond the plane are removed, farthest first.
            remove_with_floor(&pts, &height, |h| h > offset, floor, false)
        }
        CorruptionKind::Scale => {
            let hi = 1.0 + 0.1 * s;
            let f = rng.random_range(1.0 / hi..=hi);
            pts.iter().map(|p| p.map(|v| v * f)).collect()
        }
    };
    PointCloud::new(out.into_iter().map(|p| p.map(|v| v as f32)).collect())
}

/// Drops points whose score satisfies `remove`, but keeps at least `floor`
/// points: candidates are dropped in order of score (ascending when
/// `low_first`, else descending) until the floor is reached. Survivors keep
/// their original order.
fn remove_with_floor(
    pts: &[[f64; 3]],
    score: &[f64],
    remove: impl Fn(f64) -> bool,
    floor: usize,
    low_first: bool,
) -> Vec<[f64; 3]> {
    let mut candidates: Vec<usize> = (0..pts.len()).filter(|&i| remove(score[i])).collect();
    candidates.sort_by(|&a, &b| {
        let o = score[a].total_cmp(&score[b]);
        (if low_first { o } else { o.reverse() }).then(a.cmp(&b))
    });
    let budget = pts.len().saturating_sub(floor);
    let mut dropped = vec![false; pts.len()];
    for &i in candidates.iter().take(budget) {
        dropped[i] = true;
    }
    pts.iter()
        .zip(&dropped)
        .filter(|(_, &d)| !d)
        .map(|(p, _)| *p)
        .collect()
}

fn random_unit(rng: &mut ChaCha8Rng) -> [f64; 3] {
    loop {
        let v: [f64; 3] = [0; 3].map(|_| rng.sample(StandardNormal));
        let n = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
        if n > 1e-9 {
            return v.map(|c| c / n);
        }
    }
}
