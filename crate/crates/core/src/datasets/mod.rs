//! Synthetic labeled shapes and the on-disk formats for clouds, datasets,
//! run configurations and metrics.

mod config;
mod formats;
mod metrics;

use std::f64::consts::{PI, TAU};
use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{ensure, Error, Result};
use crate::geometry::{normalize_unit_sphere, rotate_z, PointCloud};

pub use config::{AdaptConfig, AdaptMode, Augmentation, OptimizerConfig, OptimizerKind, RunConfig};
pub use formats::{
    load_dataset, read_spcd, read_xyz, save_dataset, write_manifest_dataset, write_spcd, write_xyz, DatasetFormat,
    MANIFEST_FILE, SPCD_MAGIC, SPCD_VERSION,
};
pub use metrics::{read_metrics, write_metrics, MetricsRow, METRICS_HEADER};

/// Point clouds with class labels and stable sample identifiers.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledDataset {
    pub clouds: Vec<PointCloud>,
    pub labels: Vec<usize>,
    pub class_names: Vec<String>,
    /// Stable per-sample identifiers; file stems for directory datasets.
    pub ids: Vec<String>,
}

impl LabeledDataset {
    pub fn new(clouds: Vec<PointCloud>, labels: Vec<usize>, class_names: Vec<String>, ids: Vec<String>) -> Result<Self> {
        ensure!(
            clouds.len() == labels.len() && clouds.len() == ids.len(),
            "{} clouds, {} labels and {} ids",
            clouds.len(),
            labels.len(),
            ids.len()
        );
        ensure!(!class_names.is_empty(), "dataset needs at least one class name");
        if let Some(i) = labels.iter().position(|&l| l >= class_names.len()) {
            return Err(Error::invalid(format!(
                "sample {} has label {} but only {} classes exist",
                i,
                labels[i],
                class_names.len()
            )));
        }
        Ok(Self {
            clouds,
            labels,
            class_names,
            ids,
        })
    }

    pub fn len(&self) -> usize {
        self.clouds.len()
    }

    pub fn is_empty(&self) -> bool {
        self.clouds.is_empty()
    }

    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }

    /// Samples at the given positions, in that order.
    pub fn subset(&self, indices: &[usize]) -> Self {
        Self {
            clouds: indices.iter().map(|&i| self.clouds[i].clone()).collect(),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            class_names: self.class_names.clone(),
            ids: indices.iter().map(|&i| self.ids[i].clone()).collect(),
        }
    }

    /// `self` followed by `other`; both must share the class names.
    pub fn concat(&self, other: &Self) -> Result<Self> {
        ensure!(self.class_names == other.class_names, "datasets have different class names");
        let mut out = self.clone();
        out.clouds.extend(other.clouds.iter().cloned());
        out.labels.extend(&other.labels);
        out.ids.extend(other.ids.iter().cloned());
        Ok(out)
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.num_classes()];
        for &l in &self.labels {
            counts[l] += 1;
        }
        counts
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ShapeClass {
    Sphere,
    Box,
    Cylinder,
    Cone,
    Torus,
    Plane,
    Helix,
    Cross,
}

impl ShapeClass {
    pub const ALL: [ShapeClass; 8] = [
        ShapeClass::Sphere,
        ShapeClass::Box,
        ShapeClass::Cylinder,
        ShapeClass::Cone,
        ShapeClass::Torus,
        ShapeClass::Plane,
        ShapeClass::Helix,
        ShapeClass::Cross,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ShapeClass::Sphere => "sphere",
            ShapeClass::Box => "box",
            ShapeClass::Cylinder => "cylinder",
            ShapeClass::Cone => "cone",
            ShapeClass::Torus => "torus",
            ShapeClass::Plane => "plane",
            ShapeClass::Helix => "helix",
            ShapeClass::Cross => "cross",
        }
    }
}

impl fmt::Display for ShapeClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ShapeClass {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|c| c.name() == s)
            .ok_or_else(|| Error::invalid(format!("unknown shape class '{s}'")))
    }
}

/// Switches for the per-sample perturbations of [`gen_shape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ShapeOptions {
    pub jitter: bool,
    /// Per-axis anisotropic scaling.
    pub anisotropy: bool,
    pub rotation: bool,
}

impl Default for ShapeOptions {
    fn default() -> Self {
        Self {
            jitter: true,
            anisotropy: true,
            rotation: true,
        }
    }
}

impl ShapeOptions {
    /// Bare surface samples, for checks against exact geometry.
    pub fn exact() -> Self {
        Self {
            jitter: false,
            anisotropy: false,
            rotation: false,
        }
    }
}

pub const MIN_SHAPE_POINTS: usize = 32;
pub const JITTER_SIGMA: f64 = 0.005;
const ANISOTROPY: (f64, f64) = (0.8, 1.25);

pub fn gen_shape(class: ShapeClass, n: usize, seed: u64) -> Result<PointCloud> {
    gen_shape_with(class, n, seed, ShapeOptions::default())
}

/// Surface samples, then anisotropy, a rotation about z and clamped
/// gaussian jitter, then normalization to the unit sphere.
pub fn gen_shape_with(class: ShapeClass, n: usize, seed: u64, opts: ShapeOptions) -> Result<PointCloud> {
    ensure!(n >= MIN_SHAPE_POINTS, "shapes need at least {} points, got {}", MIN_SHAPE_POINTS, n);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut pts = match class {
        ShapeClass::Sphere => sphere(&mut rng, n),
        ShapeClass::Box => (0..n).map(|_| box_surface(&mut rng, [1.0, 0.7, 0.5])).collect(),
        ShapeClass::Cylinder => cylinder(&mut rng, n, 0.5, 0.8),
        ShapeClass::Cone => cone(&mut rng, n, 0.6, 0.8),
        ShapeClass::Torus => torus(&mut rng, n, 0.7, 0.25),
        ShapeClass::Plane => (0..n)
            .map(|_| [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), 0.0])
            .collect(),
        ShapeClass::Helix => helix(&mut rng, n),
        ShapeClass::Cross => cross(&mut rng, n),
    };
    if opts.anisotropy {
        let s: [f64; 3] = [0; 3].map(|_| rng.random_range(ANISOTROPY.0..=ANISOTROPY.1));
        for p in &mut pts {
            for k in 0..3 {
                p[k] *= s[k];
            }
        }
    }
    let mut cloud = PointCloud::new(pts)?;
    if opts.rotation {
        cloud = rotate_z(&cloud, rng.random_range(0.0..TAU));
    }
    if opts.jitter {
        let mut pts = cloud.into_points();
        for p in &mut pts {
            for v in p.iter_mut() {
                let z: f64 = rng.sample(StandardNormal);
                *v += JITTER_SIGMA * z.clamp(-3.0, 3.0);
            }
        }
        cloud = PointCloud::new(pts)?;
    }
    Ok(normalize_unit_sphere(&cloud).cast())
}

fn unit_vector(rng: &mut ChaCha8Rng) -> [f64; 3] {
    loop {
        let v: [f64; 3] = [0; 3].map(|_| rng.sample(StandardNormal));
        let n = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
        if n > 1e-9 {
            return v.map(|c| c / n);
        }
    }
}

/// Antithetic pairs (plus one balanced triple when `n` is odd) so the sample
/// mean is exactly the sphere's center.
fn sphere(rng: &mut ChaCha8Rng, n: usize) -> Vec<[f64; 3]> {
    let mut pts = Vec::with_capacity(n);
    if n % 2 == 1 {
        let u = unit_vector(rng);
        let t = unit_vector(rng);
        let dot = u[0] * t[0] + u[1] * t[1] + u[2] * t[2];
        let w = [t[0] - dot * u[0], t[1] - dot * u[1], t[2] - dot * u[2]];
        let wn = (w[0] * w[0] + w[1] * w[1] + w[2] * w[2]).sqrt();
        let w = w.map(|c| c / wn);
        let h = 3f64.sqrt() / 2.0;
        pts.push(u);
        pts.push([0, 1, 2].map(|k| -0.5 * u[k] + h * w[k]));
        pts.push([0, 1, 2].map(|k| -0.5 * u[k] - h * w[k]));
    }
    while pts.len() < n {
        let v = unit_vector(rng);
        pts.push(v);
        pts.push(v.map(|c| -c));
    }
    pts
}

fn box_surface(rng: &mut ChaCha8Rng, half: [f64; 3]) -> [f64; 3] {
    let areas = [half[1] * half[2], half[0] * half[2], half[0] * half[1]];
    let total: f64 = areas.iter().sum();
    let mut pick = rng.random_range(0.0..total);
    let mut axis = 2;
    for (k, a) in areas.iter().enumerate() {
        if pick < *a {
            axis = k;
            break;
        }
        pick -= a;
    }
    let mut p = [0.0; 3];
    for k in 0..3 {
        p[k] = if k == axis {
            if rng.random_bool(0.5) {
                half[k]
            } else {
                -half[k]
            }
        } else {
            rng.random_range(-half[k]..half[k])
        };
    }
    p
}

fn disk(rng: &mut ChaCha8Rng, r: f64) -> (f64, f64) {
    let rho = r * rng.random::<f64>().sqrt();
    let t = rng.random_range(0.0..TAU);
    (rho * t.cos(), rho * t.sin())
}

fn cylinder(rng: &mut ChaCha8Rng, n: usize, r: f64, half_h: f64) -> Vec<[f64; 3]> {
    let side = TAU * r * 2.0 * half_h;
    let cap = PI * r * r;
    (0..n)
        .map(|_| {
            let pick = rng.random_range(0.0..side + 2.0 * cap);
            if pick < side {
                let t = rng.random_range(0.0..TAU);
                [r * t.cos(), r * t.sin(), rng.random_range(-half_h..half_h)]
            } else {
                let (x, y) = disk(rng, r);
                [x, y, if pick < side + cap { half_h } else { -half_h }]
            }
        })
        .collect()
}

fn cone(rng: &mut ChaCha8Rng, n: usize, r: f64, half_h: f64) -> Vec<[f64; 3]> {
    let h = 2.0 * half_h;
    let side = PI * r * (r * r + h * h).sqrt();
    let base = PI * r * r;
    (0..n)
        .map(|_| {
            if rng.random_range(0.0..side + base) < side {
                let s = rng.random::<f64>().sqrt();
                let t = rng.random_range(0.0..TAU);
                [r * s * t.cos(), r * s * t.sin(), half_h - h * s]
            } else {
                let (x, y) = disk(rng, r);
                [x, y, -half_h]
            }
        })
        .collect()
}

fn torus(rng: &mut ChaCha8Rng, n: usize, big: f64, small: f64) -> Vec<[f64; 3]> {
    let mut pts = Vec::with_capacity(n);
    while pts.len() < n {
        let u = rng.random_range(0.0..TAU);
        let v = rng.random_range(0.0..TAU);
        // Area element grows with the distance from the axis.
        if rng.random::<f64>() * (big + small) <= big + small * v.cos() {
            let w = big + small * v.cos();
            pts.push([w * u.cos(), w * u.sin(), small * v.sin()]);
        }
    }
    pts
}

fn helix(rng: &mut ChaCha8Rng, n: usize) -> Vec<[f64; 3]> {
    let (radius, tube, turns, half_h) = (0.6, 0.06, 2.0, 0.8);
    let span = turns * TAU;
    let rise = 2.0 * half_h / span;
    let speed = (radius * radius + rise * rise).sqrt();
    (0..n)
        .map(|_| {
            let t = rng.random_range(0.0..span);
            let th = rng.random_range(0.0..TAU);
            let c = [radius * t.cos(), radius * t.sin(), -half_h + rise * t];
            let tan = [-radius * t.sin() / speed, radius * t.cos() / speed, rise / speed];
            let nrm = [-t.cos(), -t.sin(), 0.0];
            let bin = [
                tan[1] * nrm[2] - tan[2] * nrm[1],
                tan[2] * nrm[0] - tan[0] * nrm[2],
                tan[0] * nrm[1] - tan[1] * nrm[0],
            ];
            [0, 1, 2].map(|k| c[k] + tube * (th.cos() * nrm[k] + th.sin() * bin[k]))
        })
        .collect()
}

fn cross(rng: &mut ChaCha8Rng, n: usize) -> Vec<[f64; 3]> {
    let bars = [[1.0, 0.15, 0.15], [0.15, 1.0, 0.15]];
    let inside = |p: &[f64; 3], h: &[f64; 3]| (0..3).all(|k| p[k].abs() < h[k]);
    let mut pts = Vec::with_capacity(n);
    while pts.len() < n {
        let which = usize::from(rng.random_bool(0.5));
        let p = box_surface(rng, bars[which]);
        if !inside(&p, &bars[1 - which]) {
            pts.push(p);
        }
    }
    pts
}

/// Class-balanced train/test split of `8 * per_class` generated shapes.
///
/// Sample `c * per_class + i` of class `c` uses seed `seed ^ index`; within
/// each split samples are ordered round-robin over the classes.
pub fn gen_dataset(per_class: usize, n_points: usize, seed: u64, split: f64) -> Result<(LabeledDataset, LabeledDataset)> {
    ensure!(per_class >= 2, "need at least 2 samples per class, got {}", per_class);
    ensure!(split > 0.0 && split < 1.0, "train fraction must lie in (0, 1), got {}", split);
    let n_train = ((per_class as f64 * split).round() as usize).clamp(1, per_class - 1);
    let names: Vec<String> = ShapeClass::ALL.iter().map(|c| c.name().to_string()).collect();
    let mut parts: [(Vec<PointCloud>, Vec<usize>, Vec<String>); 2] = Default::default();
    for i in 0..per_class {
        for (label, class) in ShapeClass::ALL.into_iter().enumerate() {
            let index = (label * per_class + i) as u64;
            let cloud = gen_shape(class, n_points, seed ^ index)?;
            let part = &mut parts[usize::from(i >= n_train)];
            part.0.push(cloud);
            part.1.push(label);
            part.2.push(format!("{}_{:04}", class.name(), i));
        }
    }
    let [(tc, tl, ti), (vc, vl, vi)] = parts;
    Ok((
        LabeledDataset::new(tc, tl, names.clone(), ti)?,
        LabeledDataset::new(vc, vl, names, vi)?,
    ))
}

#[cfg(test)]
mod tests;
