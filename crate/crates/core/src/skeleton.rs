//! Skeletal spheres, deterministic surface sampling and the skeleton CSV format.

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::autodiff::Scalar;
use crate::error::{ensure, Error, Result};
use crate::geometry::{Point, PointCloud};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SkeletalSphere<T = f32> {
    pub center: Point<T>,
    pub radius: T,
}

impl<T: Scalar> SkeletalSphere<T> {
    pub fn new(center: Point<T>, radius: T) -> Result<Self> {
        ensure!(
            radius > T::zero() && radius.is_finite(),
            "sphere radius must be positive and finite, got {}",
            radius
        );
        ensure!(center.iter().all(|c| c.is_finite()), "sphere center must be finite");
        Ok(Self { center, radius })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SkeletalCloud<T = f32> {
    spheres: Vec<SkeletalSphere<T>>,
}

impl<T: Scalar> SkeletalCloud<T> {
    pub fn new(spheres: Vec<SkeletalSphere<T>>) -> Result<Self> {
        ensure!(!spheres.is_empty(), "a skeleton needs at least one sphere");
        Ok(Self { spheres })
    }

    /// Validates each `(center, radius)` pair.
    pub fn from_parts(centers: &[Point<T>], radii: &[T]) -> Result<Self> {
        ensure!(
            centers.len() == radii.len(),
            "{} centers but {} radii",
            centers.len(),
            radii.len()
        );
        let spheres = centers
            .iter()
            .zip(radii)
            .map(|(&c, &r)| SkeletalSphere::new(c, r))
            .collect::<Result<_>>()?;
        Self::new(spheres)
    }

    pub fn spheres(&self) -> &[SkeletalSphere<T>] {
        &self.spheres
    }

    pub fn len(&self) -> usize {
        self.spheres.len()
    }

    pub fn is_empty(&self) -> bool {
        self.spheres.is_empty()
    }

    pub fn centers(&self) -> Vec<Point<T>> {
        self.spheres.iter().map(|s| s.center).collect()
    }

    pub fn radii(&self) -> Vec<T> {
        self.spheres.iter().map(|s| s.radius).collect()
    }
}

/// Golden angle `pi * (3 - sqrt 5)`.
const GOLDEN_ANGLE: f64 = 2.399_963_229_728_653;

/// Fibonacci-lattice unit directions: `z_i = 1 - 2 (i + 0.5) / n`,
/// azimuth `i * golden angle`.
pub fn fibonacci_directions(n: usize) -> Vec<[f64; 3]> {
    (0..n)
        .map(|i| {
            let z = 1.0 - 2.0 * (i as f64 + 0.5) / n as f64;
            let rho = (1.0 - z * z).max(0.0).sqrt();
            let (s, c) = (i as f64 * GOLDEN_ANGLE).sin_cos();
            [rho * c, rho * s, z]
        })
        .collect()
}

/// Points `center + radius * v` for the first `n` lattice directions.
pub fn sample_sphere_surface<T: Scalar>(sphere: &SkeletalSphere<T>, n: usize) -> Result<PointCloud<T>> {
    ensure!(n >= 1, "need at least one sample per sphere");
    Ok(PointCloud::from_trusted(surface_points(sphere, &fibonacci_directions(n))))
}

fn surface_points<T: Scalar>(sphere: &SkeletalSphere<T>, dirs: &[[f64; 3]]) -> Vec<Point<T>> {
    let c = sphere.center.map(|v| v.f64());
    let r = sphere.radius.f64();
    dirs.iter()
        .map(|v| [0, 1, 2].map(|a| T::of(c[a] + r * v[a])))
        .collect()
}

/// Union of the surface samples of every sphere, sphere-major.
pub fn reconstruct<T: Scalar>(skel: &SkeletalCloud<T>, n_per_sphere: usize) -> Result<PointCloud<T>> {
    ensure!(n_per_sphere >= 1, "need at least one sample per sphere");
    let dirs = fibonacci_directions(n_per_sphere);
    let points = skel.spheres().iter().flat_map(|s| surface_points(s, &dirs)).collect();
    Ok(PointCloud::from_trusted(points))
}

pub const SKELETON_CSV_HEADER: &str = "cx,cy,cz,r";

/// One `cx,cy,cz,r` row per sphere, shortest round-trip float formatting.
pub fn export_skeleton<T: Scalar>(skel: &SkeletalCloud<T>, path: &Path) -> Result<()> {
    let mut out = String::with_capacity(32 * (skel.len() + 1));
    out.push_str(SKELETON_CSV_HEADER);
    out.push('\n');
    for s in skel.spheres() {
        let [x, y, z] = s.center;
        out.push_str(&format!("{x},{y},{z},{}\n", s.radius));
    }
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(out.as_bytes()).map_err(|e| Error::io(path, e))
}

pub fn import_skeleton<T: Scalar + std::str::FromStr>(path: &Path) -> Result<SkeletalCloud<T>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, h)) if h.trim() == SKELETON_CSV_HEADER => {}
        _ => {
            return Err(Error::Parse {
                path: path.into(),
                line: 1,
                message: format!("expected header `{SKELETON_CSV_HEADER}`"),
            })
        }
    }
    let mut spheres = Vec::new();
    for (i, line) in lines {
        if line.trim().is_empty() {
            continue;
        }
        let parse_err = |message: String| Error::Parse {
            path: path.into(),
            line: i + 1,
            message,
        };
        let vals = line
            .split(',')
            .map(|f| f.trim().parse::<T>().map_err(|_| parse_err(format!("bad number `{f}`"))))
            .collect::<Result<Vec<T>>>()?;
        if vals.len() != 4 {
            return Err(parse_err(format!("expected 4 fields, got {}", vals.len())));
        }
        let sphere = SkeletalSphere::new([vals[0], vals[1], vals[2]], vals[3]).map_err(|e| parse_err(e.to_string()))?;
        spheres.push(sphere);
    }
    SkeletalCloud::new(spheres).map_err(|_| Error::format(format!("{} holds no spheres", path.display())))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{apply_rigid, norm, rotation_axis_angle};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn sphere(c: [f64; 3], r: f64) -> SkeletalSphere<f64> {
        SkeletalSphere::new(c, r).unwrap()
    }

    #[test]
    fn samples_lie_on_the_sphere() {
        for n in [1, 2, 7, 64, 500] {
            let s = sample_sphere_surface(&sphere([0.0; 3], 2.0), n).unwrap();
            assert_eq!(s.len(), n);
            for p in s.points() {
                assert!((norm(p) - 2.0).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn single_sample_uses_the_equatorial_direction() {
        let s = sample_sphere_surface(&sphere([1.0, 2.0, 3.0], 0.5), 1).unwrap();
        assert_eq!(s.points()[0], [1.5, 2.0, 3.0]);
        assert!(sample_sphere_surface(&sphere([0.0; 3], 1.0), 0).is_err());
    }

    #[test]
    fn lattice_is_nearly_balanced() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..20 {
            let c = [0; 3].map(|_| rng.random_range(-3.0..3.0));
            let r = rng.random_range(0.1..2.0);
            let s = sample_sphere_surface(&sphere(c, r), 64).unwrap();
            let mean = PointCloud::centroid(&s);
            let off = norm(&[mean[0] - c[0], mean[1] - c[1], mean[2] - c[2]]);
            assert!(off < 0.15 * r, "offset {off} for radius {r}");
        }
    }

    #[test]
    fn directions_are_unit_and_distinct() {
        let dirs = fibonacci_directions(4096);
        for d in &dirs {
            assert!((norm(d) - 1.0).abs() < 1e-12);
        }
        let mut keys: Vec<[u64; 3]> = dirs.iter().map(|d| d.map(f64::to_bits)).collect();
        keys.sort_unstable();
        keys.dedup();
        assert_eq!(keys.len(), 4096);
    }

    #[test]
    fn radius_must_be_positive() {
        assert!(SkeletalSphere::new([0.0; 3], 0.0f64).is_err());
        assert!(SkeletalSphere::new([0.0; 3], -1.0f64).is_err());
        assert!(SkeletalSphere::new([0.0; 3], f64::NAN).is_err());
        assert!(SkeletalCloud::<f64>::new(vec![]).is_err());
    }

    #[test]
    fn reconstruct_one_sphere_equals_surface_sampling() {
        let s = sphere([0.2, -0.1, 0.4], 0.3);
        let skel = SkeletalCloud::new(vec![s]).unwrap();
        assert_eq!(reconstruct(&skel, 12).unwrap(), sample_sphere_surface(&s, 12).unwrap());
    }

    #[test]
    fn reconstruct_two_disjoint_spheres() {
        let a = sphere([-5.0, 0.0, 0.0], 1.0);
        let b = sphere([5.0, 0.0, 0.0], 0.5);
        let skel = SkeletalCloud::new(vec![a, b]).unwrap();
        let pts = reconstruct(&skel, 10).unwrap();
        assert_eq!(pts.len(), 20);
        for (i, p) in pts.points().iter().enumerate() {
            let s = if i < 10 { a } else { b };
            let d = [p[0] - s.center[0], p[1] - s.center[1], p[2] - s.center[2]];
            assert!((norm(&d) - s.radius).abs() < 1e-9);
        }
    }

    #[test]
    fn sampling_commutes_with_rotation() {
        let r = rotation_axis_angle([0.3, -1.0, 0.2], 1.1).unwrap();
        let t = [0.5, 0.0, -0.25];
        let s = sphere([0.1, 0.2, 0.3], 0.7);
        let samples = sample_sphere_surface(&s, 32).unwrap();
        let moved_center = apply_rigid(&PointCloud::new(vec![s.center]).unwrap(), &r, t).unwrap();
        let dirs = fibonacci_directions(32);
        let rotated_dirs = PointCloud::new(dirs).unwrap();
        let rotated_dirs = apply_rigid(&rotated_dirs, &r, [0.0; 3]).unwrap();
        let moved_samples = apply_rigid(&samples, &r, t).unwrap();
        let c = moved_center.points()[0];
        for (p, v) in moved_samples.points().iter().zip(rotated_dirs.points()) {
            for a in 0..3 {
                assert!((p[a] - (c[a] + 0.7 * v[a])).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn csv_export_import_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("skel.csv");
        let one = SkeletalCloud::new(vec![SkeletalSphere::new([0.0f32; 3], 1.0).unwrap()]).unwrap();
        export_skeleton(&one, &path).unwrap();
        assert_eq!(fs::read_to_string(&path).unwrap(), "cx,cy,cz,r\n0,0,0,1\n");

        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let spheres = (0..32)
            .map(|_| SkeletalSphere::new([0; 3].map(|_| rng.random_range(-1.0f32..1.0)), rng.random_range(0.01f32..0.5)).unwrap())
            .collect();
        let skel = SkeletalCloud::new(spheres).unwrap();
        export_skeleton(&skel, &path).unwrap();
        assert_eq!(fs::read_to_string(&path).unwrap().lines().count(), 33);
        let back: SkeletalCloud<f32> = import_skeleton(&path).unwrap();
        assert_eq!(back, skel);
    }

    #[test]
    fn import_rejects_bad_rows() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.csv");
        fs::write(&path, "cx,cy,cz,r\n0,0,0\n").unwrap();
        assert!(matches!(import_skeleton::<f32>(&path), Err(Error::Parse { line: 2, .. })));
        fs::write(&path, "cx,cy,cz,r\n0,0,0,-1\n").unwrap();
        assert!(matches!(import_skeleton::<f32>(&path), Err(Error::Parse { line: 2, .. })));
        fs::write(&path, "x,y\n").unwrap();
        assert!(matches!(import_skeleton::<f32>(&path), Err(Error::Parse { line: 1, .. })));
    }
}
