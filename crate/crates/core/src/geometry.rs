//! Point-cloud primitives: farthest point sampling, k-nearest neighbours,
//! patch tokenization and rigid transforms.
//!
//! All distance ties resolve toward the lowest point index so that every
//! operation is a deterministic function of its inputs.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::Scalar;
use crate::error::{ensure, Result};

pub type Point<T = f32> = [T; 3];

#[derive(Debug, Clone, PartialEq)]
pub struct PointCloud<T = f32> {
    points: Vec<Point<T>>,
}

#[inline]
pub(crate) fn sq_dist<T: Scalar>(a: &Point<T>, b: &Point<T>) -> T {
    let dx = a[0] - b[0];
    let dy = a[1] - b[1];
    let dz = a[2] - b[2];
    dx * dx + dy * dy + dz * dz
}

#[inline]
pub(crate) fn norm<T: Scalar>(p: &Point<T>) -> T {
    (p[0] * p[0] + p[1] * p[1] + p[2] * p[2]).sqrt()
}

impl<T: Scalar> PointCloud<T> {
    /// Rejects empty clouds and non-finite coordinates.
    pub fn new(points: Vec<Point<T>>) -> Result<Self> {
        ensure!(!points.is_empty(), "point cloud must hold at least one point");
        if let Some(i) = points.iter().position(|p| p.iter().any(|c| !c.is_finite())) {
            return Err(crate::Error::invalid(format!("point {i} has a non-finite coordinate")));
        }
        Ok(Self { points })
    }

    pub fn points(&self) -> &[Point<T>] {
        &self.points
    }

    pub fn into_points(self) -> Vec<Point<T>> {
        self.points
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn centroid(&self) -> [f64; 3] {
        let mut c = [0.0; 3];
        for p in &self.points {
            for a in 0..3 {
                c[a] += p[a].f64();
            }
        }
        let n = self.points.len() as f64;
        c.map(|v| v / n)
    }

    pub fn max_norm(&self) -> T {
        self.points.iter().map(norm).fold(T::zero(), T::max)
    }

    pub fn translated(&self, t: [f64; 3]) -> Self {
        let points = self
            .points
            .iter()
            .map(|p| [0, 1, 2].map(|a| T::of(p[a].f64() + t[a])))
            .collect();
        Self { points }
    }

    pub fn cast<U: Scalar>(&self) -> PointCloud<U> {
        PointCloud {
            points: self.points.iter().map(|p| p.map(|c| U::of(c.f64()))).collect(),
        }
    }

    /// Builds a cloud from points already known to be finite and non-empty.
    pub(crate) fn from_trusted(points: Vec<Point<T>>) -> Self {
        debug_assert!(!points.is_empty());
        Self { points }
    }
}

/// How farthest point sampling picks its first point.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StartRule {
    Index(usize),
    Seeded(u64),
}

impl Default for StartRule {
    fn default() -> Self {
        StartRule::Index(0)
    }
}

impl StartRule {
    fn resolve(self, n: usize) -> Result<usize> {
        match self {
            StartRule::Index(i) => {
                ensure!(i < n, "start index {} out of range for {} points", i, n);
                Ok(i)
            }
            StartRule::Seeded(seed) => Ok(ChaCha8Rng::seed_from_u64(seed).random_range(0..n)),
        }
    }
}

/// Greedy max-min selection of `m` points. Output is in selection order.
pub fn fps<T: Scalar>(cloud: &PointCloud<T>, m: usize, start: StartRule) -> Result<(PointCloud<T>, Vec<usize>)> {
    let n = cloud.len();
    ensure!(m >= 1 && m <= n, "fps needs 1 <= M <= N, got M = {} with N = {}", m, n);
    let pts = cloud.points();
    let first = start.resolve(n)?;
    let mut selected = Vec::with_capacity(m);
    let mut taken = vec![false; n];
    let mut min_d = vec![T::infinity(); n];
    let mut current = first;
    loop {
        selected.push(current);
        taken[current] = true;
        if selected.len() == m {
            break;
        }
        let c = pts[current];
        let mut best = usize::MAX;
        let mut best_d = T::neg_infinity();
        for (i, p) in pts.iter().enumerate() {
            let d = sq_dist(p, &c);
            if d < min_d[i] {
                min_d[i] = d;
            }
            if !taken[i] && min_d[i] > best_d {
                best_d = min_d[i];
                best = i;
            }
        }
        current = best;
    }
    let centers = selected.iter().map(|&i| pts[i]).collect();
    Ok((PointCloud::from_trusted(centers), selected))
}

/// Row-major `queries x k` table of cloud indices.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NeighborTable {
    k: usize,
    indices: Vec<usize>,
}

impl NeighborTable {
    pub fn k(&self) -> usize {
        self.k
    }

    pub fn len(&self) -> usize {
        self.indices.len() / self.k
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    pub fn row(&self, q: usize) -> &[usize] {
        &self.indices[q * self.k..(q + 1) * self.k]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[usize]> {
        self.indices.chunks_exact(self.k)
    }
}

/// Exhaustive k-nearest-neighbour search, ascending by distance.
pub fn knn<T: Scalar>(queries: &PointCloud<T>, cloud: &PointCloud<T>, k: usize) -> Result<NeighborTable> {
    let n = cloud.len();
    ensure!(k >= 1 && k <= n, "knn needs 1 <= K <= N, got K = {} with N = {}", k, n);
    let mut indices = Vec::with_capacity(queries.len() * k);
    let mut scored: Vec<(T, usize)> = Vec::with_capacity(n);
    let order = |a: &(T, usize), b: &(T, usize)| a.0.partial_cmp(&b.0).unwrap().then(a.1.cmp(&b.1));
    for q in queries.points() {
        scored.clear();
        scored.extend(cloud.points().iter().enumerate().map(|(i, p)| (sq_dist(q, p), i)));
        if k < n {
            scored.select_nth_unstable_by(k - 1, order);
        }
        let head = &mut scored[..k];
        head.sort_unstable_by(order);
        indices.extend(head.iter().map(|&(_, i)| i));
    }
    Ok(NeighborTable { k, indices })
}

/// FPS centers with their kNN neighbourhoods stored center-relative.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchSet<T = f32> {
    pub centers: PointCloud<T>,
    /// `M * K` offsets, patch-major.
    pub neighborhoods: Vec<Point<T>>,
    pub center_indices: Vec<usize>,
    pub neighbor_indices: NeighborTable,
}

impl<T: Scalar> PatchSet<T> {
    pub fn num_patches(&self) -> usize {
        self.centers.len()
    }

    pub fn patch_size(&self) -> usize {
        self.neighbor_indices.k()
    }

    pub fn patch(&self, i: usize) -> &[Point<T>] {
        let k = self.patch_size();
        &self.neighborhoods[i * k..(i + 1) * k]
    }

    pub fn cast<U: Scalar>(&self) -> PatchSet<U> {
        PatchSet {
            centers: self.centers.cast(),
            neighborhoods: self.neighborhoods.iter().map(|p| p.map(|c| U::of(c.f64()))).collect(),
            center_indices: self.center_indices.clone(),
            neighbor_indices: self.neighbor_indices.clone(),
        }
    }
}

pub fn tokenize<T: Scalar>(cloud: &PointCloud<T>, m: usize, k: usize, start: StartRule) -> Result<PatchSet<T>> {
    let (centers, center_indices) = fps(cloud, m, start)?;
    let table = knn(&centers, cloud, k)?;
    let pts = cloud.points();
    let mut neighborhoods = Vec::with_capacity(m * k);
    for (c, row) in centers.points().iter().zip(table.rows()) {
        for &j in row {
            let p = pts[j];
            neighborhoods.push([p[0] - c[0], p[1] - c[1], p[2] - c[2]]);
        }
    }
    Ok(PatchSet {
        centers,
        neighborhoods,
        center_indices,
        neighbor_indices: table,
    })
}

pub type Mat3 = [[f64; 3]; 3];

pub const IDENTITY: Mat3 = [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]];

pub fn rotation_z(angle: f64) -> Mat3 {
    let (s, c) = angle.sin_cos();
    [[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]]
}

/// Rodrigues rotation about a (not necessarily unit) axis.
pub fn rotation_axis_angle(axis: [f64; 3], angle: f64) -> Result<Mat3> {
    let len = (axis[0] * axis[0] + axis[1] * axis[1] + axis[2] * axis[2]).sqrt();
    ensure!(len > 0.0 && len.is_finite(), "rotation axis must be a finite nonzero vector");
    let [x, y, z] = axis.map(|a| a / len);
    let (s, c) = angle.sin_cos();
    let t = 1.0 - c;
    Ok([
        [t * x * x + c, t * x * y - s * z, t * x * z + s * y],
        [t * x * y + s * z, t * y * y + c, t * y * z - s * x],
        [t * x * z - s * y, t * y * z + s * x, t * z * z + c],
    ])
}

pub fn transpose(m: &Mat3) -> Mat3 {
    let mut t = [[0.0; 3]; 3];
    for (i, row) in m.iter().enumerate() {
        for (j, v) in row.iter().enumerate() {
            t[j][i] = *v;
        }
    }
    t
}

fn det(m: &Mat3) -> f64 {
    m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1]) - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
        + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0])
}

pub fn check_rotation(r: &Mat3) -> Result<()> {
    for i in 0..3 {
        for j in 0..3 {
            let dot: f64 = (0..3).map(|a| r[i][a] * r[j][a]).sum();
            let want = if i == j { 1.0 } else { 0.0 };
            ensure!((dot - want).abs() <= 1e-6, "rotation matrix is not orthonormal");
        }
    }
    ensure!((det(r) - 1.0).abs() <= 1e-6, "rotation matrix must have determinant +1");
    Ok(())
}

/// Applies any linear map (no orthonormality check).
pub(crate) fn apply_linear<T: Scalar>(cloud: &PointCloud<T>, m: &Mat3, t: [f64; 3]) -> PointCloud<T> {
    let points = cloud
        .points()
        .iter()
        .map(|p| {
            let v = p.map(|c| c.f64());
            [0, 1, 2].map(|i| T::of(m[i][0] * v[0] + m[i][1] * v[1] + m[i][2] * v[2] + t[i]))
        })
        .collect();
    PointCloud::from_trusted(points)
}

/// `p -> R p + t` for a proper rotation `R`.
pub fn apply_rigid<T: Scalar>(cloud: &PointCloud<T>, rotation: &Mat3, translation: [f64; 3]) -> Result<PointCloud<T>> {
    check_rotation(rotation)?;
    ensure!(translation.iter().all(|v| v.is_finite()), "translation must be finite");
    Ok(apply_linear(cloud, rotation, translation))
}

pub fn rotate_z<T: Scalar>(cloud: &PointCloud<T>, angle: f64) -> PointCloud<T> {
    apply_linear(cloud, &rotation_z(angle), [0.0; 3])
}

/// Centers on the centroid and scales so the farthest point has norm 1.
pub fn normalize_unit_sphere<T: Scalar>(cloud: &PointCloud<T>) -> PointCloud<T> {
    let c = cloud.centroid();
    let centered: Vec<[f64; 3]> = cloud
        .points()
        .iter()
        .map(|p| [p[0].f64() - c[0], p[1].f64() - c[1], p[2].f64() - c[2]])
        .collect();
    let max = centered.iter().map(|p| norm(p)).fold(0.0, f64::max);
    let scale = if max > 0.0 { 1.0 / max } else { 1.0 };
    PointCloud::from_trusted(centered.iter().map(|p| p.map(|v| T::of(v * scale))).collect())
}
