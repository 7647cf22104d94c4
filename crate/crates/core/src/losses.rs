//! Skeletal and classification objectives with exact gradients with respect
//! to sphere centers and radii.
//!
//! Nearest-neighbour terms take the lowest index on ties, and the gradient of
//! a distance between coincident points is defined as zero.

use serde::{Deserialize, Serialize};

use crate::autodiff::Scalar;
use crate::error::{ensure, Result};
use crate::geometry::{sq_dist, Point, PointCloud};
use crate::skeleton::{fibonacci_directions, SkeletalCloud};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Reduction {
    /// Each nearest-neighbour side is averaged over its own set.
    #[default]
    Mean,
    Sum,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SkeletalLossWeights {
    pub w_p2s: f64,
    pub w_sampling: f64,
    pub w_radius: f64,
    #[serde(default)]
    pub reduction: Reduction,
}

impl Default for SkeletalLossWeights {
    fn default() -> Self {
        Self {
            w_p2s: 0.3,
            w_sampling: 1.0,
            w_radius: 0.4,
            reduction: Reduction::Mean,
        }
    }
}

impl SkeletalLossWeights {
    pub fn new(w_p2s: f64, w_sampling: f64, w_radius: f64) -> Result<Self> {
        let w = Self {
            w_p2s,
            w_sampling,
            w_radius,
            reduction: Reduction::Mean,
        };
        w.validate()?;
        Ok(w)
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("w_p2s", self.w_p2s), ("w_sampling", self.w_sampling), ("w_radius", self.w_radius)] {
            ensure!(v >= 0.0 && v.is_finite(), "{} must be a finite nonnegative weight, got {}", name, v);
        }
        Ok(())
    }
}

/// A loss value with its gradient with respect to every sphere.
#[derive(Debug, Clone, PartialEq)]
pub struct LossGrad<T = f32> {
    pub value: T,
    pub grad_centers: Vec<Point<T>>,
    pub grad_radii: Vec<T>,
}

impl<T: Scalar> LossGrad<T> {
    fn zeros(m: usize) -> Self {
        Self {
            value: T::zero(),
            grad_centers: vec![[T::zero(); 3]; m],
            grad_radii: vec![T::zero(); m],
        }
    }

    fn add_scaled(&mut self, other: &Self, w: T) {
        self.value = self.value + w * other.value;
        for (a, b) in self.grad_centers.iter_mut().zip(&other.grad_centers) {
            for k in 0..3 {
                a[k] = a[k] + w * b[k];
            }
        }
        for (a, &b) in self.grad_radii.iter_mut().zip(&other.grad_radii) {
            *a = *a + w * b;
        }
    }
}

fn side_scales<T: Scalar>(reduction: Reduction, n_a: usize, n_b: usize) -> (T, T) {
    match reduction {
        Reduction::Mean => (T::one() / T::of(n_a as f64), T::one() / T::of(n_b as f64)),
        Reduction::Sum => (T::one(), T::one()),
    }
}

/// Unit vector from `b` to `a`, zero when they coincide.
#[inline]
fn unit_from<T: Scalar>(a: &Point<T>, b: &Point<T>, dist: T) -> Point<T> {
    if dist > T::zero() {
        [0, 1, 2].map(|k| (a[k] - b[k]) / dist)
    } else {
        [T::zero(); 3]
    }
}

/// Index of the nearest candidate and its squared distance.
#[inline]
fn nearest<T: Scalar>(q: &Point<T>, candidates: &[Point<T>]) -> (usize, T) {
    let mut best = 0;
    let mut best_d = T::infinity();
    for (i, c) in candidates.iter().enumerate() {
        let d = sq_dist(q, c);
        if d < best_d {
            best_d = d;
            best = i;
        }
    }
    (best, best_d)
}

fn check_inputs<T: Scalar>(points: &[Point<T>], centers: &[Point<T>], radii: &[T]) -> Result<()> {
    ensure!(!points.is_empty(), "loss needs a nonempty point set");
    ensure!(!centers.is_empty(), "loss needs at least one sphere");
    ensure!(centers.len() == radii.len(), "{} centers but {} radii", centers.len(), radii.len());
    Ok(())
}

/// Signed point-to-sphere distance in both directions.
pub fn p2s_parts<T: Scalar>(points: &[Point<T>], centers: &[Point<T>], radii: &[T], reduction: Reduction) -> Result<LossGrad<T>> {
    check_inputs(points, centers, radii)?;
    let (sa, sb) = side_scales::<T>(reduction, points.len(), centers.len());
    let mut out = LossGrad::zeros(centers.len());
    let mut a = T::zero();
    for p in points {
        let (j, d2) = nearest(p, centers);
        let d = d2.sqrt();
        a = a + (d - radii[j]);
        // d/dc ||p - c|| = -(p - c) / ||p - c||
        let u = unit_from(p, &centers[j], d);
        for k in 0..3 {
            out.grad_centers[j][k] = out.grad_centers[j][k] - sa * u[k];
        }
        out.grad_radii[j] = out.grad_radii[j] - sa;
    }
    let mut b = T::zero();
    for (j, c) in centers.iter().enumerate() {
        let (i, d2) = nearest(c, points);
        let d = d2.sqrt();
        b = b + (d - radii[j]);
        let u = unit_from(c, &points[i], d);
        for k in 0..3 {
            out.grad_centers[j][k] = out.grad_centers[j][k] + sb * u[k];
        }
        out.grad_radii[j] = out.grad_radii[j] - sb;
    }
    out.value = sa * a + sb * b;
    Ok(out)
}

/// Unsquared Chamfer distance between `points` and the lattice samples
/// `c_j + r_j v_i` of every sphere.
pub fn sampling_parts<T: Scalar>(
    points: &[Point<T>],
    centers: &[Point<T>],
    radii: &[T],
    n_per_sphere: usize,
    reduction: Reduction,
) -> Result<LossGrad<T>> {
    check_inputs(points, centers, radii)?;
    ensure!(n_per_sphere >= 1, "need at least one sample per sphere");
    let dirs: Vec<Point<T>> = fibonacci_directions(n_per_sphere)
        .iter()
        .map(|v| v.map(T::of))
        .collect();
    let samples: Vec<Point<T>> = centers
        .iter()
        .zip(radii)
        .flat_map(|(c, &r)| dirs.iter().map(move |v| [0, 1, 2].map(|k| c[k] + r * v[k])))
        .collect();
    let (np, nt) = (points.len(), samples.len());
    let (sa, sb) = side_scales::<T>(reduction, np, nt);

    // One pass over the distance matrix gives both nearest-neighbour directions.
    let mut row_best = vec![(usize::MAX, T::infinity()); np];
    let mut col_best = vec![(usize::MAX, T::infinity()); nt];
    for (i, p) in points.iter().enumerate() {
        let rb = &mut row_best[i];
        for (t, s) in samples.iter().enumerate() {
            let d = sq_dist(p, s);
            if d < rb.1 {
                *rb = (t, d);
            }
            let cb = &mut col_best[t];
            if d < cb.1 {
                *cb = (i, d);
            }
        }
    }

    let mut out = LossGrad::zeros(centers.len());
    let mut push = |t: usize, g: Point<T>, scale: T| {
        let (j, v) = (t / n_per_sphere, &dirs[t % n_per_sphere]);
        let mut dr = T::zero();
        for k in 0..3 {
            out.grad_centers[j][k] = out.grad_centers[j][k] + scale * g[k];
            dr = dr + g[k] * v[k];
        }
        out.grad_radii[j] = out.grad_radii[j] + scale * dr;
    };
    let mut a = T::zero();
    for (i, &(t, d2)) in row_best.iter().enumerate() {
        let d = d2.sqrt();
        a = a + d;
        push(t, unit_from(&samples[t], &points[i], d), sa);
    }
    let mut b = T::zero();
    for (t, &(i, d2)) in col_best.iter().enumerate() {
        let d = d2.sqrt();
        b = b + d;
        push(t, unit_from(&samples[t], &points[i], d), sb);
    }
    out.value = sa * a + sb * b;
    Ok(out)
}

/// Negative total (or mean) radius.
pub fn radius_parts<T: Scalar>(radii: &[T], reduction: Reduction) -> Result<LossGrad<T>> {
    ensure!(!radii.is_empty(), "loss needs at least one sphere");
    let scale = match reduction {
        Reduction::Mean => T::one() / T::of(radii.len() as f64),
        Reduction::Sum => T::one(),
    };
    let mut out = LossGrad::zeros(radii.len());
    out.value = -scale * radii.iter().copied().sum::<T>();
    out.grad_radii.iter_mut().for_each(|g| *g = -scale);
    Ok(out)
}

pub fn skeletal_parts<T: Scalar>(
    points: &[Point<T>],
    centers: &[Point<T>],
    radii: &[T],
    weights: &SkeletalLossWeights,
    n_per_sphere: usize,
) -> Result<LossGrad<T>> {
    weights.validate()?;
    check_inputs(points, centers, radii)?;
    ensure!(n_per_sphere >= 1, "need at least one sample per sphere");
    let mut total = LossGrad::zeros(centers.len());
    if weights.w_p2s != 0.0 {
        let p2s = p2s_parts(points, centers, radii, weights.reduction)?;
        total.add_scaled(&p2s, T::of(weights.w_p2s));
    }
    if weights.w_sampling != 0.0 {
        let s = sampling_parts(points, centers, radii, n_per_sphere, weights.reduction)?;
        total.add_scaled(&s, T::of(weights.w_sampling));
    }
    if weights.w_radius != 0.0 {
        let r = radius_parts(radii, weights.reduction)?;
        total.add_scaled(&r, T::of(weights.w_radius));
    }
    Ok(total)
}

pub fn loss_p2s<T: Scalar>(cloud: &PointCloud<T>, skel: &SkeletalCloud<T>, reduction: Reduction) -> Result<LossGrad<T>> {
    p2s_parts(cloud.points(), &skel.centers(), &skel.radii(), reduction)
}

pub fn loss_sampling<T: Scalar>(
    cloud: &PointCloud<T>,
    skel: &SkeletalCloud<T>,
    n_per_sphere: usize,
    reduction: Reduction,
) -> Result<LossGrad<T>> {
    sampling_parts(cloud.points(), &skel.centers(), &skel.radii(), n_per_sphere, reduction)
}

pub fn loss_radius<T: Scalar>(skel: &SkeletalCloud<T>, reduction: Reduction) -> Result<LossGrad<T>> {
    radius_parts(&skel.radii(), reduction)
}

pub fn loss_skeletal<T: Scalar>(
    cloud: &PointCloud<T>,
    skel: &SkeletalCloud<T>,
    weights: &SkeletalLossWeights,
    n_per_sphere: usize,
) -> Result<LossGrad<T>> {
    skeletal_parts(cloud.points(), &skel.centers(), &skel.radii(), weights, n_per_sphere)
}

/// Unweighted sum of the skeletal and classification objectives.
pub fn loss_total<T: Scalar>(skeletal: T, classification: T) -> Result<T> {
    ensure!(
        skeletal.is_finite() && classification.is_finite(),
        "loss terms must be finite, got {} and {}",
        skeletal,
        classification
    );
    Ok(skeletal + classification)
}

/// Mean-reduced Chamfer distance between two point sets; used to score reconstructions.
pub fn chamfer<T: Scalar>(a: &[Point<T>], b: &[Point<T>]) -> Result<f64> {
    ensure!(!a.is_empty() && !b.is_empty(), "chamfer distance needs nonempty sets");
    let side = |x: &[Point<T>], y: &[Point<T>]| -> f64 {
        x.iter().map(|p| nearest(p, y).1.f64().sqrt()).sum::<f64>() / x.len() as f64
    };
    Ok(side(a, b) + side(b, a))
}

/// Projected gradient descent on free sphere parameters, with radii kept
/// above `min_radius`. Returns the fitted skeleton and the objective before
/// every step plus the final value.
pub fn fit_free_skeleton(
    cloud: &PointCloud<f64>,
    init: &SkeletalCloud<f64>,
    weights: &SkeletalLossWeights,
    n_per_sphere: usize,
    steps: usize,
    learning_rate: f64,
) -> Result<(SkeletalCloud<f64>, Vec<f64>)> {
    const MIN_RADIUS: f64 = 1e-4;
    ensure!(learning_rate > 0.0, "learning rate must be positive");
    let mut centers = init.centers();
    let mut radii = init.radii();
    let mut history = Vec::with_capacity(steps + 1);
    for _ in 0..steps {
        let lg = skeletal_parts(cloud.points(), &centers, &radii, weights, n_per_sphere)?;
        history.push(lg.value);
        for (c, g) in centers.iter_mut().zip(&lg.grad_centers) {
            for k in 0..3 {
                c[k] -= learning_rate * g[k];
            }
        }
        for (r, g) in radii.iter_mut().zip(&lg.grad_radii) {
            *r = (*r - learning_rate * g).max(MIN_RADIUS);
        }
    }
    history.push(skeletal_parts(cloud.points(), &centers, &radii, weights, n_per_sphere)?.value);
    Ok((SkeletalCloud::from_parts(&centers, &radii)?, history))
}

#[cfg(test)]
mod tests;
