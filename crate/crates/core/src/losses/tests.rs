use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::autodiff::{gradcheck, GradcheckOptions};
use crate::geometry::{apply_rigid, norm, rotation_axis_angle};
use crate::skeleton::{reconstruct, SkeletalSphere};

fn dist(a: &[f64; 3], b: &[f64; 3]) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)).sqrt()
}

/// Literal double-loop point-to-sphere sum (argmin sphere's radius).
fn p2s_oracle(p: &[[f64; 3]], c: &[[f64; 3]], r: &[f64]) -> f64 {
    let mut a = 0.0;
    for x in p {
        let mut best = (f64::INFINITY, 0);
        for (j, cj) in c.iter().enumerate() {
            let d = dist(x, cj);
            if d < best.0 {
                best = (d, j);
            }
        }
        a += best.0 - r[best.1];
    }
    let mut b = 0.0;
    for (j, cj) in c.iter().enumerate() {
        let m = p.iter().map(|x| dist(cj, x)).fold(f64::INFINITY, f64::min);
        b += m - r[j];
    }
    a + b
}

/// Literal double-loop Chamfer sum over lattice samples.
fn sampling_oracle(p: &[[f64; 3]], c: &[[f64; 3]], r: &[f64], n: usize) -> f64 {
    let dirs = fibonacci_directions(n);
    let mut t = Vec::new();
    for (cj, rj) in c.iter().zip(r) {
        for v in &dirs {
            t.push([cj[0] + rj * v[0], cj[1] + rj * v[1], cj[2] + rj * v[2]]);
        }
    }
    let a: f64 = p.iter().map(|x| t.iter().map(|y| dist(x, y)).fold(f64::INFINITY, f64::min)).sum();
    let b: f64 = t.iter().map(|y| p.iter().map(|x| dist(x, y)).fold(f64::INFINITY, f64::min)).sum();
    a + b
}

struct Instance {
    points: Vec<[f64; 3]>,
    centers: Vec<[f64; 3]>,
    radii: Vec<f64>,
}

fn instance(seed: u64, np: usize, ns: usize) -> Instance {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut pt = || [0; 3].map(|_| rng.random_range(-1.0..1.0));
    let points = (0..np).map(|_| pt()).collect();
    let centers = (0..ns).map(|_| pt()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xabc);
    let radii = (0..ns).map(|_| rng.random_range(0.05..0.6)).collect();
    Instance { points, centers, radii }
}

fn flatten(c: &[[f64; 3]], r: &[f64]) -> Vec<f64> {
    c.iter().flatten().copied().chain(r.iter().copied()).collect()
}

fn unflatten(theta: &[f64], m: usize) -> (Vec<[f64; 3]>, Vec<f64>) {
    let c = (0..m).map(|j| [theta[3 * j], theta[3 * j + 1], theta[3 * j + 2]]).collect();
    (c, theta[3 * m..].to_vec())
}

fn check_grad<F>(inst: &Instance, f: F, tol: f64)
where
    F: Fn(&[[f64; 3]], &[[f64; 3]], &[f64]) -> LossGrad<f64>,
{
    let m = inst.centers.len();
    let lg = f(&inst.points, &inst.centers, &inst.radii);
    let analytic = flatten(&lg.grad_centers, &lg.grad_radii);
    let report = gradcheck(
        |th| {
            let (c, r) = unflatten(th, m);
            f(&inst.points, &c, &r).value
        },
        &flatten(&inst.centers, &inst.radii),
        &analytic,
        GradcheckOptions {
            // Nearest-neighbour assignments switch at kinks; a small step keeps
            // the stencil on one side of them.
            step: 1e-6,
            tolerance: tol,
            ..Default::default()
        },
    );
    assert!(report.passed(), "{report:?}");
}

#[test]
fn p2s_vanishes_for_points_on_the_sphere() {
    let p = vec![
        [1.0, 0.0, 0.0],
        [-1.0, 0.0, 0.0],
        [0.0, 1.0, 0.0],
        [0.0, -1.0, 0.0],
        [0.0, 0.0, 1.0],
        [0.0, 0.0, -1.0],
        [1.0, 0.0, 0.0],
        [0.0, 0.0, -1.0],
    ];
    let lg = p2s_parts(&p, &[[0.0; 3]], &[1.0], Reduction::Mean).unwrap();
    assert_eq!(lg.value, 0.0);
}

#[test]
fn p2s_single_point_single_sphere() {
    for red in [Reduction::Mean, Reduction::Sum] {
        let lg = p2s_parts(&[[2.0, 0.0, 0.0]], &[[0.0; 3]], &[1.0], red).unwrap();
        assert_eq!(lg.value, 2.0);
    }
}

#[test]
fn p2s_rejects_empty_inputs() {
    assert!(p2s_parts::<f64>(&[], &[[0.0; 3]], &[1.0], Reduction::Mean).is_err());
    assert!(p2s_parts::<f64>(&[[0.0; 3]], &[], &[], Reduction::Mean).is_err());
    assert!(sampling_parts::<f64>(&[], &[[0.0; 3]], &[1.0], 4, Reduction::Mean).is_err());
}

#[test]
fn p2s_coincident_point_has_zero_direction_gradient() {
    let lg = p2s_parts(&[[0.5, 0.5, 0.5]], &[[0.5, 0.5, 0.5]], &[0.2], Reduction::Sum).unwrap();
    assert_eq!(lg.grad_centers[0], [0.0; 3]);
    assert_eq!(lg.grad_radii[0], -2.0);
}

#[test]
fn p2s_and_sampling_sums_match_double_loop_oracles() {
    for seed in 0..50 {
        let inst = instance(seed, 5 + seed as usize % 30, 1 + seed as usize % 5);
        let got = p2s_parts(&inst.points, &inst.centers, &inst.radii, Reduction::Sum).unwrap().value;
        let want = p2s_oracle(&inst.points, &inst.centers, &inst.radii);
        assert!((got - want).abs() <= 1e-6 * want.abs().max(1.0), "p2s seed {seed}");
        let got = sampling_parts(&inst.points, &inst.centers, &inst.radii, 8, Reduction::Sum).unwrap().value;
        let want = sampling_oracle(&inst.points, &inst.centers, &inst.radii, 8);
        assert!((got - want).abs() <= 1e-6 * want.abs(), "sampling seed {seed}");
    }
}

#[test]
fn mean_reduction_divides_each_side_by_its_size() {
    let inst = instance(77, 12, 3);
    let n = 5;
    let sum_a = p2s_parts(&inst.points, &inst.centers, &inst.radii, Reduction::Sum).unwrap();
    let mean = p2s_parts(&inst.points, &inst.centers, &inst.radii, Reduction::Mean).unwrap();
    // With |P| = 12 and |S| = 3 the two sides scale differently, so mean != sum / k.
    assert!((mean.value - sum_a.value / 12.0).abs() > 1e-9);
    let s_sum = sampling_parts(&inst.points, &inst.centers, &inst.radii, n, Reduction::Sum).unwrap();
    let s_mean = sampling_parts(&inst.points, &inst.centers, &inst.radii, n, Reduction::Mean).unwrap();
    assert!(s_mean.value < s_sum.value);
}

#[test]
fn p2s_gradients_match_finite_differences() {
    for seed in 0..10 {
        let inst = instance(100 + seed, 20, 4);
        for red in [Reduction::Mean, Reduction::Sum] {
            check_grad(&inst, |p, c, r| p2s_parts(p, c, r, red).unwrap(), 1e-5);
        }
    }
}

#[test]
fn sampling_gradients_match_finite_differences() {
    for seed in 0..10 {
        let inst = instance(200 + seed, 20, 4);
        for red in [Reduction::Mean, Reduction::Sum] {
            check_grad(&inst, |p, c, r| sampling_parts(p, c, r, 6, red).unwrap(), 1e-5);
        }
    }
}

#[test]
fn skeletal_gradients_match_finite_differences() {
    let inst = instance(300, 18, 3);
    let w = SkeletalLossWeights::default();
    check_grad(&inst, |p, c, r| skeletal_parts(p, c, r, &w, 8).unwrap(), 1e-5);
}

#[test]
fn sampling_is_zero_when_points_are_the_samples() {
    let skel = SkeletalCloud::new(vec![
        SkeletalSphere::new([0.1, 0.2, 0.3], 0.5).unwrap(),
        SkeletalSphere::new([-1.0, 0.0, 0.5], 0.25).unwrap(),
    ])
    .unwrap();
    let p = reconstruct(&skel, 8).unwrap();
    assert_eq!(loss_sampling(&p, &skel, 8, Reduction::Mean).unwrap().value, 0.0);
    let mut moved = p.clone().into_points();
    moved[3][0] += 1e-3;
    let moved = PointCloud::new(moved).unwrap();
    assert!(loss_sampling(&moved, &skel, 8, Reduction::Mean).unwrap().value > 0.0);
}

#[test]
fn sampling_singletons() {
    // One sample per sphere sits at center + r * (1, 0, 0).
    for red in [Reduction::Mean, Reduction::Sum] {
        let lg = sampling_parts(&[[0.0; 3]], &[[0.0; 3]], &[1.0], 1, red).unwrap();
        assert_eq!(lg.value, 2.0);
    }
}

#[test]
fn radius_examples() {
    let s = radius_parts(&[0.5f64, 0.3], Reduction::Sum).unwrap();
    assert!((s.value + 0.8).abs() < 1e-15);
    assert_eq!(s.grad_radii, vec![-1.0, -1.0]);
    let m = radius_parts(&[0.5f64, 0.3], Reduction::Mean).unwrap();
    assert!((m.value + 0.4).abs() < 1e-15);
    assert_eq!(m.grad_radii, vec![-0.5, -0.5]);
    assert_eq!(radius_parts(&[0.7f64], Reduction::Mean).unwrap().value, -0.7);
}

#[test]
fn skeletal_is_linear_in_the_weights() {
    let inst = instance(400, 15, 3);
    let (p, c, r) = (&inst.points, &inst.centers, &inst.radii);
    let only_p2s = SkeletalLossWeights::new(1.0, 0.0, 0.0).unwrap();
    assert_eq!(skeletal_parts(p, c, r, &only_p2s, 8).unwrap(), p2s_parts(p, c, r, Reduction::Mean).unwrap());

    let a = p2s_parts(p, c, r, Reduction::Mean).unwrap().value;
    let b = sampling_parts(p, c, r, 8, Reduction::Mean).unwrap().value;
    let rr = radius_parts(r, Reduction::Mean).unwrap().value;
    let got = skeletal_parts(p, c, r, &SkeletalLossWeights::default(), 8).unwrap().value;
    assert!((got - (0.3 * a + 1.0 * b + 0.4 * rr)).abs() < 1e-12);

    let w = SkeletalLossWeights::new(0.7, 0.2, 1.3).unwrap();
    let w2 = SkeletalLossWeights::new(1.4, 0.4, 2.6).unwrap();
    let x = skeletal_parts(p, c, r, &w, 8).unwrap();
    let y = skeletal_parts(p, c, r, &w2, 8).unwrap();
    assert!((2.0 * x.value - y.value).abs() < 1e-12);
    for (g1, g2) in x.grad_radii.iter().zip(&y.grad_radii) {
        assert!((2.0 * g1 - g2).abs() < 1e-12);
    }
    for (g1, g2) in x.grad_centers.iter().zip(&y.grad_centers) {
        for k in 0..3 {
            assert!((2.0 * g1[k] - g2[k]).abs() < 1e-12);
        }
    }
    assert!(SkeletalLossWeights::new(-0.1, 1.0, 1.0).is_err());
}

#[test]
fn total_loss_is_an_unweighted_sum() {
    assert_eq!(loss_total(0.0, 1.25).unwrap(), 1.25);
    assert_eq!(loss_total(1.25, 0.0).unwrap(), 1.25);
    assert!(loss_total(f64::NAN, 0.0).is_err());
    assert!(loss_total(0.0, f64::INFINITY).is_err());
}

#[test]
fn p2s_is_rigid_invariant() {
    let inst = instance(500, 25, 4);
    let rot = rotation_axis_angle([0.2, 1.0, -0.4], 2.1).unwrap();
    let t = [0.3, -0.7, 1.1];
    let p = apply_rigid(&PointCloud::new(inst.points.clone()).unwrap(), &rot, t).unwrap();
    let c = apply_rigid(&PointCloud::new(inst.centers.clone()).unwrap(), &rot, t).unwrap();
    let before = p2s_parts(&inst.points, &inst.centers, &inst.radii, Reduction::Mean).unwrap().value;
    let after = p2s_parts(p.points(), c.points(), &inst.radii, Reduction::Mean).unwrap().value;
    assert!((before - after).abs() < 1e-6);
}

#[test]
fn chamfer_of_identical_sets_is_zero() {
    let inst = instance(600, 10, 1);
    assert_eq!(chamfer(&inst.points, &inst.points).unwrap(), 0.0);
    assert!((chamfer(&[[0.0; 3]], &[[3.0, 4.0, 0.0]]).unwrap() - 10.0).abs() < 1e-12);
}

#[test]
fn free_skeleton_fit_on_unit_sphere() {
    let dirs = fibonacci_directions(256);
    let cloud = PointCloud::new(dirs).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let init = SkeletalCloud::from_parts(
        &(0..4).map(|_| [0; 3].map(|_| rng.random_range(-0.5..0.5))).collect::<Vec<_>>(),
        &(0..4).map(|_| rng.random_range(0.05..0.3)).collect::<Vec<_>>(),
    )
    .unwrap();
    let (fit, history) = fit_free_skeleton(&cloud, &init, &SkeletalLossWeights::default(), 8, 500, 0.01).unwrap();
    assert!(history.last().unwrap() < &history[0]);
    let windows: Vec<f64> = history.chunks(50).map(|w| w.iter().sum::<f64>() / w.len() as f64).collect();
    for pair in windows.windows(2) {
        assert!(pair[1] < pair[0], "{windows:?}");
    }
    for s in fit.spheres() {
        assert!(norm(&s.center) < 1.0, "{:?}", s);
    }
}
