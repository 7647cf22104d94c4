//! Finite-difference suite over every differentiable component.

use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{gradcheck, BnMode, GradcheckOptions, GradcheckReport, NodeId, Tape, Tensor};
use crate::error::Result;
use crate::geometry::{tokenize, PatchSet, Point, PointCloud, StartRule};
use crate::losses::{p2s_parts, radius_parts, sampling_parts, skeletal_parts, LossGrad, Reduction, SkeletalLossWeights};
use crate::network::{Model, ModelConfig, RecordOptions};

pub const PRIMITIVE_TOLERANCE: f64 = 1e-6;
pub const COMPOSITION_TOLERANCE: f64 = 1e-3;
pub const FD_STEP: f64 = 1e-4;
/// One-sided slope disagreement treated as a kink or a tie. A kink that
/// slips past the guard biases the central difference by at most half this
/// ratio, which stays below the composition tolerance.
pub const KINK_GUARD: f64 = 1e-3;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ComponentKind {
    Primitive,
    Composition,
}

#[derive(Debug, Clone)]
pub struct ComponentCheck {
    pub name: &'static str,
    pub kind: ComponentKind,
    pub report: GradcheckReport,
}

impl ComponentCheck {
    pub fn passed(&self) -> bool {
        self.report.passed() && self.report.checked > 0
    }
}

impl fmt::Display for ComponentCheck {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let r = &self.report;
        write!(
            f,
            "{} {:<22} max_rel_err={:.3e} tol={:.0e} checked={} skipped={}",
            if self.passed() { "PASS" } else { "FAIL" },
            self.name,
            r.max_rel_err,
            r.tolerance,
            r.checked,
            r.skipped
        )
    }
}

fn options(tolerance: f64) -> GradcheckOptions {
    GradcheckOptions {
        step: FD_STEP,
        tolerance,
        kink_guard: Some(KINK_GUARD),
        ..GradcheckOptions::default()
    }
}

fn random(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(lo..hi)).collect()).expect("shape")
}

/// Builds a graph on leaves made from `inputs`, reduces it with fixed random
/// weights and checks all input gradients.
fn check_graph<F>(inputs: &[Tensor<f64>], tolerance: f64, build: F) -> Result<GradcheckReport>
where
    F: Fn(&mut Tape<f64>, &[NodeId]) -> Result<NodeId>,
{
    let eval = |flat: &[f64], want_grad: bool| -> Result<(f64, Vec<f64>)> {
        let mut tape = Tape::new();
        let mut ids = Vec::with_capacity(inputs.len());
        let mut off = 0;
        for t in inputs {
            ids.push(tape.leaf(Tensor::new(t.shape().to_vec(), flat[off..off + t.len()].to_vec())?, true));
            off += t.len();
        }
        let out = build(&mut tape, &ids)?;
        let n = tape.value(out).len();
        let mut wrng = ChaCha8Rng::seed_from_u64(7);
        let loss = tape.weighted_sum(out, (0..n).map(|_| wrng.random_range(-1.0..1.0)).collect())?;
        let value = tape.value(loss).data()[0];
        if !want_grad {
            return Ok((value, Vec::new()));
        }
        let grads = tape.backward(loss)?;
        let mut g = Vec::with_capacity(flat.len());
        for (&id, t) in ids.iter().zip(inputs) {
            match grads.get(id) {
                Some(v) => g.extend_from_slice(v.data()),
                None => g.extend(std::iter::repeat_n(0.0, t.len())),
            }
        }
        Ok((value, g))
    };
    let theta: Vec<f64> = inputs.iter().flat_map(|t| t.data().iter().copied()).collect();
    let (_, analytic) = eval(&theta, true)?;
    Ok(gradcheck(
        |p| eval(p, false).map_or(f64::NAN, |v| v.0),
        &theta,
        &analytic,
        options(tolerance),
    ))
}

fn check_loss<F>(points: &[Point<f64>], centers: &[Point<f64>], radii: &[f64], tolerance: f64, f: F) -> Result<GradcheckReport>
where
    F: Fn(&[Point<f64>], &[Point<f64>], &[f64]) -> Result<LossGrad<f64>>,
{
    let m = centers.len();
    let lg = f(points, centers, radii)?;
    let analytic: Vec<f64> = lg.grad_centers.iter().flatten().copied().chain(lg.grad_radii.iter().copied()).collect();
    let theta: Vec<f64> = centers.iter().flatten().copied().chain(radii.iter().copied()).collect();
    Ok(gradcheck(
        |th| {
            let c: Vec<Point<f64>> = (0..m).map(|j| [th[3 * j], th[3 * j + 1], th[3 * j + 2]]).collect();
            f(points, &c, &th[3 * m..]).map_or(f64::NAN, |lg| lg.value)
        },
        &theta,
        &analytic,
        options(tolerance),
    ))
}

fn random_points(rng: &mut ChaCha8Rng, n: usize, scale: f64) -> Vec<Point<f64>> {
    (0..n).map(|_| [0; 3].map(|_| rng.random_range(-scale..scale))).collect()
}

/// Runs every check. `tiny` selects the small end-to-end model with all of
/// its coordinates; otherwise the default model is checked on a seeded
/// sample of 256 coordinates.
pub fn gradient_suite(tiny: bool, seed: u64) -> Result<Vec<ComponentCheck>> {
    use ComponentKind::*;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    let mut push = |name, kind, report| out.push(ComponentCheck { name, kind, report });
    let tol = PRIMITIVE_TOLERANCE;

    let lin = [random(&mut rng, &[6, 4], -1.0, 1.0), random(&mut rng, &[4, 3], -1.0, 1.0), random(&mut rng, &[3], -1.0, 1.0)];
    push("linear", Primitive, check_graph(&lin, tol, |t, x| t.linear(x[0], x[1], x[2]))?);
    let pair = [random(&mut rng, &[5, 3], -1.0, 1.0), random(&mut rng, &[5, 3], -1.0, 1.0)];
    push("add", Primitive, check_graph(&pair, tol, |t, x| t.add(x[0], x[1]))?);
    let one = [random(&mut rng, &[8, 3], -1.0, 1.0)];
    push("relu", Primitive, check_graph(&one, tol, |t, x| Ok(t.relu(x[0])))?);
    push("softplus", Primitive, check_graph(&one, tol, |t, x| Ok(t.softplus(x[0])))?);
    push("scale", Primitive, check_graph(&one, tol, |t, x| Ok(t.scale(x[0], -1.7)))?);
    push("max_pool", Primitive, check_graph(&one, tol, |t, x| t.max_pool(x[0], 4))?);
    let mask: Vec<f64> = (0..24).map(|i| if i % 3 == 0 { 0.0 } else { 1.5 }).collect();
    push("dropout", Primitive, check_graph(&one, tol, |t, x| t.dropout(x[0], mask.clone()))?);
    let concat = [random(&mut rng, &[6, 3], -1.0, 1.0), random(&mut rng, &[2, 3], -1.0, 1.0)];
    push("concat_broadcast", Primitive, check_graph(&concat, tol, |t, x| t.concat_broadcast(x[0], x[1], 3))?);
    let bn = [random(&mut rng, &[7, 3], -1.0, 1.0), random(&mut rng, &[3], 0.5, 1.5), random(&mut rng, &[3], -1.0, 1.0)];
    push(
        "batchnorm",
        Primitive,
        check_graph(&bn, tol, |t, x| {
            Ok(t.batchnorm(x[0], x[1], x[2], BnMode::Train, &[0.0; 3], &[1.0; 3], 1e-5)?.0)
        })?,
    );
    let logits = [random(&mut rng, &[4, 5], -2.0, 2.0)];
    push("cross_entropy", Primitive, check_graph(&logits, tol, |t, x| t.cross_entropy(x[0], &[0, 3, 1, 4]))?);

    let points = random_points(&mut rng, 40, 1.0);
    let centers = random_points(&mut rng, 5, 0.7);
    let radii: Vec<f64> = (0..5).map(|_| rng.random_range(0.1..0.6)).collect();
    push("loss_p2s", Primitive, check_loss(&points, &centers, &radii, tol, |p, c, r| p2s_parts(p, c, r, Reduction::Mean))?);
    push(
        "loss_sampling",
        Primitive,
        check_loss(&points, &centers, &radii, tol, |p, c, r| sampling_parts(p, c, r, 6, Reduction::Mean))?,
    );
    push("loss_radius", Primitive, check_loss(&points, &centers, &radii, tol, |_, _, r| radius_parts(r, Reduction::Mean))?);
    let weights = SkeletalLossWeights::default();
    push(
        "loss_skeletal",
        Composition,
        check_loss(&points, &centers, &radii, COMPOSITION_TOLERANCE, |p, c, r| skeletal_parts(p, c, r, &weights, 6))?,
    );

    let (config, max_coords) = if tiny {
        (ModelConfig::tiny(), None)
    } else {
        (ModelConfig::default(), Some(256))
    };
    let report = model_check(&config, max_coords, &mut rng)?;
    push(if tiny { "model_tiny" } else { "model_default" }, Composition, report);
    Ok(out)
}

/// Skeletal plus cross-entropy objective of a whole model in train mode.
fn model_check(config: &ModelConfig, max_coords: Option<usize>, rng: &mut ChaCha8Rng) -> Result<GradcheckReport> {
    let model = Model::<f64>::new(config.clone())?;
    let n_points = (config.patches * config.neighbors).max(32);
    let clouds: Vec<PointCloud<f64>> = (0..3)
        .map(|_| PointCloud::new(random_points(rng, n_points, 1.0)))
        .collect::<Result<_>>()?;
    let batch: Vec<PatchSet<f64>> = clouds
        .iter()
        .map(|c| tokenize(c, config.patches, config.neighbors, StartRule::Index(0)))
        .collect::<Result<_>>()?;
    let labels: Vec<usize> = (0..3).map(|i| i % config.classes).collect();
    let pts: Vec<&[Point<f64>]> = clouds.iter().map(PointCloud::points).collect();
    let weights = SkeletalLossWeights::default();
    let objective = |m: &Model<f64>| {
        m.record(&batch, RecordOptions::new(BnMode::Train))
            .and_then(|r| r.objective(&pts, Some(&labels), &weights, 8))
    };
    let obj = objective(&model)?;
    let analytic: Vec<f64> = obj.grads.iter().flat_map(|g| g.data().iter().copied()).collect();
    let theta = model.flat_parameters();
    let mut probe = model.clone();
    Ok(gradcheck(
        |th| {
            probe.set_flat_parameters(th).map_or(f64::NAN, |_| objective(&probe).map_or(f64::NAN, |o| o.total))
        },
        &theta,
        &analytic,
        GradcheckOptions {
            max_coords,
            ..options(COMPOSITION_TOLERANCE)
        },
    ))
}
