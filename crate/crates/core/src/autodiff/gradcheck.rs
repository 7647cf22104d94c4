//! Central finite-difference verification of analytic gradients.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[derive(Debug, Clone, Copy)]
pub struct GradcheckOptions {
    pub step: f64,
    pub tolerance: f64,
    /// Check at most this many coordinates, chosen by a seeded sample.
    pub max_coords: Option<usize>,
    /// Denominator floor so near-zero gradients compare absolutely.
    pub floor: f64,
    pub seed: u64,
    /// Relative disagreement between the forward and backward one-sided
    /// slopes above which a coordinate is treated as straddling a kink. The
    /// stencil is then shrunk up to `KINK_RETRIES` times; coordinates that
    /// stay nonsmooth are skipped and counted.
    pub kink_guard: Option<f64>,
}

const KINK_RETRIES: usize = 3;

impl Default for GradcheckOptions {
    fn default() -> Self {
        Self {
            step: 1e-4,
            tolerance: 1e-6,
            max_coords: None,
            floor: 1e-6,
            seed: 0,
            kink_guard: None,
        }
    }
}

#[derive(Debug, Clone)]
pub struct GradcheckReport {
    pub max_rel_err: f64,
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub checked: usize,
    /// Coordinates excluded by the kink guard.
    pub skipped: usize,
    pub tolerance: f64,
}

impl GradcheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_err.is_finite() && self.max_rel_err < self.tolerance
    }
}

pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Compares `analytic` against `(f(θ + h e_i) - f(θ - h e_i)) / 2h`.
pub fn gradcheck<F>(mut f: F, theta: &[f64], analytic: &[f64], opts: GradcheckOptions) -> GradcheckReport
where
    F: FnMut(&[f64]) -> f64,
{
    assert_eq!(theta.len(), analytic.len(), "gradcheck: gradient length");
    let coords: Vec<usize> = match opts.max_coords {
        Some(k) if k < theta.len() => {
            let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
            let mut idx = sample(&mut rng, theta.len(), k).into_vec();
            idx.sort_unstable();
            idx
        }
        _ => (0..theta.len()).collect(),
    };
    let mut probe = theta.to_vec();
    let center = opts.kink_guard.map(|_| f(&probe));
    let mut report = GradcheckReport {
        max_rel_err: 0.0,
        worst_index: 0,
        analytic: 0.0,
        numeric: 0.0,
        checked: 0,
        skipped: 0,
        tolerance: opts.tolerance,
    };
    for &i in &coords {
        let orig = probe[i];
        let mut step = opts.step;
        let mut numeric = None;
        for _ in 0..=KINK_RETRIES {
            probe[i] = orig + step;
            let up = f(&probe);
            probe[i] = orig - step;
            let down = f(&probe);
            probe[i] = orig;
            let smooth = match (opts.kink_guard, center) {
                (Some(guard), Some(f0)) => {
                    let (fwd, bwd) = ((up - f0) / step, (f0 - down) / step);
                    (fwd - bwd).abs() <= guard * fwd.abs().max(bwd.abs()).max(opts.floor)
                }
                _ => true,
            };
            if smooth {
                numeric = Some((up - down) / (2.0 * step));
                break;
            }
            step /= 10.0;
        }
        let Some(numeric) = numeric else {
            report.skipped += 1;
            continue;
        };
        report.checked += 1;
        let err = relative_error(analytic[i], numeric, opts.floor);
        if err > report.max_rel_err || err.is_nan() {
            report.max_rel_err = err;
            report.worst_index = i;
            report.analytic = analytic[i];
            report.numeric = numeric;
        }
    }
    report
}
