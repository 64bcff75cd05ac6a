//! Self-check suite run by `polyspline check`.
//!
//! Each check exercises one structural invariant on randomized models and
//! reports the worst deviation it saw against its tolerance.

use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::checkpoint;
use crate::error::Result;
use crate::gating::GatingInit;
use crate::geometry::Points;
use crate::knots::knots_from_logits;
use crate::model::{ModelConfig, PolySplineModel};
use crate::problems::{assemble, energy, make_problem_1, Dataset, Problem, VariationalProblem};
use crate::quadrature::{gauss_legendre_unit, integrate_closed_form, integrate_functional, Integrand};
use crate::training::{regression_objective, train, variational_objective, LossValue, LsgdMode, TrainConfig};

/// Outcome of one check.
#[derive(Debug, Clone, PartialEq)]
pub struct CheckResult {
    pub name: &'static str,
    pub passed: bool,
    /// Worst observed deviation (in the check's own measure).
    pub worst: f64,
    pub tolerance: f64,
    pub seconds: f64,
}

impl std::fmt::Display for CheckResult {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "{} {:<32} worst={:.3e} tol={:.1e} ({:.2}s)",
            if self.passed { "PASS" } else { "FAIL" },
            self.name,
            self.worst,
            self.tolerance,
            self.seconds
        )
    }
}

type CheckFn = fn(&mut ChaCha8Rng) -> Result<f64>;

/// Names and tolerances of all checks, in run order.
pub const CHECKS: [(&str, f64, CheckFn); 9] = [
    ("pou-row-sums", 1e-12, pou_row_sums),
    ("knot-ordering", 0.0, knot_ordering),
    ("gauss-exactness", 1e-13, gauss_exactness),
    ("closed-form-vs-quadrature", 1e-12, closed_form_vs_quadrature),
    ("gradients-vs-finite-differences", 1e-4, gradients_vs_fd),
    ("energy-vs-weak-form", 1e-10, energy_vs_weak_form),
    ("weak-form-spd", 0.0, weak_form_spd),
    ("checkpoint-round-trip", 0.0, checkpoint_round_trip),
    ("deterministic-trace", 0.0, deterministic_trace),
];

/// Run every check with the given seed. A check that errors counts as a
/// failure with an infinite deviation.
pub fn run_all(seed: u64) -> Vec<CheckResult> {
    CHECKS
        .iter()
        .map(|&(name, tolerance, f)| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let start = Instant::now();
            let worst = match f(&mut rng) {
                Ok(w) => w,
                Err(e) => {
                    log::error!("{name}: {e}");
                    f64::INFINITY
                }
            };
            CheckResult { name, passed: worst <= tolerance, worst, tolerance, seconds: start.elapsed().as_secs_f64() }
        })
        .collect()
}

fn random_model(rng: &mut ChaCha8Rng, dim: usize, n: usize, cells: usize, degree: usize) -> Result<PolySplineModel> {
    let mut cfg = ModelConfig::new(dim, n, cells, degree);
    cfg.knot_noise = 0.6;
    cfg.gating_init = GatingInit::Random { std: 1.5 };
    let mut m = PolySplineModel::new(&cfg, rng)?;
    let c: Vec<f64> = (0..m.n_coeffs()).map(|_| rng.random_range(-1.0..1.0)).collect();
    m.set_coeffs(&c)?;
    Ok(m)
}

fn random_points(rng: &mut ChaCha8Rng, dim: usize, n: usize) -> Points {
    let coords = (0..dim * n).map(|_| rng.random::<f64>()).collect();
    Points::new(dim, coords).expect("matching coordinate count")
}

fn pou_row_sums(rng: &mut ChaCha8Rng) -> Result<f64> {
    let mut worst = 0.0f64;
    for trial in 0..40 {
        let dim = 1 + trial % 2;
        let n = rng.random_range(1..10);
        let cells = rng.random_range(1..8);
        let m = random_model(rng, dim, n, cells, 1)?;
        let mut pts = random_points(rng, dim, 200);
        // knots and endpoints are the delicate places
        let mut extra = Vec::new();
        for t in m.knot_vectors()[0].iter() {
            extra.extend(std::iter::repeat_n(*t, dim));
        }
        pts = Points::new(dim, [pts.coords(), &extra].concat())?;
        let pou = m.eval(&pts)?.pou();
        for r in pou.row_iter() {
            worst = worst.max((r.sum() - 1.0).abs());
            if r.iter().any(|&v| v < 0.0) {
                return Ok(f64::INFINITY);
            }
        }
    }
    Ok(worst)
}

fn knot_ordering(rng: &mut ChaCha8Rng) -> Result<f64> {
    let mut violations = 0usize;
    for _ in 0..1000 {
        let n = rng.random_range(1..40);
        let scale = [1.0, 3.0, 10.0][rng.random_range(0..3)];
        let logits: Vec<f64> = (0..n).map(|_| rng.random_range(-scale..scale)).collect();
        let t = knots_from_logits(&logits, 0.0, 1.0)?;
        if t[0] != 0.0 || t[n] != 1.0 || t.windows(2).any(|w| w[1] <= w[0]) {
            violations += 1;
        }
    }
    // extreme spreads must never yield unordered knots silently
    for _ in 0..200 {
        let logits: Vec<f64> = (0..30).map(|_| rng.random_range(-40.0..40.0)).collect();
        if let Ok(t) = knots_from_logits(&logits, 0.0, 1.0) {
            if t.windows(2).any(|w| w[1] <= w[0]) {
                violations += 1;
            }
        }
    }
    Ok(violations as f64)
}

fn gauss_exactness(_: &mut ChaCha8Rng) -> Result<f64> {
    let mut worst = 0.0f64;
    for n in 1..=20 {
        let (x, w) = gauss_legendre_unit(n);
        for k in 0..2 * n {
            let q: f64 = x.iter().zip(&w).map(|(x, w)| w * x.powi(k as i32)).sum();
            worst = worst.max((q - 1.0 / (k as f64 + 1.0)).abs());
        }
    }
    Ok(worst)
}

fn closed_form_vs_quadrature(rng: &mut ChaCha8Rng) -> Result<f64> {
    let mut worst = 0.0f64;
    for _ in 0..60 {
        let n = rng.random_range(1..12);
        let cells = rng.random_range(1..6);
        let degree = rng.random_range(0..7);
        let m = random_model(rng, 1, n, cells, degree)?;
        let f: Vec<f64> = (0..3).map(|_| rng.random_range(-1.0..1.0)).collect();
        let pairs = [
            (integrate_closed_form(&m, Integrand::Value)?, integrate_functional(&m, Integrand::Value, None)?),
            (integrate_closed_form(&m, Integrand::Square)?, integrate_functional(&m, Integrand::Square, None)?),
            (integrate_closed_form(&m, Integrand::GradSquare)?, integrate_functional(&m, Integrand::GradSquare, None)?),
            (
                integrate_closed_form(&m, Integrand::TimesPoly(&f))?,
                integrate_functional(&m, Integrand::TimesPoly(&f), None)?,
            ),
        ];
        for (exact, quad) in pairs {
            // relative to the integral of |y|-scale quantities, so tiny
            // signed integrals do not blow up the measure
            let scale = exact.abs().max(integrate_functional(&m, Integrand::Square, None)?.sqrt() * 1e-3);
            worst = worst.max((exact - quad).abs() / scale);
        }
    }
    Ok(worst)
}

fn objective_fd(
    m: &PolySplineModel,
    lv: &LossValue,
    eval: &dyn Fn(&PolySplineModel) -> Result<f64>,
    floor: f64,
) -> Result<f64> {
    let p0 = m.params();
    let h = 1e-6;
    let mut worst = 0.0f64;
    for k in 0..p0.len() {
        let at = |delta: f64| -> Result<f64> {
            let mut mm = m.clone();
            let mut pp = p0.clone();
            pp[k] += delta;
            mm.set_params(&pp)?;
            eval(&mm)
        };
        let fd = (at(h)? - at(-h)?) / (2.0 * h);
        worst = worst.max((fd - lv.grad[k]).abs() / lv.grad[k].abs().max(floor));
    }
    Ok(worst)
}

fn gradients_vs_fd(rng: &mut ChaCha8Rng) -> Result<f64> {
    let mut worst = 0.0f64;
    let p = make_problem_1(rng.random());
    let data = Dataset { points: Points::from_1d(&p.train.points.coords()[..60]), targets: p.train.targets[..60].to_vec() };
    for (mode, lambda) in [(LsgdMode::Layer, 1e-10), (LsgdMode::Layer, 1e-2), (LsgdMode::Callback, 1e-10)] {
        let m = random_model(rng, 1, 5, 3, 2)?;
        let lv = regression_objective(&m, &data, lambda, mode)?;
        worst = worst.max(objective_fd(&m, &lv, &|mm| Ok(regression_objective(mm, &data, lambda, mode)?.loss), 1e-4)?);
    }
    for (problem, dim) in [(VariationalProblem::poisson_1d(10.0), 1), (VariationalProblem::slit(10.0), 2)] {
        for (mode, lambda) in [(LsgdMode::Layer, 1e-1), (LsgdMode::Callback, 1e-8)] {
            let m = random_model(rng, dim, 4, 3, 1)?;
            let lv = variational_objective(&m, &problem, lambda, mode)?;
            let floor = 1e-3 * lv.loss.abs().max(1e-3);
            worst = worst.max(objective_fd(
                &m,
                &lv,
                &|mm| Ok(variational_objective(mm, &problem, lambda, mode)?.loss),
                floor,
            )?);
        }
    }
    Ok(worst)
}

fn energy_vs_weak_form(rng: &mut ChaCha8Rng) -> Result<f64> {
    let mut worst = 0.0f64;
    for (problem, dim) in [(VariationalProblem::poisson_1d(1000.0), 1), (VariationalProblem::slit(1000.0), 2)] {
        for _ in 0..5 {
            let n = rng.random_range(2..6);
            let cells = rng.random_range(1..5);
            let degree = rng.random_range(0..3);
            let m = random_model(rng, dim, n, cells, degree)?;
            let sys = assemble(&m, &problem)?;
            let c: Vec<f64> = (0..m.n_coeffs()).map(|_| rng.random_range(-1.0..1.0)).collect();
            let direct = energy(&m, &problem, &c)?;
            let weak = sys.energy(&DVector::from_column_slice(&c));
            worst = worst.max((direct - weak).abs() / direct.abs().max(1e-300));
        }
    }
    Ok(worst)
}

fn weak_form_spd(rng: &mut ChaCha8Rng) -> Result<f64> {
    let mut failures = 0usize;
    for i in 0..50 {
        let (problem, dim) = if i % 5 == 4 {
            (VariationalProblem::slit(1000.0), 2)
        } else {
            (VariationalProblem::poisson_1d(1000.0), 1)
        };
        let n = rng.random_range(1..8);
        // More cells than knot intervals makes the features linearly dependent for B >= 1.
        let cells = rng.random_range(1..=n.min(3));
        let degree = rng.random_range(0..3);
        let m = random_model(rng, dim, n, cells, degree)?;
        let a = assemble(&m, &problem)?.a;
        let sym = (&a - a.transpose()).amax() == 0.0;
        let spd = DMatrix::cholesky(a).is_some();
        if !(sym && spd) {
            failures += 1;
        }
    }
    Ok(failures as f64)
}

fn checkpoint_round_trip(rng: &mut ChaCha8Rng) -> Result<f64> {
    let mut mismatches = 0usize;
    for dim in [1, 2, 1, 2] {
        let n = rng.random_range(1..8);
        let cells = rng.random_range(1..6);
        let degree = rng.random_range(0..4);
        let m = random_model(rng, dim, n, cells, degree)?;
        let back = checkpoint::from_json(&checkpoint::to_json(&m)?)?;
        let same = |a: &[f64], b: &[f64]| a.len() == b.len() && a.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits());
        if !(same(&m.params(), &back.params()) && same(&m.coeffs, &back.coeffs)) {
            mismatches += 1;
        }
    }
    Ok(mismatches as f64)
}

fn deterministic_trace(rng: &mut ChaCha8Rng) -> Result<f64> {
    let seed = rng.random();
    let problem = Problem::Regression(make_problem_1(seed));
    let cfg = TrainConfig { epochs: 15, seed, ..TrainConfig::default() };
    let run = || -> Result<Vec<u64>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut m = PolySplineModel::new(&ModelConfig::new(1, 6, 3, 2), &mut rng)?;
        let out = train(&mut m, &problem, &cfg)?;
        let mut bits: Vec<u64> = out.trace.rows.iter().flat_map(|r| [r.loss.to_bits(), r.mse_or_energy.to_bits()]).collect();
        bits.extend(m.params().iter().chain(&m.coeffs).map(|v| v.to_bits()));
        Ok(bits)
    };
    Ok(if run()? == run()? { 0.0 } else { 1.0 })
}
