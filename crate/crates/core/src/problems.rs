//! The four benchmark problems: two regression targets and two variational
//! (Ritz energy) boundary-value problems.
//!
//! Variational problems are described by a list of quadrature [`Term`]s.
//! Every node of a term contributes
//!
//! ```text
//! w * ( 1/2 sum_a M_a (d_a u)^2 + 1/2 kappa u^2 - s(x) u + r(x) )
//! ```
//!
//! to the energy, which is therefore `1/2 c^T A c - b^T c + const` with
//! `A = sum w (sum_a M_a d_aPhi d_aPhi^T + kappa Phi Phi^T)`,
//! `b = sum w s Phi` and `const = sum w r`. Boundary penalties enter as
//! `beta/2 (u - g)^2`, so `A` carries the penalty mass with coefficient
//! `beta`.
//!
//! The slit problem is solved on `[-1, 1] x [0, 1]` pulled back to the unit
//! square by `x = 2X - 1`, `y = Y`. The slit `[0, 1] x {0}` becomes
//! `[0.5, 1] x {0}` and the singular point sits at `(0.5, 0)`.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::geometry::Points;
use crate::linalg::gram;
use crate::model::PolySplineModel;
use crate::quadrature::{boundary_rule, default_points, point_rule, volume_rule, QuadratureRule, Segment};

/// Seed for dataset sampling.
pub const DATA_SEED: u64 = 1234;

/// Extra Gauss points per axis for non-polynomial integrands.
pub const DEFAULT_Q_EXTRA: usize = 3;

#[derive(Debug, Clone)]
pub struct Dataset {
    pub points: Points,
    pub targets: Vec<f64>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.targets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.targets.is_empty()
    }

    /// Uniform random samples of `f` on `[0, 1]`.
    pub fn sample<R: Rng + ?Sized>(f: fn(f64) -> f64, n: usize, rng: &mut R) -> Self {
        let xs: Vec<f64> = (0..n).map(|_| rng.random::<f64>()).collect();
        let targets = xs.iter().map(|&x| f(x)).collect();
        Self { points: Points::from_1d(&xs), targets }
    }
}

#[derive(Debug, Clone)]
pub struct RegressionProblem {
    pub name: &'static str,
    pub target: fn(f64) -> f64,
    pub train: Dataset,
    pub validation: Dataset,
}

pub fn sine(x: f64) -> f64 {
    (2.0 * std::f64::consts::PI * x).sin()
}

pub fn kinks(x: f64) -> f64 {
    let pi = std::f64::consts::PI;
    (3.0 * pi * x * x).sin().abs() + (5.0 * pi * x * x).cos().abs()
}

/// Interior kinks of [`kinks`] on `(0, 1)`, ascending: zeros of
/// `sin(3 pi x^2)` at `x^2 = k/3` and of `cos(5 pi x^2)` at `x^2 = (2k+1)/10`.
pub fn kink_locations() -> Vec<f64> {
    let mut out: Vec<f64> = [1.0 / 3.0, 2.0 / 3.0].iter().map(|v: &f64| v.sqrt()).collect();
    out.extend((0..5).map(|k| ((2 * k + 1) as f64 / 10.0).sqrt()));
    out.sort_by(f64::total_cmp);
    out
}

fn regression(name: &'static str, target: fn(f64) -> f64, seed: u64, n: usize) -> RegressionProblem {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let train = Dataset::sample(target, n, &mut rng);
    let validation = Dataset::sample(target, n, &mut rng);
    RegressionProblem { name, target, train, validation }
}

/// `sin(2 pi x)` with 1000 training and 1000 validation points.
pub fn make_problem_1(seed: u64) -> RegressionProblem {
    regression("p1-sine", sine, seed, 1000)
}

/// `|sin(3 pi x^2)| + |cos(5 pi x^2)|` with 1000 + 1000 points.
pub fn make_problem_2(seed: u64) -> RegressionProblem {
    regression("p2-kinks", kinks, seed, 1000)
}

/// Per-node data of a quadratic functional: source `s`, offset `r` and their
/// spatial gradients.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct NodeData {
    pub s: f64,
    pub ds: [f64; 2],
    pub r: f64,
    pub dr: [f64; 2],
}

/// One quadrature rule with the coefficients of its quadratic integrand.
#[derive(Debug, Clone)]
pub struct Term {
    pub rule: QuadratureRule,
    pub metric: [f64; 2],
    pub kappa: f64,
    pub data: Vec<NodeData>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum VariationalKind {
    /// `-u'' = 2` on `[0, 1]`, `u(0) = u(1) = 0`.
    Poisson1d,
    /// Laplace on the half slit domain with Dirichlet data `g`.
    Slit,
}

#[derive(Debug, Clone, PartialEq)]
pub struct VariationalProblem {
    pub kind: VariationalKind,
    pub beta: f64,
    pub q_extra: usize,
}

/// `u(x) = x (1 - x)`.
pub fn poisson_exact(x: f64) -> f64 {
    x * (1.0 - x)
}

/// `sqrt(r) sin(theta / 2)` in physical coordinates, `theta` in `[0, 2 pi)`
/// measured from the positive x-axis; defined as 0 at the origin.
pub fn slit_g(x: f64, y: f64) -> f64 {
    let r = x.hypot(y);
    if r == 0.0 {
        return 0.0;
    }
    let theta = y.atan2(x).rem_euclid(2.0 * std::f64::consts::PI);
    r.sqrt() * (0.5 * theta).sin()
}

/// Gradient of [`slit_g`] in physical coordinates for `y >= 0`.
pub fn slit_g_grad(x: f64, y: f64) -> [f64; 2] {
    let r = x.hypot(y);
    if r == 0.0 {
        return [0.0, 0.0];
    }
    let g = ((r - x).max(0.0) / 2.0).sqrt();
    [-g / (2.0 * r), (2.0 * (r + x)).max(0.0).sqrt() / (4.0 * r)]
}

/// Map from the unit square to the physical half domain.
pub fn slit_to_physical(p: &[f64]) -> (f64, f64) {
    (2.0 * p[0] - 1.0, p[1])
}

/// Exact slit solution in unit-square coordinates.
pub fn slit_exact(p: &[f64]) -> f64 {
    let (x, y) = slit_to_physical(p);
    slit_g(x, y)
}

fn slit_exact_grad(p: &[f64]) -> [f64; 2] {
    let (x, y) = slit_to_physical(p);
    let g = slit_g_grad(x, y);
    [2.0 * g[0], g[1]]
}

impl VariationalProblem {
    pub fn poisson_1d(beta: f64) -> Self {
        Self { kind: VariationalKind::Poisson1d, beta, q_extra: DEFAULT_Q_EXTRA }
    }

    pub fn slit(beta: f64) -> Self {
        Self { kind: VariationalKind::Slit, beta, q_extra: DEFAULT_Q_EXTRA }
    }

    pub fn name(&self) -> &'static str {
        match self.kind {
            VariationalKind::Poisson1d => "p3-poisson1d",
            VariationalKind::Slit => "p4-slit",
        }
    }

    pub fn dim(&self) -> usize {
        match self.kind {
            VariationalKind::Poisson1d => 1,
            VariationalKind::Slit => 2,
        }
    }

    pub fn exact(&self, p: &[f64]) -> f64 {
        match self.kind {
            VariationalKind::Poisson1d => poisson_exact(p[0]),
            VariationalKind::Slit => slit_exact(p),
        }
    }

    /// Quadrature terms of the energy for the model's current knots.
    pub fn terms(&self, model: &PolySplineModel) -> Result<Vec<Term>> {
        if model.dim() != self.dim() {
            return Err(Error::DimensionMismatch(format!(
                "{} needs a {}-d model",
                self.name(),
                self.dim()
            )));
        }
        if !(self.beta > 0.0) {
            return Err(Error::InvalidInput("penalty must be positive".into()));
        }
        let knots = model.knot_vectors();
        let n_q = default_points(model.poly.degree, self.dim());
        match self.kind {
            VariationalKind::Poisson1d => {
                let vol = volume_rule(&knots, n_q)?;
                let data = vec![NodeData { s: 2.0, ..Default::default() }; vol.len()];
                let mut terms = vec![Term { rule: vol, metric: [1.0, 0.0], kappa: 0.0, data }];
                for x in [0.0, 1.0] {
                    terms.push(Term {
                        rule: point_rule(&knots[0], x)?,
                        metric: [0.0, 0.0],
                        kappa: self.beta,
                        data: vec![NodeData::default()],
                    });
                }
                Ok(terms)
            }
            VariationalKind::Slit => {
                // dx dy = 2 dX dY and d/dx = 1/2 d/dX
                let vol = volume_rule(&knots, n_q)?.scaled(2.0);
                let data = vec![NodeData::default(); vol.len()];
                let mut terms = vec![Term { rule: vol, metric: [0.25, 1.0], kappa: 0.0, data }];
                let nb = n_q + self.q_extra;
                let segments = [
                    (Segment::left((0.0, 1.0)), 1.0),
                    (Segment::right((0.0, 1.0)), 1.0),
                    (Segment::top((0.0, 1.0)), 2.0),
                    (Segment::bottom((0.5, 1.0)), 2.0),
                ];
                for (seg, ds) in segments {
                    let rule = boundary_rule(&knots, seg, nb)?.scaled(ds);
                    let data = (0..rule.len())
                        .map(|i| {
                            let p = rule.points.get(i);
                            let g = slit_exact(p);
                            let dg = slit_exact_grad(p);
                            NodeData {
                                s: self.beta * g,
                                ds: [self.beta * dg[0], self.beta * dg[1]],
                                r: 0.5 * self.beta * g * g,
                                dr: [self.beta * g * dg[0], self.beta * g * dg[1]],
                            }
                        })
                        .collect();
                    terms.push(Term { rule, metric: [0.0, 0.0], kappa: self.beta, data });
                }
                Ok(terms)
            }
        }
    }
}

/// The linear system of a quadratic energy.
#[derive(Debug, Clone)]
pub struct System {
    pub a: DMatrix<f64>,
    pub b: DVector<f64>,
    pub constant: f64,
}

impl System {
    /// `1/2 c^T A c - b^T c + const`
    pub fn energy(&self, c: &DVector<f64>) -> f64 {
        0.5 * c.dot(&(&self.a * c)) - self.b.dot(c) + self.constant
    }
}

/// Assemble `A`, `b` and the constant of a variational problem for the
/// model's current knots and gating.
pub fn assemble(model: &PolySplineModel, problem: &VariationalProblem) -> Result<System> {
    let k = model.n_coeffs();
    let mut a = DMatrix::zeros(k, k);
    let mut b = DVector::zeros(k);
    let mut constant = 0.0;
    for term in problem.terms(model)? {
        let f = model.feature_map(&term.rule.points)?;
        let n = term.rule.len();
        let w = &term.rule.weights;
        for (ax, &m) in term.metric.iter().enumerate().take(model.dim()) {
            if m != 0.0 {
                let scaled = DMatrix::from_fn(n, k, |i, j| (w[i] * m).sqrt() * f.grads[ax][(i, j)]);
                a += gram(&scaled);
            }
        }
        if term.kappa != 0.0 {
            let scaled = DMatrix::from_fn(n, k, |i, j| (w[i] * term.kappa).sqrt() * f.values[(i, j)]);
            a += gram(&scaled);
        }
        for i in 0..n {
            let ws = w[i] * term.data[i].s;
            if ws != 0.0 {
                for j in 0..k {
                    b[j] += ws * f.values[(i, j)];
                }
            }
            constant += w[i] * term.data[i].r;
        }
    }
    Ok(System { a, b, constant })
}

/// Problem 3 system; see [`assemble`].
pub fn assemble_poisson_1d(model: &PolySplineModel, beta: f64) -> Result<System> {
    assemble(model, &VariationalProblem::poisson_1d(beta))
}

/// Problem 4 system; see [`assemble`].
pub fn assemble_poisson_2d_slit(model: &PolySplineModel, beta: f64) -> Result<System> {
    assemble(model, &VariationalProblem::slit(beta))
}

/// Ritz energy of the model with coefficients `c`, evaluated node by node
/// (independently of the assembled matrices).
pub fn energy(model: &PolySplineModel, problem: &VariationalProblem, c: &[f64]) -> Result<f64> {
    let mut total = 0.0;
    for term in problem.terms(model)? {
        let (u, g) = model.eval(&term.rule.points)?.forward(c);
        for i in 0..term.rule.len() {
            let d = term.data[i];
            let q = 0.5 * (term.metric[0] * g[i][0] * g[i][0] + term.metric[1] * g[i][1] * g[i][1])
                + 0.5 * term.kappa * u[i] * u[i]
                - d.s * u[i]
                + d.r;
            total += term.rule.weights[i] * q;
        }
    }
    Ok(total)
}

/// `sqrt( int (y - u*)^2 )` over the unit box with `B + d + 1 + q_extra`
/// Gauss points per axis on every knot cell.
pub fn l2_error(model: &PolySplineModel, exact: &dyn Fn(&[f64]) -> f64, q_extra: usize) -> Result<f64> {
    let n_q = default_points(model.poly.degree, model.dim()) + q_extra;
    let rule = volume_rule(&model.knot_vectors(), n_q)?;
    let (y, _) = model.forward(&rule.points)?;
    let sq: Vec<f64> = (0..rule.len()).map(|i| (y[i] - exact(rule.points.get(i))).powi(2)).collect();
    Ok(rule.integrate(&sq).sqrt())
}

/// Mean squared error of the model against `exact` on `points`.
pub fn mse_against(model: &PolySplineModel, exact: &dyn Fn(&[f64]) -> f64, points: &Points) -> Result<f64> {
    let (y, _) = model.forward(points)?;
    let n = points.len().max(1) as f64;
    Ok((0..points.len()).map(|i| (y[i] - exact(points.get(i))).powi(2)).sum::<f64>() / n)
}

/// `n` equispaced points covering `[0, 1]` including both ends.
pub fn linspace(n: usize) -> Points {
    let xs: Vec<f64> = (0..n).map(|i| i as f64 / (n - 1).max(1) as f64).collect();
    Points::from_1d(&xs)
}

/// `n` uniform random points in the unit square.
pub fn random_square_points(n: usize, seed: u64) -> Points {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let coords: Vec<f64> = (0..2 * n).map(|_| rng.random::<f64>()).collect();
    Points::new(2, coords).expect("even coordinate count")
}

/// A problem selected by name.
#[derive(Debug, Clone)]
pub enum Problem {
    Regression(RegressionProblem),
    Variational(VariationalProblem),
}

impl Problem {
    /// `p1-sine`, `p2-kinks`, `p3-poisson1d` or `p4-slit`.
    pub fn by_name(name: &str, seed: u64, beta: f64) -> Result<Self> {
        match name {
            "p1-sine" => Ok(Problem::Regression(make_problem_1(seed))),
            "p2-kinks" => Ok(Problem::Regression(make_problem_2(seed))),
            "p3-poisson1d" => Ok(Problem::Variational(VariationalProblem::poisson_1d(beta))),
            "p4-slit" => Ok(Problem::Variational(VariationalProblem::slit(beta))),
            other => Err(Error::InvalidSpec(format!("unknown problem '{other}'"))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Problem::Regression(p) => p.name,
            Problem::Variational(p) => p.name(),
        }
    }

    pub fn dim(&self) -> usize {
        match self {
            Problem::Regression(_) => 1,
            Problem::Variational(p) => p.dim(),
        }
    }
}

pub const PROBLEM_NAMES: [&str; 4] = ["p1-sine", "p2-kinks", "p3-poisson1d", "p4-slit"];
