//! Independent reference solutions: classical least-squares fits and P1
//! finite elements. None of these use the network code paths, so they can
//! serve as baselines and test oracles.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::quadrature::gauss_legendre_unit;

/// Chebyshev polynomials `T_k(2x - 1)`, a basis distinct from the one the
/// network uses.
fn chebyshev(degree: usize, x: f64) -> Vec<f64> {
    let s = 2.0 * x - 1.0;
    let mut t = vec![1.0; degree + 1];
    if degree >= 1 {
        t[1] = s;
    }
    for k in 2..=degree {
        t[k] = 2.0 * s * t[k - 1] - t[k - 2];
    }
    t
}

fn lstsq(a: DMatrix<f64>, b: DVector<f64>) -> Result<DVector<f64>> {
    let svd = a.svd(true, true);
    let tol = f64::EPSILON * svd.singular_values.max() * svd.singular_values.len().max(1) as f64;
    svd.solve(&b, tol).map_err(|e| Error::Singular(e.to_string()))
}

/// A polynomial fit on `[lo, hi]`, stored in the Chebyshev basis of the
/// interval.
#[derive(Debug, Clone, PartialEq)]
pub struct PolyFit {
    pub lo: f64,
    pub hi: f64,
    pub coeffs: Vec<f64>,
}

impl PolyFit {
    pub fn eval(&self, x: f64) -> f64 {
        let u = (x - self.lo) / (self.hi - self.lo);
        chebyshev(self.coeffs.len() - 1, u).iter().zip(&self.coeffs).map(|(a, b)| a * b).sum()
    }
}

fn fit_on(xs: &[f64], ys: &[f64], degree: usize, lo: f64, hi: f64) -> Result<PolyFit> {
    if xs.is_empty() {
        return Err(Error::InvalidInput("no data in fit interval".into()));
    }
    let a = DMatrix::from_fn(xs.len(), degree + 1, |i, k| chebyshev(degree, (xs[i] - lo) / (hi - lo))[k]);
    let c = lstsq(a, DVector::from_column_slice(ys))?;
    Ok(PolyFit { lo, hi, coeffs: c.iter().copied().collect() })
}

/// Least-squares polynomial of degree `degree` on `[0, 1]`.
pub fn best_poly_fit(xs: &[f64], ys: &[f64], degree: usize) -> Result<PolyFit> {
    fit_on(xs, ys, degree, 0.0, 1.0)
}

/// Mean squared error of `f` on data.
pub fn mse(f: impl Fn(f64) -> f64, xs: &[f64], ys: &[f64]) -> f64 {
    xs.iter().zip(ys).map(|(&x, &y)| (f(x) - y).powi(2)).sum::<f64>() / xs.len().max(1) as f64
}

/// Continuous piecewise-linear function through `(knots[i], values[i])`.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearSpline {
    pub knots: Vec<f64>,
    pub values: Vec<f64>,
}

impl LinearSpline {
    fn interval(&self, x: f64) -> usize {
        let n = self.knots.len() - 1;
        self.knots[1..n].partition_point(|&t| t < x).min(n - 1)
    }

    pub fn eval(&self, x: f64) -> f64 {
        let k = self.interval(x);
        let (a, b) = (self.knots[k], self.knots[k + 1]);
        let s = (x - a) / (b - a);
        self.values[k] * (1.0 - s) + self.values[k + 1] * s
    }

    pub fn derivative(&self, x: f64) -> f64 {
        let k = self.interval(x);
        (self.values[k + 1] - self.values[k]) / (self.knots[k + 1] - self.knots[k])
    }
}

/// Least-squares continuous linear spline on `n` uniform intervals.
pub fn uniform_spline_fit(xs: &[f64], ys: &[f64], n: usize) -> Result<LinearSpline> {
    if n == 0 {
        return Err(Error::InvalidInput("need at least one interval".into()));
    }
    let knots: Vec<f64> = (0..=n).map(|i| i as f64 / n as f64).collect();
    let mut a = DMatrix::zeros(xs.len(), n + 1);
    for (i, &x) in xs.iter().enumerate() {
        let k = ((x * n as f64).floor() as usize).min(n - 1);
        let s = x * n as f64 - k as f64;
        a[(i, k)] = 1.0 - s;
        a[(i, k + 1)] = s;
    }
    let c = lstsq(a, DVector::from_column_slice(ys))?;
    Ok(LinearSpline { knots, values: c.iter().copied().collect() })
}

/// Independent (discontinuous) least-squares polynomials between
/// consecutive breakpoints.
#[derive(Debug, Clone, PartialEq)]
pub struct PiecewiseFit {
    pub breaks: Vec<f64>,
    pub pieces: Vec<PolyFit>,
}

impl PiecewiseFit {
    pub fn eval(&self, x: f64) -> f64 {
        let n = self.pieces.len();
        let k = self.breaks[1..n].partition_point(|&t| t <= x).min(n - 1);
        self.pieces[k].eval(x)
    }
}

/// Fit degree-`degree` polynomials on each piece of `breaks` (which must
/// start at 0 and end at 1).
pub fn piecewise_poly_fit(xs: &[f64], ys: &[f64], breaks: &[f64], degree: usize) -> Result<PiecewiseFit> {
    if breaks.len() < 2 || breaks.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::InvalidInput("breakpoints must be strictly increasing".into()));
    }
    let n = breaks.len() - 1;
    let mut pieces = Vec::with_capacity(n);
    for k in 0..n {
        let (lo, hi) = (breaks[k], breaks[k + 1]);
        let last = k + 1 == n;
        let (px, py): (Vec<f64>, Vec<f64>) = xs
            .iter()
            .zip(ys)
            .filter(|(&x, _)| x >= lo && (x < hi || (last && x <= hi)))
            .map(|(&x, &y)| (x, y))
            .unzip();
        pieces.push(fit_on(&px, &py, degree, lo, hi)?);
    }
    Ok(PiecewiseFit { breaks: breaks.to_vec(), pieces })
}

/// Boundary treatment for the 1D finite element oracle.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Boundary {
    /// `u(0) = u(1) = 0` imposed on the nodal values.
    Strong,
    /// Energy penalty `beta/2 (u(0)^2 + u(1)^2)`.
    Penalty(f64),
}

/// P1 Galerkin solution of `-u'' = f` on `[0, 1]` with homogeneous Dirichlet
/// data on the mesh `knots`.
pub fn fem_p1_1d(knots: &[f64], f: impl Fn(f64) -> f64, boundary: Boundary) -> Result<LinearSpline> {
    let n = knots.len();
    if n < 2 || knots.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::InvalidInput("mesh nodes must be strictly increasing".into()));
    }
    let mut k = DMatrix::zeros(n, n);
    let mut b = DVector::zeros(n);
    let (gx, gw) = gauss_legendre_unit(4);
    for e in 0..n - 1 {
        let h = knots[e + 1] - knots[e];
        k[(e, e)] += 1.0 / h;
        k[(e + 1, e + 1)] += 1.0 / h;
        k[(e, e + 1)] -= 1.0 / h;
        k[(e + 1, e)] -= 1.0 / h;
        for (s, w) in gx.iter().zip(&gw) {
            let fx = f(knots[e] + s * h) * w * h;
            b[e] += fx * (1.0 - s);
            b[e + 1] += fx * s;
        }
    }
    let values = match boundary {
        Boundary::Penalty(beta) => {
            k[(0, 0)] += beta;
            k[(n - 1, n - 1)] += beta;
            k.cholesky().ok_or_else(|| Error::Singular("finite element system".into()))?.solve(&b)
        }
        Boundary::Strong => {
            let mut u = DVector::zeros(n);
            if n > 2 {
                let inner = k.view((1, 1), (n - 2, n - 2)).into_owned();
                let rhs = b.rows(1, n - 2).into_owned();
                let sol = inner.cholesky().ok_or_else(|| Error::Singular("finite element system".into()))?.solve(&rhs);
                u.rows_mut(1, n - 2).copy_from(&sol);
            }
            u
        }
    };
    Ok(LinearSpline { knots: knots.to_vec(), values: values.iter().copied().collect() })
}

/// P1 solution of the slit problem on a uniform `n x n` mesh of the unit
/// square, each square split along its bottom-left to top-right diagonal.
#[derive(Debug, Clone)]
pub struct Fem2d {
    pub n: usize,
    pub nodes: Vec<[f64; 2]>,
    pub triangles: Vec<[usize; 3]>,
    pub values: Vec<f64>,
}

impl Fem2d {
    /// Nodal interpolant value at `p`.
    pub fn eval(&self, p: &[f64]) -> f64 {
        let n = self.n;
        let h = 1.0 / n as f64;
        let i = ((p[0] / h).floor() as usize).min(n - 1);
        let j = ((p[1] / h).floor() as usize).min(n - 1);
        let s = p[0] / h - i as f64;
        let t = p[1] / h - j as f64;
        let id = |i: usize, j: usize| j * (n + 1) + i;
        let (a, b, c, d) = (id(i, j), id(i + 1, j), id(i + 1, j + 1), id(i, j + 1));
        let v = &self.values;
        if t <= s {
            // triangle (a, b, c)
            v[a] * (1.0 - s) + v[b] * (s - t) + v[c] * t
        } else {
            // triangle (a, c, d)
            v[a] * (1.0 - t) + v[c] * s + v[d] * (t - s)
        }
    }
}

/// P1 finite elements for an anisotropic Laplace problem
/// `int mx u_x v_x + my u_y v_y = 0` on the unit square with Dirichlet data
/// `g` imposed strongly at the nodes of Dirichlet facets. A facet is
/// Dirichlet when its midpoint satisfies `on_dirichlet`; all other boundary
/// facets carry the natural condition.
pub fn fem_p1_2d_uniform(
    n: usize,
    metric: [f64; 2],
    g: impl Fn(&[f64]) -> f64,
    on_dirichlet: impl Fn(&[f64]) -> bool,
) -> Result<Fem2d> {
    if n == 0 {
        return Err(Error::InvalidInput("mesh needs at least one square".into()));
    }
    let h = 1.0 / n as f64;
    let id = |i: usize, j: usize| j * (n + 1) + i;
    let nn = (n + 1) * (n + 1);
    let nodes: Vec<[f64; 2]> = (0..nn).map(|k| [(k % (n + 1)) as f64 * h, (k / (n + 1)) as f64 * h]).collect();
    let mut triangles = Vec::with_capacity(2 * n * n);
    for j in 0..n {
        for i in 0..n {
            let (a, b, c, d) = (id(i, j), id(i + 1, j), id(i + 1, j + 1), id(i, j + 1));
            triangles.push([a, b, c]);
            triangles.push([a, c, d]);
        }
    }
    let mut k = DMatrix::zeros(nn, nn);
    for t in &triangles {
        let p: Vec<[f64; 2]> = t.iter().map(|&v| nodes[v]).collect();
        let det = (p[1][0] - p[0][0]) * (p[2][1] - p[0][1]) - (p[2][0] - p[0][0]) * (p[1][1] - p[0][1]);
        let area = 0.5 * det.abs();
        // gradients of barycentric coordinates
        let grads = [
            [(p[1][1] - p[2][1]) / det, (p[2][0] - p[1][0]) / det],
            [(p[2][1] - p[0][1]) / det, (p[0][0] - p[2][0]) / det],
            [(p[0][1] - p[1][1]) / det, (p[1][0] - p[0][0]) / det],
        ];
        for a in 0..3 {
            for b in 0..3 {
                k[(t[a], t[b])] += area * (metric[0] * grads[a][0] * grads[b][0] + metric[1] * grads[a][1] * grads[b][1]);
            }
        }
    }
    let mut dirichlet = vec![false; nn];
    let mut mark = |a: usize, b: usize| {
        let mid = [0.5 * (nodes[a][0] + nodes[b][0]), 0.5 * (nodes[a][1] + nodes[b][1])];
        if on_dirichlet(&mid) {
            dirichlet[a] = true;
            dirichlet[b] = true;
        }
    };
    for i in 0..n {
        mark(id(i, 0), id(i + 1, 0));
        mark(id(i, n), id(i + 1, n));
        mark(id(0, i), id(0, i + 1));
        mark(id(n, i), id(n, i + 1));
    }
    let mut u = vec![0.0; nn];
    for v in 0..nn {
        if dirichlet[v] {
            u[v] = g(&nodes[v]);
        }
    }
    let free: Vec<usize> = (0..nn).filter(|&v| !dirichlet[v]).collect();
    if !free.is_empty() {
        let kf = DMatrix::from_fn(free.len(), free.len(), |a, b| k[(free[a], free[b])]);
        let rhs = DVector::from_fn(free.len(), |a, _| {
            -(0..nn).filter(|&v| dirichlet[v]).map(|v| k[(free[a], v)] * u[v]).sum::<f64>()
        });
        let sol = kf.cholesky().ok_or_else(|| Error::Singular("finite element system".into()))?.solve(&rhs);
        for (a, &v) in free.iter().enumerate() {
            u[v] = sol[a];
        }
    }
    Ok(Fem2d { n, nodes, triangles, values: u })
}

/// The slit problem in unit-square coordinates: metric `(1/4, 1)` from the
/// pullback of `[-1, 1] x [0, 1]`, Dirichlet on the left, right and top
/// edges and on the slit `[0.5, 1] x {0}`.
pub fn fem_slit(n: usize) -> Result<Fem2d> {
    fem_p1_2d_uniform(n, [0.25, 1.0], crate::problems::slit_exact, |m| {
        let tol = 1e-12;
        m[0] < tol || m[0] > 1.0 - tol || m[1] > 1.0 - tol || (m[1] < tol && m[0] >= 0.5 - tol)
    })
}

/// Collapsed Gauss rule on the reference triangle `(0,0), (1,0), (0,1)`.
fn triangle_rule(n: usize) -> Vec<([f64; 2], f64)> {
    let (x, w) = gauss_legendre_unit(n);
    let mut out = Vec::with_capacity(n * n);
    for i in 0..n {
        for j in 0..n {
            out.push(([x[i], x[j] * (1.0 - x[i])], w[i] * w[j] * (1.0 - x[i])));
        }
    }
    out
}

fn triangle_monomials(deg: usize, a: f64, b: f64) -> Vec<f64> {
    let mut out = Vec::new();
    for p in 0..=deg {
        for q in 0..=deg - p {
            out.push(a.powi(p as i32) * b.powi(q as i32));
        }
    }
    out
}

/// L2 error of a P1 solution against `exact` over the unit square. The
/// exact solution is replaced by its degree `1 + rise` Lagrange interpolant
/// on every triangle, and the difference is integrated exactly.
pub fn fem_l2_error(fem: &Fem2d, exact: impl Fn(&[f64]) -> f64, rise: usize) -> Result<f64> {
    let deg = 1 + rise;
    let lattice: Vec<[f64; 2]> = (0..=deg)
        .flat_map(|i| (0..=deg - i).map(move |j| [i as f64 / deg as f64, j as f64 / deg as f64]))
        .collect();
    let v = DMatrix::from_fn(lattice.len(), lattice.len(), |r, c| triangle_monomials(deg, lattice[r][0], lattice[r][1])[c]);
    let vinv = v.try_inverse().ok_or_else(|| Error::Singular("interpolation matrix".into()))?;
    let rule = triangle_rule(deg + 2);
    // interpolation weights at the quadrature points
    let interp: Vec<DVector<f64>> = rule
        .iter()
        .map(|(p, _)| vinv.tr_mul(&DVector::from_vec(triangle_monomials(deg, p[0], p[1]))))
        .collect();
    let mut total = 0.0;
    for t in &fem.triangles {
        let p: Vec<[f64; 2]> = t.iter().map(|&v| fem.nodes[v]).collect();
        let j = [[p[1][0] - p[0][0], p[2][0] - p[0][0]], [p[1][1] - p[0][1], p[2][1] - p[0][1]]];
        let det = (j[0][0] * j[1][1] - j[0][1] * j[1][0]).abs();
        let map = |a: f64, b: f64| [p[0][0] + j[0][0] * a + j[0][1] * b, p[0][1] + j[1][0] * a + j[1][1] * b];
        let gvals = DVector::from_iterator(lattice.len(), lattice.iter().map(|l| exact(&map(l[0], l[1]))));
        for ((q, w), li) in rule.iter().zip(&interp) {
            let ge = li.dot(&gvals);
            let uh = fem.values[t[0]] * (1.0 - q[0] - q[1]) + fem.values[t[1]] * q[0] + fem.values[t[2]] * q[1];
            total += w * det * (uh - ge).powi(2);
        }
    }
    Ok(total.sqrt())
}
