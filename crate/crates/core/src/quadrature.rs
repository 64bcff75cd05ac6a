//! Integration of the model on its knot cells.
//!
//! Two paths are provided. In 1D the model restricted to a knot interval is
//! a polynomial of degree `B + 1`; expanding it in monomials gives closed-form
//! integrals. In any dimension a tensor Gauss–Legendre rule with `n_q` points
//! per axis on every knot cell integrates polynomials of degree `2 n_q - 1`
//! per axis exactly. The default `n_q = B + d + 1` covers `y`, `y^2` and
//! `|grad y|^2`.
//!
//! Rules are built from the current knots and remember, for every node, the
//! two knots (or fixed coordinates) spanning it on each axis. Nodes therefore
//! move with the knots, and [`QuadratureRule::position_backward`] turns
//! sensitivities with respect to node positions and weights into knot
//! gradients.

use crate::basis::local_expansion;
use crate::error::{Error, Result};
use crate::geometry::Points;
use crate::knots::KnotLayer;
use crate::model::{GradAccumulator, PolySplineModel};

/// Gauss–Legendre nodes and weights on `[-1, 1]`, ascending.
pub fn gauss_legendre(n: usize) -> (Vec<f64>, Vec<f64>) {
    assert!(n >= 1, "a Gauss rule needs at least one point");
    let mut nodes = vec![0.0; n];
    let mut weights = vec![0.0; n];
    let nf = n as f64;
    for i in 0..n.div_ceil(2) {
        let mut x = (std::f64::consts::PI * (i as f64 + 0.75) / (nf + 0.5)).cos();
        let mut dp = 1.0;
        for _ in 0..100 {
            let (p, d) = legendre_with_derivative(n, x);
            dp = d;
            let dx = p / d;
            x -= dx;
            if dx.abs() < 1e-16 {
                break;
            }
        }
        let (_, d) = legendre_with_derivative(n, x);
        if d != 0.0 {
            dp = d;
        }
        let w = 2.0 / ((1.0 - x * x) * dp * dp);
        nodes[i] = -x;
        nodes[n - 1 - i] = x;
        weights[i] = w;
        weights[n - 1 - i] = w;
    }
    if n % 2 == 1 {
        nodes[n / 2] = 0.0;
    }
    (nodes, weights)
}

fn legendre_with_derivative(n: usize, x: f64) -> (f64, f64) {
    let (mut p0, mut p1) = (1.0, x);
    for k in 1..n {
        let kf = k as f64;
        let p2 = ((2.0 * kf + 1.0) * x * p1 - kf * p0) / (kf + 1.0);
        p0 = p1;
        p1 = p2;
    }
    let nf = n as f64;
    (p1, nf * (x * p1 - p0) / (x * x - 1.0))
}

/// Gauss–Legendre rule mapped to `[0, 1]`.
pub fn gauss_legendre_unit(n: usize) -> (Vec<f64>, Vec<f64>) {
    let (x, w) = gauss_legendre(n);
    (x.iter().map(|v| 0.5 * (v + 1.0)).collect(), w.iter().map(|v| 0.5 * v).collect())
}

/// One end of the span a node is attached to.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum End {
    Knot(usize),
    Fixed(f64),
}

/// How a node's coordinate on one axis depends on the knots.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Anchor {
    /// Coordinate is constant and not integrated over (e.g. the `y = 0`
    /// coordinate of a bottom-edge rule).
    Fixed,
    /// `x = L + (R - L) xi`, and the weight carries a factor `R - L`.
    Span { left: End, right: End, xi: f64 },
}

/// A composite rule: nodes, weights and the knot anchors of every node.
#[derive(Debug, Clone)]
pub struct QuadratureRule {
    pub points_per_axis: usize,
    pub points: Points,
    pub weights: Vec<f64>,
    pub anchors: Vec<[Anchor; 2]>,
    /// Knot cell of every node (`(i, j)`, `j = 0` in 1D).
    pub cells: Vec<(usize, usize)>,
}

impl QuadratureRule {
    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }

    pub fn integrate(&self, values: &[f64]) -> f64 {
        self.weights.iter().zip(values).map(|(w, v)| w * v).sum()
    }

    /// Scale every weight, e.g. by a change-of-variables Jacobian.
    pub fn scaled(mut self, factor: f64) -> Self {
        for w in &mut self.weights {
            *w *= factor;
        }
        self
    }

    /// Merge two rules over the same knots.
    pub fn concat(mut self, other: QuadratureRule) -> Result<Self> {
        if self.points.dim() != other.points.dim() {
            return Err(Error::DimensionMismatch("cannot merge rules of different dimension".into()));
        }
        let mut coords = self.points.coords().to_vec();
        coords.extend_from_slice(other.points.coords());
        self.points = Points::new(self.points.dim(), coords)?;
        self.weights.extend(other.weights);
        self.anchors.extend(other.anchors);
        self.cells.extend(other.cells);
        self.points_per_axis = self.points_per_axis.max(other.points_per_axis);
        Ok(self)
    }

    /// Knot gradients from sensitivities with respect to node coordinates
    /// (`grad_x[i][axis]`) and node weights (`grad_w[i]`).
    pub fn position_backward(&self, knots: &[Vec<f64>], grad_x: &[[f64; 2]], grad_w: &[f64], acc: &mut GradAccumulator) {
        for (i, anchors) in self.anchors.iter().enumerate() {
            let w = self.weights[i];
            for (axis, anchor) in anchors.iter().enumerate().take(self.points.dim()) {
                if let Anchor::Span { left, right, xi } = *anchor {
                    let t = &knots[axis];
                    let l = end_value(t, left);
                    let r = end_value(t, right);
                    let dw = grad_w[i] * w / (r - l);
                    let gx = grad_x[i][axis];
                    if let End::Knot(k) = left {
                        acc.add_knot(axis, k, gx * (1.0 - xi) - dw);
                    }
                    if let End::Knot(k) = right {
                        acc.add_knot(axis, k, gx * xi + dw);
                    }
                }
            }
        }
    }
}

fn end_value(knots: &[f64], end: End) -> f64 {
    match end {
        End::Knot(k) => knots[k],
        End::Fixed(v) => v,
    }
}

/// Default points per axis for expert degree `degree` in dimension `dim`.
pub fn default_points(degree: usize, dim: usize) -> usize {
    degree + dim + 1
}

/// Tensor Gauss rule with `n_q` points per axis on every knot cell.
pub fn volume_rule(knots: &[Vec<f64>], n_q: usize) -> Result<QuadratureRule> {
    if knots.is_empty() || knots.len() > 2 || n_q == 0 {
        return Err(Error::InvalidInput("volume rule needs 1 or 2 knot vectors and n_q >= 1".into()));
    }
    let (xi, om) = gauss_legendre_unit(n_q);
    let dim = knots.len();
    let mut coords = Vec::new();
    let mut weights = Vec::new();
    let mut anchors = Vec::new();
    let mut cells = Vec::new();
    let tx = &knots[0];
    if dim == 1 {
        for k in 0..tx.len() - 1 {
            let (a, b) = (tx[k], tx[k + 1]);
            for q in 0..n_q {
                coords.push(a + (b - a) * xi[q]);
                weights.push(om[q] * (b - a));
                anchors.push([span(k, xi[q]), Anchor::Fixed]);
                cells.push((k, 0));
            }
        }
    } else {
        let ty = &knots[1];
        for r in cell_decomposition_2d(tx, ty) {
            for p in 0..n_q {
                for q in 0..n_q {
                    coords.push(r.x0 + (r.x1 - r.x0) * xi[p]);
                    coords.push(r.y0 + (r.y1 - r.y0) * xi[q]);
                    weights.push(om[p] * om[q] * r.area());
                    anchors.push([span(r.ix, xi[p]), span(r.iy, xi[q])]);
                    cells.push((r.ix, r.iy));
                }
            }
        }
    }
    Ok(QuadratureRule { points_per_axis: n_q, points: Points::new(dim, coords)?, weights, anchors, cells })
}

fn span(k: usize, xi: f64) -> Anchor {
    Anchor::Span { left: End::Knot(k), right: End::Knot(k + 1), xi }
}

/// An axis-aligned boundary segment of the unit square: coordinate
/// `fixed_axis` is held at `value` and the other runs over `range`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Segment {
    pub fixed_axis: usize,
    pub value: f64,
    pub range: (f64, f64),
}

impl Segment {
    pub fn bottom(range: (f64, f64)) -> Self {
        Self { fixed_axis: 1, value: 0.0, range }
    }

    pub fn top(range: (f64, f64)) -> Self {
        Self { fixed_axis: 1, value: 1.0, range }
    }

    pub fn left(range: (f64, f64)) -> Self {
        Self { fixed_axis: 0, value: 0.0, range }
    }

    pub fn right(range: (f64, f64)) -> Self {
        Self { fixed_axis: 0, value: 1.0, range }
    }
}

/// Gauss rule along a boundary segment, split at the knots of the running
/// axis. Pieces cut by the segment ends use the end as a fixed anchor.
pub fn boundary_rule(knots: &[Vec<f64>], segment: Segment, n_q: usize) -> Result<QuadratureRule> {
    if knots.len() != 2 || segment.fixed_axis > 1 || n_q == 0 {
        return Err(Error::InvalidInput("boundary rules need 2-d knots and n_q >= 1".into()));
    }
    let (lo, hi) = segment.range;
    if !(0.0 <= lo && lo < hi && hi <= 1.0) {
        return Err(Error::InvalidInput(format!("segment range [{lo}, {hi}] outside [0, 1]")));
    }
    let run = 1 - segment.fixed_axis;
    let t = &knots[run];
    let fixed_cell = crate::knots::locate(&knots[segment.fixed_axis], segment.value)?;
    let (xi, om) = gauss_legendre_unit(n_q);
    let mut coords = Vec::new();
    let mut weights = Vec::new();
    let mut anchors = Vec::new();
    let mut cells = Vec::new();
    for k in 0..t.len() - 1 {
        let (a, b) = (t[k].max(lo), t[k + 1].min(hi));
        if b <= a {
            continue;
        }
        let left = if t[k] >= lo { End::Knot(k) } else { End::Fixed(lo) };
        let right = if t[k + 1] <= hi { End::Knot(k + 1) } else { End::Fixed(hi) };
        for q in 0..n_q {
            let mut p = [0.0; 2];
            p[run] = a + (b - a) * xi[q];
            p[segment.fixed_axis] = segment.value;
            coords.extend_from_slice(&p);
            weights.push(om[q] * (b - a));
            let mut anc = [Anchor::Fixed; 2];
            anc[run] = Anchor::Span { left, right, xi: xi[q] };
            anchors.push(anc);
            cells.push(if run == 0 { (k, fixed_cell) } else { (fixed_cell, k) });
        }
    }
    Ok(QuadratureRule { points_per_axis: n_q, points: Points::new(2, coords)?, weights, anchors, cells })
}

/// A single node of unit weight at a 1D boundary point.
pub fn point_rule(knots: &[f64], x: f64) -> Result<QuadratureRule> {
    let cell = crate::knots::locate(knots, x)?;
    Ok(QuadratureRule {
        points_per_axis: 1,
        points: Points::from_1d(&[x]),
        weights: vec![1.0],
        anchors: vec![[Anchor::Fixed; 2]],
        cells: vec![(cell, 0)],
    })
}

/// A knot-grid rectangle `[x0, x1] x [y0, y1]` with its cell indices.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Rect {
    pub ix: usize,
    pub iy: usize,
    pub x0: f64,
    pub x1: f64,
    pub y0: f64,
    pub y1: f64,
}

impl Rect {
    pub fn area(&self) -> f64 {
        (self.x1 - self.x0) * (self.y1 - self.y0)
    }
}

/// The `N_x * N_y` rectangles of the knot grid, x-major.
pub fn cell_decomposition_2d(tx: &[f64], ty: &[f64]) -> Vec<Rect> {
    let mut out = Vec::with_capacity((tx.len() - 1) * (ty.len() - 1));
    for ix in 0..tx.len() - 1 {
        for iy in 0..ty.len() - 1 {
            out.push(Rect { ix, iy, x0: tx[ix], x1: tx[ix + 1], y0: ty[iy], y1: ty[iy + 1] });
        }
    }
    out
}

/// Same as [`cell_decomposition_2d`] for knot layers.
pub fn cell_rects(kx: &KnotLayer, ky: &KnotLayer) -> Vec<Rect> {
    cell_decomposition_2d(&kx.knots(), &ky.knots())
}

/// Functionals of the model that can be integrated.
pub enum Integrand<'a> {
    Value,
    Square,
    GradSquare,
    /// `y * f` for a polynomial `f` given by monomial coefficients, in the
    /// graded-lexicographic order of the expert basis (lowest degree first).
    TimesPoly(&'a [f64]),
    /// `y * f` for an arbitrary `f`; requires an explicit order.
    TimesFn(&'a dyn Fn(&[f64]) -> f64),
}

fn monomial_exponents(dim: usize, count: usize) -> Vec<(usize, usize)> {
    let mut out = Vec::with_capacity(count);
    let mut total = 0;
    while out.len() < count {
        if dim == 1 {
            out.push((total, 0));
        } else {
            for px in (0..=total).rev() {
                if out.len() < count {
                    out.push((px, total - px));
                }
            }
        }
        total += 1;
    }
    out
}

fn poly_degree(dim: usize, count: usize) -> usize {
    monomial_exponents(dim, count).iter().map(|(a, b)| a + b).max().unwrap_or(0)
}

fn eval_monomials(coeffs: &[f64], dim: usize, x: &[f64]) -> f64 {
    monomial_exponents(dim, coeffs.len())
        .iter()
        .zip(coeffs)
        .map(|(&(px, py), c)| {
            let mut v = c * x[0].powi(px as i32);
            if dim == 2 {
                v *= x[1].powi(py as i32);
            }
            v
        })
        .sum()
}

/// Integral of a model functional over the unit box using the knot-cell
/// Gauss rule. `n_q = None` picks the smallest exact order, and is an error
/// for non-polynomial integrands.
pub fn integrate_functional(model: &PolySplineModel, integrand: Integrand<'_>, n_q: Option<usize>) -> Result<f64> {
    let dim = model.dim();
    let base = default_points(model.poly.degree, dim);
    let n_q = match (&integrand, n_q) {
        (_, Some(n)) => n,
        (Integrand::TimesFn(_), None) => return Err(Error::QuadratureOrderRequired),
        (Integrand::TimesPoly(f), None) => {
            // y has degree B + 1 per axis on a cell; y * f needs (B + 2 + m) / 2 points
            base.max((model.poly.degree + 2 + poly_degree(dim, f.len())).div_ceil(2))
        }
        _ => base,
    };
    let rule = volume_rule(&model.knot_vectors(), n_q)?;
    let (y, g) = model.eval(&rule.points)?.forward(&model.coeffs);
    let values: Vec<f64> = match integrand {
        Integrand::Value => y,
        Integrand::Square => y.iter().map(|v| v * v).collect(),
        Integrand::GradSquare => g.iter().map(|v| v[0] * v[0] + v[1] * v[1]).collect(),
        Integrand::TimesPoly(f) => {
            (0..y.len()).map(|i| y[i] * eval_monomials(f, dim, rule.points.get(i))).collect()
        }
        Integrand::TimesFn(f) => (0..y.len()).map(|i| y[i] * f(rule.points.get(i))).collect(),
    };
    Ok(rule.integrate(&values))
}

/// Integral of `y` over the unit box by the quadrature path.
pub fn integrate_model(model: &PolySplineModel) -> Result<f64> {
    integrate_functional(model, Integrand::Value, None)
}

/// Coefficients of the 1D model on every knot interval in powers of the
/// centred variable `s = (x - m_k) / r_k` in `[-1, 1]`, where `m_k` is the
/// interval midpoint and `r_k` its half width. Centring keeps the power
/// coefficients of high-degree experts small, so products and integrals
/// lose little to cancellation.
pub fn piecewise_monomials(model: &PolySplineModel) -> Result<Vec<Vec<f64>>> {
    if model.dim() != 1 {
        return Err(Error::InvalidInput("closed-form integration is implemented for d = 1".into()));
    }
    let t = model.knots[0].knots();
    let w = model.gating.weights();
    let deg = model.poly.degree;
    let dp = deg + 1;
    let mut out = Vec::with_capacity(t.len() - 1);
    for k in 0..t.len() - 1 {
        let (m, r) = (0.5 * (t[k] + t[k + 1]), 0.5 * (t[k + 1] - t[k]));
        let local = local_expansion(model.poly.kind, deg, m, r);
        let mut poly = vec![0.0; dp + 1];
        for cell in 0..model.n_cells() {
            // POU cell on this interval: (W_k + W_{k+1}) / 2 + (W_{k+1} - W_k) s / 2
            let (wl, wr) = (w[(cell, k)], w[(cell, k + 1)]);
            let c = nalgebra::DVector::from_column_slice(&model.coeffs[cell * dp..(cell + 1) * dp]);
            for (i, ei) in (&local * c).iter().enumerate() {
                poly[i] += 0.5 * (wl + wr) * ei;
                poly[i + 1] += 0.5 * (wr - wl) * ei;
            }
        }
        out.push(poly);
    }
    Ok(out)
}

/// Coefficients of `p(a + h s)` in powers of `s`.
fn shift_and_scale(p: &[f64], a: f64, h: f64) -> Vec<f64> {
    let mut q = p.to_vec();
    // repeated synthetic division by (x - a)
    let n = q.len();
    for i in 0..n {
        for j in (i..n - 1).rev() {
            q[j] += a * q[j + 1];
        }
    }
    let mut hp = 1.0;
    for c in q.iter_mut() {
        *c *= hp;
        hp *= h;
    }
    q
}

fn poly_mul(a: &[f64], b: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; a.len() + b.len() - 1];
    for (i, x) in a.iter().enumerate() {
        for (j, y) in b.iter().enumerate() {
            out[i + j] += x * y;
        }
    }
    out
}

fn poly_deriv(a: &[f64]) -> Vec<f64> {
    if a.len() <= 1 {
        return vec![0.0];
    }
    a.iter().enumerate().skip(1).map(|(i, c)| i as f64 * c).collect()
}

/// `int_{-1}^1 sum_i d_i s^i ds`; odd powers vanish.
fn integrate_centred(poly: &[f64]) -> f64 {
    poly.iter().enumerate().step_by(2).map(|(i, d)| 2.0 * d / (i + 1) as f64).sum()
}

/// Closed-form integral of a 1D model functional via the monomial expansion
/// on each knot interval. `TimesFn` is not polynomial and is rejected.
pub fn integrate_closed_form(model: &PolySplineModel, integrand: Integrand<'_>) -> Result<f64> {
    let pieces = piecewise_monomials(model)?;
    let t = model.knots[0].knots();
    let mut total = 0.0;
    for (k, p) in pieces.iter().enumerate() {
        let (m, r) = (0.5 * (t[k] + t[k + 1]), 0.5 * (t[k + 1] - t[k]));
        let f = match integrand {
            Integrand::Value => p.clone(),
            Integrand::Square => poly_mul(p, p),
            Integrand::GradSquare => {
                // d/dx = (1/r) d/ds
                let d = poly_deriv(p);
                poly_mul(&d, &d).iter().map(|v| v / (r * r)).collect()
            }
            Integrand::TimesPoly(f) => poly_mul(p, &shift_and_scale(f, m, r)),
            Integrand::TimesFn(_) => return Err(Error::QuadratureOrderRequired),
        };
        total += r * integrate_centred(&f);
    }
    Ok(total)
}
