//! Polynomial expert bases and tensor-product spline bases.
//!
//! Expert polynomials span the total-degree space `P^B([0,1]^d)`. Basis
//! functions are ordered graded-lexicographically: by total degree, then by
//! decreasing power of `x`. For `d = 2` and `B = 2` that is
//! `{1, x, y, x^2, xy, y^2}` (shown here for the monomial kind).
//!
//! The default kind is the shifted Legendre family `P_n(2x - 1)`, which is
//! orthogonal on `[0, 1]`: its `d = 1` Gram matrix is `diag(1 / (2n + 1))`,
//! with condition number `2B + 1` (13 at `B = 6`). The monomial Gram matrix
//! is the Hilbert matrix, with condition number about `4.8e8` at `B = 6`
//! (measured in the tests below), which is why monomials are only used for
//! closed-form integration and for hand-checkable examples.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::Points;
use crate::knots::{local_hat, KnotLayer};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum PolyKind {
    #[default]
    Legendre,
    Monomial,
}

/// Values, first and second derivatives of a univariate family up to `degree`.
pub fn univariate(kind: PolyKind, degree: usize, x: f64) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let n = degree + 1;
    let mut v = vec![0.0; n];
    let mut d = vec![0.0; n];
    let mut dd = vec![0.0; n];
    match kind {
        PolyKind::Monomial => {
            for k in 0..n {
                v[k] = x.powi(k as i32);
                if k >= 1 {
                    d[k] = k as f64 * x.powi(k as i32 - 1);
                }
                if k >= 2 {
                    dd[k] = (k * (k - 1)) as f64 * x.powi(k as i32 - 2);
                }
            }
        }
        PolyKind::Legendre => {
            let s = 2.0 * x - 1.0;
            v[0] = 1.0;
            if n > 1 {
                v[1] = s;
                d[1] = 1.0;
            }
            for k in 1..degree {
                let kf = k as f64;
                v[k + 1] = ((2.0 * kf + 1.0) * s * v[k] - kf * v[k - 1]) / (kf + 1.0);
                d[k + 1] = d[k - 1] + (2.0 * kf + 1.0) * v[k];
                dd[k + 1] = dd[k - 1] + (2.0 * kf + 1.0) * d[k];
            }
            // chain rule for s = 2x - 1
            for k in 0..n {
                d[k] *= 2.0;
                dd[k] *= 4.0;
            }
        }
    }
    (v, d, dd)
}

/// Monomial coefficients of each univariate basis polynomial: column `j`
/// holds the coefficients of basis function `j` in powers `x^0 .. x^B`.
pub fn to_monomial_matrix(kind: PolyKind, degree: usize) -> DMatrix<f64> {
    let n = degree + 1;
    match kind {
        PolyKind::Monomial => DMatrix::identity(n, n),
        PolyKind::Legendre => DMatrix::from_fn(n, n, |k, j| {
            if k > j {
                return 0.0;
            }
            let sign = if (j + k) % 2 == 0 { 1.0 } else { -1.0 };
            sign * binomial(j, k) * binomial(j + k, k)
        }),
    }
}

/// Local expansion of each univariate basis polynomial on `[a, a + h]`:
/// entry `(j, k)` is the coefficient of `s^j` in `p_k(a + h s)`, i.e.
/// `p_k^{(j)}(a) h^j / j!`. The Legendre case differentiates the three-term
/// recurrence, which avoids the large alternating global monomial
/// coefficients.
pub fn local_expansion(kind: PolyKind, degree: usize, a: f64, h: f64) -> DMatrix<f64> {
    let n = degree + 1;
    let mut q = DMatrix::zeros(n, n);
    match kind {
        PolyKind::Monomial => {
            for k in 0..n {
                for j in 0..=k {
                    q[(j, k)] = binomial(k, j) * a.powi((k - j) as i32) * h.powi(j as i32);
                }
            }
        }
        PolyKind::Legendre => {
            // Q_k^j = P_k^{(j)}(s) (2h)^j / j! in the variable s = 2x - 1
            let s = 2.0 * a - 1.0;
            let r = 2.0 * h;
            q[(0, 0)] = 1.0;
            if n > 1 {
                q[(0, 1)] = s;
                q[(1, 1)] = r;
            }
            for k in 1..degree {
                let kf = k as f64;
                for j in 0..=k + 1 {
                    let lower = if j > 0 { q[(j - 1, k)] } else { 0.0 };
                    let prev = if j < n { q[(j, k - 1)] } else { 0.0 };
                    q[(j, k + 1)] = ((2.0 * kf + 1.0) * (s * q[(j, k)] + r * lower) - kf * prev) / (kf + 1.0);
                }
            }
        }
    }
    q
}

/// Basis coefficients reproducing the univariate polynomial with monomial
/// coefficients `mono` (lowest power first).
pub fn coeffs_from_monomial(kind: PolyKind, degree: usize, mono: &[f64]) -> Result<Vec<f64>> {
    if mono.len() > degree + 1 {
        return Err(Error::DimensionMismatch(format!(
            "polynomial of degree {} does not fit basis of degree {degree}",
            mono.len() - 1
        )));
    }
    let t = to_monomial_matrix(kind, degree);
    let mut rhs = nalgebra::DVector::zeros(degree + 1);
    for (k, &m) in mono.iter().enumerate() {
        rhs[k] = m;
    }
    let sol = t
        .solve_upper_triangular(&rhs)
        .ok_or_else(|| Error::Singular("basis change matrix".into()))?;
    Ok(sol.iter().copied().collect())
}

fn binomial(n: usize, k: usize) -> f64 {
    let mut r = 1.0;
    for i in 0..k {
        r = r * (n - i) as f64 / (i + 1) as f64;
    }
    r
}

/// Expert polynomial space of total degree `B` in `d` variables.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolyBasis {
    pub degree: usize,
    pub dim: usize,
    pub kind: PolyKind,
}

/// One point's worth of basis data: values, gradients and Hessians
/// (stored as `[xx, xy, yy]`; only `xx` is used in 1D).
#[derive(Debug, Clone, Default)]
pub struct PolyPoint {
    pub values: Vec<f64>,
    pub grads: Vec<[f64; 2]>,
    pub hess: Vec<[f64; 3]>,
}

impl PolyBasis {
    pub fn new(degree: usize, dim: usize, kind: PolyKind) -> Result<Self> {
        if !(dim == 1 || dim == 2) {
            return Err(Error::InvalidInput(format!("dimension {dim} not supported")));
        }
        Ok(Self { degree, dim, kind })
    }

    /// `d_P`: `B + 1` in 1D, `(B + 1)(B + 2) / 2` in 2D.
    pub fn len(&self) -> usize {
        match self.dim {
            1 => self.degree + 1,
            _ => (self.degree + 1) * (self.degree + 2) / 2,
        }
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// Exponent pairs `(px, py)` in basis order.
    pub fn exponents(&self) -> Vec<(usize, usize)> {
        if self.dim == 1 {
            return (0..=self.degree).map(|k| (k, 0)).collect();
        }
        let mut out = Vec::with_capacity(self.len());
        for total in 0..=self.degree {
            for px in (0..=total).rev() {
                out.push((px, total - px));
            }
        }
        out
    }

    pub fn eval_point(&self, x: &[f64], out: &mut PolyPoint) {
        let len = self.len();
        out.values.resize(len, 0.0);
        out.grads.resize(len, [0.0; 2]);
        out.hess.resize(len, [0.0; 3]);
        let (vx, dx, ddx) = univariate(self.kind, self.degree, x[0]);
        if self.dim == 1 {
            for k in 0..len {
                out.values[k] = vx[k];
                out.grads[k] = [dx[k], 0.0];
                out.hess[k] = [ddx[k], 0.0, 0.0];
            }
            return;
        }
        let (vy, dy, ddy) = univariate(self.kind, self.degree, x[1]);
        for (k, (px, py)) in self.exponents().into_iter().enumerate() {
            out.values[k] = vx[px] * vy[py];
            out.grads[k] = [dx[px] * vy[py], vx[px] * dy[py]];
            out.hess[k] = [ddx[px] * vy[py], dx[px] * dy[py], vx[px] * ddy[py]];
        }
    }
}

/// Dense polynomial evaluation: values `n x d_P` and one gradient matrix
/// per spatial axis.
#[derive(Debug, Clone)]
pub struct PolyEval {
    pub values: DMatrix<f64>,
    pub grads: Vec<DMatrix<f64>>,
}

pub fn eval_poly(basis: &PolyBasis, points: &Points) -> Result<PolyEval> {
    if points.dim() != basis.dim {
        return Err(Error::DimensionMismatch(format!(
            "points of dimension {} for a {}-d basis",
            points.dim(),
            basis.dim
        )));
    }
    points.check_unit_box()?;
    let n = points.len();
    let len = basis.len();
    let mut values = DMatrix::zeros(n, len);
    let mut grads = vec![DMatrix::zeros(n, len); basis.dim];
    let mut scratch = PolyPoint::default();
    for i in 0..n {
        basis.eval_point(points.get(i), &mut scratch);
        for k in 0..len {
            values[(i, k)] = scratch.values[k];
            for (a, g) in grads.iter_mut().enumerate() {
                g[(i, k)] = scratch.grads[k][a];
            }
        }
    }
    Ok(PolyEval { values, grads })
}

/// Tensor-product hat evaluation. Column `i * (Ny + 1) + j` holds
/// `phi_i(x) psi_j(y)`.
#[derive(Debug, Clone)]
pub struct SplineEval2D {
    pub values: DMatrix<f64>,
    pub grads: [DMatrix<f64>; 2],
    pub cell_index: Vec<(usize, usize)>,
}

pub fn tensor_spline_eval(kx: &KnotLayer, ky: &KnotLayer, points: &Points) -> Result<SplineEval2D> {
    if points.dim() != 2 {
        return Err(Error::DimensionMismatch("tensor splines need 2-d points".into()));
    }
    let tx = kx.knots();
    let ty = ky.knots();
    let my = ky.n_basis();
    let m = kx.n_basis() * my;
    let n = points.len();
    let mut values = DMatrix::zeros(n, m);
    let mut gx = DMatrix::zeros(n, m);
    let mut gy = DMatrix::zeros(n, m);
    let mut cell_index = Vec::with_capacity(n);
    for p in 0..n {
        let x = points.get(p);
        let hx = local_hat(&tx, x[0]).map_err(|e| with_axis(e, 0))?;
        let hy = local_hat(&ty, x[1]).map_err(|e| with_axis(e, 1))?;
        for a in 0..2 {
            for b in 0..2 {
                let col = (hx.interval + a) * my + hy.interval + b;
                values[(p, col)] = hx.values[a] * hy.values[b];
                gx[(p, col)] = hx.derivs[a] * hy.values[b];
                gy[(p, col)] = hx.values[a] * hy.derivs[b];
            }
        }
        cell_index.push((hx.interval, hy.interval));
    }
    Ok(SplineEval2D { values, grads: [gx, gy], cell_index })
}

pub(crate) fn with_axis(e: Error, axis: usize) -> Error {
    match e {
        Error::OutOfDomain { value, lo, hi, .. } => Error::OutOfDomain { axis, value, lo, hi },
        other => other,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn dimension_counts() {
        for b in 0..7 {
            assert_eq!(PolyBasis::new(b, 1, PolyKind::Legendre).unwrap().len(), b + 1);
            let two = PolyBasis::new(b, 2, PolyKind::Legendre).unwrap();
            assert_eq!(two.len(), (b + 1) * (b + 2) / 2);
            assert_eq!(two.exponents().len(), two.len());
        }
    }

    #[test]
    fn degree_zero_is_constant() {
        let basis = PolyBasis::new(0, 1, PolyKind::Legendre).unwrap();
        let e = eval_poly(&basis, &Points::from_1d(&[0.0, 0.3, 1.0])).unwrap();
        assert!(e.values.iter().all(|&v| v == 1.0));
        assert!(e.grads[0].iter().all(|&v| v == 0.0));
    }

    #[test]
    fn linear_2d_monomials() {
        let basis = PolyBasis::new(1, 2, PolyKind::Monomial).unwrap();
        let e = eval_poly(&basis, &Points::from_2d(&[[0.5, 0.25]])).unwrap();
        assert_eq!(e.values.row(0).iter().copied().collect::<Vec<_>>(), vec![1.0, 0.5, 0.25]);

        // same space in the Legendre basis, mapped back through the basis change
        let leg = PolyBasis::new(1, 2, PolyKind::Legendre).unwrap();
        let e = eval_poly(&leg, &Points::from_2d(&[[0.5, 0.25]])).unwrap();
        // 1, 2x-1, 2y-1
        assert_abs_diff_eq!(e.values[(0, 1)], 0.0, epsilon = 1e-15);
        assert_abs_diff_eq!(e.values[(0, 2)], -0.5, epsilon = 1e-15);
        assert_abs_diff_eq!((e.values[(0, 1)] + 1.0) / 2.0, 0.5, epsilon = 1e-15);
        assert_abs_diff_eq!((e.values[(0, 2)] + 1.0) / 2.0, 0.25, epsilon = 1e-15);
    }

    #[test]
    fn power_rule() {
        let basis = PolyBasis::new(2, 1, PolyKind::Monomial).unwrap();
        let e = eval_poly(&basis, &Points::from_1d(&[0.3])).unwrap();
        assert_abs_diff_eq!(e.grads[0][(0, 2)], 0.6, epsilon = 1e-15);
    }

    #[test]
    fn legendre_monomial_conversion_round_trips() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for degree in 0..7 {
            let mono: Vec<f64> = (0..=degree).map(|_| rng.random_range(-1.0..1.0)).collect();
            let coeffs = coeffs_from_monomial(PolyKind::Legendre, degree, &mono).unwrap();
            for _ in 0..5 {
                let x: f64 = rng.random_range(0.0..1.0);
                let (v, _, _) = univariate(PolyKind::Legendre, degree, x);
                let via_basis: f64 = coeffs.iter().zip(&v).map(|(c, p)| c * p).sum();
                let direct: f64 = mono.iter().enumerate().map(|(k, m)| m * x.powi(k as i32)).sum();
                assert_abs_diff_eq!(via_basis, direct, epsilon = 1e-11);
            }
        }
    }

    #[test]
    fn legendre_derivatives_match_finite_differences() {
        let h = 1e-6;
        for x in [0.1, 0.37, 0.8] {
            let (v, d, dd) = univariate(PolyKind::Legendre, 6, x);
            let (vp, dp, _) = univariate(PolyKind::Legendre, 6, x + h);
            let (vm, dm, _) = univariate(PolyKind::Legendre, 6, x - h);
            for k in 0..7 {
                assert!(((vp[k] - vm[k]) / (2.0 * h) - d[k]).abs() <= 1e-5 * (1.0 + d[k].abs()));
                assert!(((dp[k] - dm[k]) / (2.0 * h) - dd[k]).abs() <= 1e-5 * (1.0 + dd[k].abs()));
            }
            assert!(v[0] == 1.0);
        }
    }

    fn gram_condition(kind: PolyKind, degree: usize) -> f64 {
        // 20-point Gauss rule is exact for degree <= 39
        let (nodes, weights) = crate::quadrature::gauss_legendre_unit(20);
        let n = degree + 1;
        let mut g = DMatrix::<f64>::zeros(n, n);
        for (x, w) in nodes.iter().zip(&weights) {
            let (v, _, _) = univariate(kind, degree, *x);
            for i in 0..n {
                for j in 0..n {
                    g[(i, j)] += w * v[i] * v[j];
                }
            }
        }
        let ev = g.symmetric_eigenvalues();
        ev.max() / ev.min()
    }

    #[test]
    fn gram_conditioning() {
        for degree in 0..=6 {
            let c = gram_condition(PolyKind::Legendre, degree);
            assert!(c.is_finite());
            assert_abs_diff_eq!(c, (2 * degree + 1) as f64, epsilon = 1e-8 * c);
        }
        let hilbert = gram_condition(PolyKind::Monomial, 6);
        assert!(hilbert > 4e8 && hilbert < 5.5e8, "cond = {hilbert}");
    }

    #[test]
    fn chebyshev_interpolation_reproduces_polynomials() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for degree in 1..=6 {
            let mono: Vec<f64> = (0..=degree).map(|_| rng.random_range(-1.0..1.0)).collect();
            let nodes: Vec<f64> = (0..=degree)
                .map(|k| 0.5 - 0.5 * ((2 * k + 1) as f64 * std::f64::consts::PI / (2 * degree + 2) as f64).cos())
                .collect();
            let basis = PolyBasis::new(degree, 1, PolyKind::Legendre).unwrap();
            let e = eval_poly(&basis, &Points::from_1d(&nodes)).unwrap();
            let rhs = nalgebra::DVector::from_iterator(
                nodes.len(),
                nodes.iter().map(|x| mono.iter().enumerate().map(|(k, m)| m * x.powi(k as i32)).sum::<f64>()),
            );
            let coeffs = e.values.clone().lu().solve(&rhs).unwrap();
            for x in [0.0, 0.123, 0.5, 0.77, 1.0] {
                let (v, _, _) = univariate(PolyKind::Legendre, degree, x);
                let got: f64 = coeffs.iter().zip(&v).map(|(c, p)| c * p).sum();
                let want: f64 = mono.iter().enumerate().map(|(k, m)| m * x.powi(k as i32)).sum();
                assert_abs_diff_eq!(got, want, epsilon = 1e-10);
            }
        }
    }

    #[test]
    fn tensor_spline_partition_and_nodes() {
        let kx = KnotLayer::uniform(2, 0.0, 1.0).unwrap();
        let ky = KnotLayer::uniform(2, 0.0, 1.0).unwrap();
        let e = tensor_spline_eval(&kx, &ky, &Points::from_2d(&[[0.5, 1.0]])).unwrap();
        let hot = 3 + 2;
        for c in 0..9 {
            assert_eq!(e.values[(0, c)], if c == hot { 1.0 } else { 0.0 });
        }

        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let kx = KnotLayer::perturbed(5, 0.0, 1.0, 1.0, &mut rng).unwrap();
        let ky = KnotLayer::perturbed(3, 0.0, 1.0, 1.0, &mut rng).unwrap();
        let pts: Vec<[f64; 2]> = (0..200).map(|_| [rng.random(), rng.random()]).collect();
        let e = tensor_spline_eval(&kx, &ky, &Points::from_2d(&pts)).unwrap();
        for r in 0..pts.len() {
            assert_abs_diff_eq!(e.values.row(r).sum(), 1.0, epsilon = 1e-14);
        }
    }

    #[test]
    fn tensor_spline_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let kx = KnotLayer::perturbed(4, 0.0, 1.0, 0.5, &mut rng).unwrap();
        let ky = KnotLayer::perturbed(3, 0.0, 1.0, 0.5, &mut rng).unwrap();
        let (tx, ty) = (kx.knots(), ky.knots());
        let h = 1e-7;
        let mut checked = 0;
        while checked < 50 {
            let p = [rng.random_range(0.01..0.99), rng.random_range(0.01..0.99)];
            let near = |t: &[f64], v: f64| t.iter().any(|k| (k - v).abs() < 1e-4);
            if near(&tx, p[0]) || near(&ty, p[1]) {
                continue;
            }
            let e = tensor_spline_eval(&kx, &ky, &Points::from_2d(&[p])).unwrap();
            for axis in 0..2 {
                let mut pp = p;
                let mut pm = p;
                pp[axis] += h;
                pm[axis] -= h;
                let ep = tensor_spline_eval(&kx, &ky, &Points::from_2d(&[pp])).unwrap();
                let em = tensor_spline_eval(&kx, &ky, &Points::from_2d(&[pm])).unwrap();
                for c in 0..e.values.ncols() {
                    let fd = (ep.values[(0, c)] - em.values[(0, c)]) / (2.0 * h);
                    let an = e.grads[axis][(0, c)];
                    assert!((fd - an).abs() <= 1e-5 * an.abs().max(1.0), "{fd} vs {an}");
                }
            }
            checked += 1;
        }
    }
}
