//! Dense symmetric solves for the least-squares step.
//!
//! Both the regression and the variational subproblems reduce to a
//! symmetric system `(G + lambda I) c = r`. The factorization is kept so the
//! layer-mode sensitivity can reuse it for the adjoint solve.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn, SVD};

use crate::error::{Error, Result};

/// Condition numbers above this are reported as ill-conditioned.
pub const ILL_CONDITIONED: f64 = 1e12;

#[derive(Debug, Clone)]
enum Factor {
    Cholesky(Cholesky<f64, Dyn>),
    Svd(SVD<f64, Dyn, Dyn>),
}

/// A factored symmetric matrix.
#[derive(Debug, Clone)]
pub struct SpdSolver {
    matrix: DMatrix<f64>,
    factor: Factor,
    /// Estimate of the 2-norm condition number (from the Cholesky pivots, or
    /// exact singular values after a fallback).
    pub condition: f64,
    /// The Cholesky factorization failed and a least-squares solve was used.
    pub fallback: bool,
}

impl SpdSolver {
    /// Factor `a + lambda I`. A failed Cholesky falls back to an SVD
    /// least-squares solve when `lambda > 0`, and is an error when
    /// `lambda == 0`.
    pub fn new(a: &DMatrix<f64>, lambda: f64, what: &str) -> Result<Self> {
        if a.nrows() != a.ncols() {
            return Err(Error::DimensionMismatch(format!("{what}: matrix is not square")));
        }
        if lambda < 0.0 || !lambda.is_finite() {
            return Err(Error::InvalidInput(format!("{what}: regularizer must be finite and >= 0")));
        }
        if a.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidInput(format!("{what}: matrix contains non-finite entries")));
        }
        let mut m = a.clone();
        for i in 0..m.nrows() {
            m[(i, i)] += lambda;
        }
        if let Some(ch) = Cholesky::new(m.clone()) {
            let diag = ch.l_dirty().diagonal();
            let (lo, hi) = diag.iter().fold((f64::INFINITY, 0.0f64), |(lo, hi), v| (lo.min(v.abs()), hi.max(v.abs())));
            let condition = if lo > 0.0 { (hi / lo).powi(2) } else { f64::INFINITY };
            if lambda == 0.0 && condition > 1.0 / f64::EPSILON {
                return Err(Error::Singular(format!("{what}: Gram matrix is singular and no regularizer is set")));
            }
            return Ok(Self { matrix: m, factor: Factor::Cholesky(ch), condition, fallback: false });
        }
        if lambda == 0.0 {
            return Err(Error::Singular(format!("{what}: Gram matrix is singular and no regularizer is set")));
        }
        log::warn!("{what}: Cholesky factorization failed, falling back to a least-squares solve");
        let svd = SVD::new(m.clone(), true, true);
        let smax = svd.singular_values.max();
        let smin = svd.singular_values.min();
        let condition = if smin > 0.0 { smax / smin } else { f64::INFINITY };
        Ok(Self { matrix: m, factor: Factor::Svd(svd), condition, fallback: true })
    }

    pub fn dim(&self) -> usize {
        self.matrix.nrows()
    }

    /// The factored matrix, including the regularizer.
    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.matrix
    }

    fn raw_solve(&self, b: &DVector<f64>) -> DVector<f64> {
        match &self.factor {
            Factor::Cholesky(ch) => ch.solve(b),
            Factor::Svd(svd) => {
                let tol = f64::EPSILON * svd.singular_values.max() * self.dim() as f64;
                svd.solve(b, tol).unwrap_or_else(|_| DVector::zeros(b.len()))
            }
        }
    }

    /// Solve with one step of iterative refinement.
    pub fn solve(&self, b: &DVector<f64>) -> DVector<f64> {
        let mut x = self.raw_solve(b);
        let r = b - &self.matrix * &x;
        x += self.raw_solve(&r);
        x
    }
}

/// `Phi^T Phi`, computed through a general matrix product.
pub fn gram(phi: &DMatrix<f64>) -> DMatrix<f64> {
    let pt = phi.transpose();
    let mut g = &pt * phi;
    // exact symmetry
    for i in 0..g.nrows() {
        for j in 0..i {
            let v = 0.5 * (g[(i, j)] + g[(j, i)]);
            g[(i, j)] = v;
            g[(j, i)] = v;
        }
    }
    g
}

/// `argmin_c |y - Phi c|^2 + lambda |c|^2` through the regularized normal
/// equations. The returned solver holds `Phi^T Phi + lambda I`.
pub fn least_squares(phi: &DMatrix<f64>, y: &DVector<f64>, lambda: f64) -> Result<(DVector<f64>, SpdSolver)> {
    if phi.nrows() == 0 {
        return Err(Error::InvalidInput("least squares on an empty batch".into()));
    }
    if phi.nrows() != y.len() {
        return Err(Error::DimensionMismatch(format!("{} rows but {} targets", phi.nrows(), y.len())));
    }
    let solver = SpdSolver::new(&gram(phi), lambda, "least-squares solve")?;
    let rhs = phi.tr_mul(y);
    Ok((solver.solve(&rhs), solver))
}

/// Solve `(A + lambda I) c = b` for symmetric `A`.
pub fn solve_symmetric(a: &DMatrix<f64>, b: &DVector<f64>, lambda: f64) -> Result<(DVector<f64>, SpdSolver)> {
    if a.nrows() != b.len() {
        return Err(Error::DimensionMismatch(format!("{} x {} system with {} right-hand sides", a.nrows(), a.ncols(), b.len())));
    }
    let solver = SpdSolver::new(a, lambda, "variational solve")?;
    Ok((solver.solve(b), solver))
}
