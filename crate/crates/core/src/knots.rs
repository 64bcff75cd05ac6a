//! Free-knot B1-spline layers.
//!
//! A [`KnotLayer`] owns a logit vector `mu` of length `N`. Interval widths are
//! `softmax(mu) * (hi - lo)` and the `N + 1` knots are their running sum
//! starting at `lo`, so the knots stay strictly ordered and always span the
//! box `[lo, hi]` no matter what the optimizer does to the logits.
//!
//! The basis has `N + 1` hat functions `phi_0 .. phi_N`, one per knot,
//! including the two boundary half-hats.

use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{ensure_finite, Error, Result};

/// Numerically stable softmax.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&m| (m - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

/// Knots `[lo, lo + cumsum(softmax(mu) * (hi - lo))]`.
///
/// The upper half of the vector is accumulated from the right so that tiny
/// widths next to either endpoint keep full relative precision. The last
/// entry is exactly `hi`. Logits so spread out that an interval rounds to
/// zero width are an error.
pub fn knots_from_logits(logits: &[f64], lo: f64, hi: f64) -> Result<Vec<f64>> {
    if logits.is_empty() {
        return Err(Error::InvalidInput("knot layer needs at least one interval".into()));
    }
    ensure_finite(logits, "knot logits")?;
    if !(lo.is_finite() && hi.is_finite() && hi > lo) {
        return Err(Error::InvalidInput(format!("bad knot bounds [{lo}, {hi}]")));
    }
    let s = softmax(logits);
    let n = s.len();
    let span = hi - lo;
    let mut t = vec![0.0; n + 1];
    let half = n / 2;
    let mut acc = 0.0;
    t[0] = lo;
    for i in 1..=half {
        acc += s[i - 1];
        t[i] = lo + span * acc;
    }
    let mut acc = 0.0;
    t[n] = hi;
    for i in (half + 1..n).rev() {
        acc += s[i];
        t[i] = hi - span * acc;
    }
    // widths below the float spacing of the knots (logit spreads near 36)
    if t.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::InvalidInput("knot logits collapse an interval to zero width".into()));
    }
    Ok(t)
}

/// Jacobian `dt_i / dmu_j`, shape `(N + 1) x N`. Rows 0 and N vanish.
pub fn knot_jacobian(logits: &[f64], lo: f64, hi: f64) -> Result<DMatrix<f64>> {
    if logits.is_empty() {
        return Err(Error::InvalidInput("knot layer needs at least one interval".into()));
    }
    ensure_finite(logits, "knot logits")?;
    let s = softmax(logits);
    let n = s.len();
    let span = hi - lo;
    let mut jac = DMatrix::zeros(n + 1, n);
    let mut prefix = 0.0;
    for i in 0..=n {
        if i > 0 {
            prefix += s[i - 1];
        }
        if i == 0 || i == n {
            continue;
        }
        for j in 0..n {
            let below = if j < i { 1.0 } else { 0.0 };
            jac[(i, j)] = span * s[j] * (below - prefix);
        }
    }
    Ok(jac)
}

/// Pull a knot-space gradient back to the logits: `J^T g`, in O(N).
pub fn knot_vjp(logits: &[f64], lo: f64, hi: f64, grad_knots: &[f64]) -> Vec<f64> {
    let s = softmax(logits);
    let n = s.len();
    debug_assert_eq!(grad_knots.len(), n + 1);
    let span = hi - lo;
    // Rows 0 and N of the Jacobian vanish, so only interior knots contribute.
    // weighted = sum_i g_i S_i with S_i = sum_{k<i} s_k
    let mut prefix = 0.0;
    let mut weighted = 0.0;
    for i in 1..n {
        prefix += s[i - 1];
        weighted += grad_knots[i] * prefix;
    }
    // suffix_j = sum_{j<i<N} g_i
    let mut out = vec![0.0; n];
    let mut suffix = 0.0;
    for j in (0..n).rev() {
        if j + 1 < n {
            suffix += grad_knots[j + 1];
        }
        out[j] = span * s[j] * (suffix - weighted);
    }
    out
}

/// The two nonzero hats at a point: `phi_k` and `phi_{k+1}` on interval `k`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LocalHat {
    pub interval: usize,
    pub values: [f64; 2],
    pub derivs: [f64; 2],
}

impl LocalHat {
    /// Sensitivities of the two hat values and slopes w.r.t. the interval
    /// endpoints `(t_k, t_{k+1})`, contracted with upstream gradients.
    pub fn endpoint_vjp(&self, knots: &[f64], x: f64, dvalues: [f64; 2], dderivs: [f64; 2]) -> (f64, f64) {
        let a = knots[self.interval];
        let b = knots[self.interval + 1];
        let h = b - a;
        let h2 = h * h;
        let ra = (b - x) / h2;
        let rb = (x - a) / h2;
        let da = dvalues[0] * ra - dvalues[1] * ra - dderivs[0] / h2 + dderivs[1] / h2;
        let db = dvalues[0] * rb - dvalues[1] * rb + dderivs[0] / h2 - dderivs[1] / h2;
        (da, db)
    }
}

/// Index of the interval containing `x`. Points on an interior knot belong
/// to the left interval; `x == knots[0]` belongs to interval 0.
pub fn locate(knots: &[f64], x: f64) -> Result<usize> {
    let n = knots.len() - 1;
    let (lo, hi) = (knots[0], knots[n]);
    if !(x >= lo && x <= hi) {
        return Err(Error::OutOfDomain { axis: 0, value: x, lo, hi });
    }
    // first knot index with knots[idx] >= x, among 1..=n
    let idx = knots[1..].partition_point(|&t| t < x) + 1;
    Ok(idx.clamp(1, n) - 1)
}

pub fn local_hat(knots: &[f64], x: f64) -> Result<LocalHat> {
    let k = locate(knots, x)?;
    let a = knots[k];
    let b = knots[k + 1];
    let h = b - a;
    Ok(LocalHat {
        interval: k,
        values: [(b - x) / h, (x - a) / h],
        derivs: [-1.0 / h, 1.0 / h],
    })
}

/// Dense hat-function evaluation.
#[derive(Debug, Clone)]
pub struct SplineEval {
    pub values: DMatrix<f64>,
    pub derivs: DMatrix<f64>,
    pub cell_index: Vec<usize>,
}

/// Evaluate all `N + 1` hats and their slopes at `xs`. No extrapolation.
pub fn eval_b1_basis(knots: &[f64], xs: &[f64]) -> Result<SplineEval> {
    if knots.len() < 2 {
        return Err(Error::InvalidInput("need at least two knots".into()));
    }
    if knots.windows(2).any(|w| !(w[1] > w[0])) {
        return Err(Error::InvalidInput("knots must be strictly increasing".into()));
    }
    let m = knots.len();
    let mut values = DMatrix::zeros(xs.len(), m);
    let mut derivs = DMatrix::zeros(xs.len(), m);
    let mut cell_index = Vec::with_capacity(xs.len());
    for (row, &x) in xs.iter().enumerate() {
        let hat = local_hat(knots, x)?;
        for s in 0..2 {
            values[(row, hat.interval + s)] = hat.values[s];
            derivs[(row, hat.interval + s)] = hat.derivs[s];
        }
        cell_index.push(hat.interval);
    }
    Ok(SplineEval { values, derivs, cell_index })
}

/// A 1D free-knot spline layer on `[lo, hi]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KnotLayer {
    pub logits: Vec<f64>,
    pub lo: f64,
    pub hi: f64,
}

impl KnotLayer {
    /// Uniform knots: zero logits.
    pub fn uniform(n_intervals: usize, lo: f64, hi: f64) -> Result<Self> {
        Self::from_logits(vec![0.0; n_intervals], lo, hi)
    }

    pub fn from_logits(logits: Vec<f64>, lo: f64, hi: f64) -> Result<Self> {
        knots_from_logits(&logits, lo, hi)?;
        Ok(Self { logits, lo, hi })
    }

    /// Zero logits plus optional Gaussian perturbation.
    pub fn perturbed<R: Rng + ?Sized>(n_intervals: usize, lo: f64, hi: f64, scale: f64, rng: &mut R) -> Result<Self> {
        let mut logits = vec![0.0; n_intervals];
        if scale > 0.0 {
            let normal = Normal::new(0.0, scale).map_err(|e| Error::InvalidInput(e.to_string()))?;
            for m in logits.iter_mut() {
                *m = normal.sample(rng);
            }
        }
        Self::from_logits(logits, lo, hi)
    }

    pub fn n_intervals(&self) -> usize {
        self.logits.len()
    }

    pub fn n_basis(&self) -> usize {
        self.logits.len() + 1
    }

    pub fn knots(&self) -> Vec<f64> {
        knots_from_logits(&self.logits, self.lo, self.hi).expect("knot layer holds validated logits")
    }

    pub fn widths(&self) -> Vec<f64> {
        let span = self.hi - self.lo;
        softmax(&self.logits).into_iter().map(|s| s * span).collect()
    }

    pub fn jacobian(&self) -> DMatrix<f64> {
        knot_jacobian(&self.logits, self.lo, self.hi).expect("knot layer holds validated logits")
    }

    pub fn eval(&self, xs: &[f64]) -> Result<SplineEval> {
        eval_b1_basis(&self.knots(), xs)
    }

    /// Chain a knot-space gradient back to the logits.
    pub fn backward(&self, grad_knots: &[f64]) -> Vec<f64> {
        knot_vjp(&self.logits, self.lo, self.hi, grad_knots)
    }

    pub fn set_logits(&mut self, logits: &[f64]) -> Result<()> {
        if logits.len() != self.logits.len() {
            return Err(Error::DimensionMismatch(format!(
                "expected {} knot logits, got {}",
                self.logits.len(),
                logits.len()
            )));
        }
        ensure_finite(logits, "knot logits")?;
        knots_from_logits(logits, self.lo, self.hi)?;
        self.logits.copy_from_slice(logits);
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn zero_logits_give_uniform_knots() {
        let t = knots_from_logits(&[0.0; 4], 0.0, 1.0).unwrap();
        for (a, b) in t.iter().zip([0.0, 0.25, 0.5, 0.75, 1.0]) {
            assert_abs_diff_eq!(*a, b, epsilon = 1e-15);
        }
    }

    #[test]
    fn ln3_logit_gives_three_quarter_knot() {
        let t = knots_from_logits(&[3f64.ln(), 0.0], 0.0, 1.0).unwrap();
        assert_abs_diff_eq!(t[1], 0.75, epsilon = 1e-15);
        assert_eq!(t[2], 1.0);
    }

    #[test]
    fn dominant_logit_keeps_all_widths_positive() {
        for hot in 0..5 {
            let mut mu = vec![0.0; 5];
            mu[hot] = 20.0;
            let layer = KnotLayer::from_logits(mu, 0.0, 1.0).unwrap();
            let w = layer.widths();
            assert!(w[hot] >= 1.0 - 1e-8);
            assert!(w.iter().all(|&v| v > 0.0));
            let t = layer.knots();
            assert!(t.windows(2).all(|p| p[1] > p[0]));
        }
    }

    #[test]
    fn rejects_non_finite_logits() {
        assert!(matches!(knots_from_logits(&[0.0, f64::NAN], 0.0, 1.0), Err(Error::InvalidInput(_))));
        assert!(knots_from_logits(&[], 0.0, 1.0).is_err());
    }

    #[test]
    fn hat_midpoint_values() {
        let e = eval_b1_basis(&[0.0, 0.5, 1.0], &[0.25]).unwrap();
        assert_abs_diff_eq!(e.values[(0, 0)], 0.5, epsilon = 1e-15);
        assert_abs_diff_eq!(e.values[(0, 1)], 0.5, epsilon = 1e-15);
        assert_eq!(e.values[(0, 2)], 0.0);
        assert_abs_diff_eq!(e.derivs[(0, 0)], -2.0, epsilon = 1e-14);
        assert_abs_diff_eq!(e.derivs[(0, 1)], 2.0, epsilon = 1e-14);
        assert_eq!(e.derivs[(0, 2)], 0.0);
    }

    #[test]
    fn interpolation_at_knots() {
        let t = [0.0, 0.1, 0.45, 0.8, 1.0];
        let e = eval_b1_basis(&t, &t).unwrap();
        for g in 0..t.len() {
            for b in 0..t.len() {
                let expect = if g == b { 1.0 } else { 0.0 };
                assert_abs_diff_eq!(e.values[(g, b)], expect, epsilon = 1e-15);
            }
        }
        // left-interval convention, except at lo
        assert_eq!(e.cell_index, vec![0, 0, 1, 2, 3]);
    }

    #[test]
    fn nonuniform_linear_interpolation() {
        let e = eval_b1_basis(&[0.0, 0.75, 1.0], &[0.6]).unwrap();
        assert_abs_diff_eq!(e.values[(0, 0)], 0.2, epsilon = 1e-15);
        assert_abs_diff_eq!(e.values[(0, 1)], 0.8, epsilon = 1e-15);
        assert_eq!(e.values[(0, 2)], 0.0);
    }

    #[test]
    fn out_of_domain_is_rejected() {
        assert!(matches!(eval_b1_basis(&[0.0, 1.0], &[1.0 + 1e-12]), Err(Error::OutOfDomain { .. })));
        assert!(eval_b1_basis(&[0.0, 1.0], &[-0.1]).is_err());
    }

    #[test]
    fn jacobian_special_cases() {
        let j = knot_jacobian(&[0.3], 0.0, 1.0).unwrap();
        assert!(j.iter().all(|&v| v == 0.0));

        let j = knot_jacobian(&[0.0, 0.0], -1.0, 1.0).unwrap();
        assert_abs_diff_eq!(j[(1, 0)], 0.25 * 2.0, epsilon = 1e-15);
        assert_abs_diff_eq!(j[(1, 1)], -0.25 * 2.0, epsilon = 1e-15);
        assert!(j.row(2).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn vjp_matches_dense_jacobian() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for n in 1..8 {
            let mu: Vec<f64> = (0..n).map(|_| rng.random_range(-3.0..3.0)).collect();
            let g: Vec<f64> = (0..=n).map(|_| rng.random_range(-1.0..1.0)).collect();
            let jac = knot_jacobian(&mu, 0.0, 2.0).unwrap();
            let dense = jac.transpose() * nalgebra::DVector::from_vec(g.clone());
            let fast = knot_vjp(&mu, 0.0, 2.0, &g);
            for j in 0..n {
                assert_abs_diff_eq!(dense[j], fast[j], epsilon = 1e-13);
            }
        }
    }
}
