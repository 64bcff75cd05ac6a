//! The polynomial-spline network
//!
//! ```text
//! y(x) = sum_alpha ( sum_gamma W[alpha, gamma] phi_gamma(x) ) ( sum_beta c[alpha, beta] p_beta(x) )
//!      = c^T Phi(x)
//! ```
//!
//! Coefficients are stored cell-major: `c[alpha * d_P + beta]`.
//!
//! The trainable parameter vector (everything except `c`, which the
//! least-squares step owns) is laid out as: x-axis knot logits, then y-axis
//! knot logits (2D only), then gating logits in row-major order
//! (`n_cells x n_splines`). In 2D the spline index is `i * (Ny + 1) + j` for
//! the product of x-hat `i` and y-hat `j`.
//!
//! Gradients are hand-derived. [`ModelEval`] caches every per-point quantity
//! of one evaluation batch and exposes a backward pass that turns upstream
//! sensitivities w.r.t. `y` and `grad y` into knot-space and gating-weight
//! gradients at fixed evaluation points. Moving evaluation points (quadrature
//! nodes attached to knots) add their own position terms through
//! [`GradAccumulator::add_knot`].

use nalgebra::DMatrix;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::basis::{with_axis, PolyBasis, PolyKind, PolyPoint};
use crate::error::{Error, Result};
use crate::gating::{GatingInit, GatingWeights};
use crate::geometry::Points;
use crate::knots::{local_hat, KnotLayer, LocalHat};

/// Shape and initialization of a model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub dim: usize,
    /// Knot intervals per axis (`N_splines`); each axis has `N + 1` hats.
    pub n_splines: usize,
    pub n_cells: usize,
    pub degree: usize,
    #[serde(default)]
    pub basis: PolyKind,
    #[serde(default)]
    pub gating_init: GatingInit,
    /// Standard deviation of the Gaussian perturbation of the knot logits.
    #[serde(default)]
    pub knot_noise: f64,
}

impl ModelConfig {
    pub fn new(dim: usize, n_splines: usize, n_cells: usize, degree: usize) -> Self {
        Self {
            dim,
            n_splines,
            n_cells,
            degree,
            basis: PolyKind::Legendre,
            gating_init: GatingInit::default(),
            knot_noise: 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PolySplineModel {
    pub knots: Vec<KnotLayer>,
    pub gating: GatingWeights,
    pub poly: PolyBasis,
    pub coeffs: Vec<f64>,
}

/// Feature map `Phi` and its spatial gradient (one matrix per axis).
#[derive(Debug, Clone)]
pub struct FeatureMap {
    pub values: DMatrix<f64>,
    pub grads: Vec<DMatrix<f64>>,
}

impl PolySplineModel {
    pub fn new<R: Rng + ?Sized>(config: &ModelConfig, rng: &mut R) -> Result<Self> {
        if !(config.dim == 1 || config.dim == 2) {
            return Err(Error::InvalidInput(format!("dimension {} not supported", config.dim)));
        }
        if config.n_splines == 0 || config.n_cells == 0 {
            return Err(Error::InvalidInput("need at least one knot interval and one cell".into()));
        }
        let mut knots = Vec::with_capacity(config.dim);
        for _ in 0..config.dim {
            knots.push(KnotLayer::perturbed(config.n_splines, 0.0, 1.0, config.knot_noise, rng)?);
        }
        let per_axis = config.n_splines + 1;
        let n_splines = per_axis.pow(config.dim as u32);
        let grid = (config.dim == 2).then_some((per_axis, per_axis));
        let gating = GatingWeights::init(config.n_cells, n_splines, grid, config.gating_init, rng)?;
        let poly = PolyBasis::new(config.degree, config.dim, config.basis)?;
        let coeffs = vec![0.0; config.n_cells * poly.len()];
        Ok(Self { knots, gating, poly, coeffs })
    }

    pub fn from_parts(knots: Vec<KnotLayer>, gating: GatingWeights, poly: PolyBasis, coeffs: Vec<f64>) -> Result<Self> {
        let model = Self { knots, gating, poly, coeffs };
        model.validate()?;
        Ok(model)
    }

    pub fn validate(&self) -> Result<()> {
        if self.knots.len() != self.poly.dim {
            return Err(Error::DimensionMismatch(format!(
                "{} knot layers for a {}-d polynomial basis",
                self.knots.len(),
                self.poly.dim
            )));
        }
        let splines: usize = self.knots.iter().map(|k| k.n_basis()).product();
        if splines != self.gating.n_splines() {
            return Err(Error::DimensionMismatch(format!(
                "gating over {} splines but knot layers provide {splines}",
                self.gating.n_splines()
            )));
        }
        if self.coeffs.len() != self.n_coeffs() {
            return Err(Error::DimensionMismatch(format!(
                "{} coefficients, expected {}",
                self.coeffs.len(),
                self.n_coeffs()
            )));
        }
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.poly.dim
    }

    pub fn n_cells(&self) -> usize {
        self.gating.n_cells()
    }

    pub fn n_coeffs(&self) -> usize {
        self.gating.n_cells() * self.poly.len()
    }

    pub fn n_params(&self) -> usize {
        self.knots.iter().map(|k| k.n_intervals()).sum::<usize>() + self.gating.logits().len()
    }

    /// Trainable parameters in the documented order.
    pub fn params(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.n_params());
        for k in &self.knots {
            out.extend_from_slice(&k.logits);
        }
        out.extend(self.gating.logits_row_major());
        out
    }

    pub fn set_params(&mut self, params: &[f64]) -> Result<()> {
        if params.len() != self.n_params() {
            return Err(Error::DimensionMismatch(format!(
                "expected {} parameters, got {}",
                self.n_params(),
                params.len()
            )));
        }
        // validate everything before touching the model
        let mut knots = self.knots.clone();
        let mut offset = 0;
        for k in knots.iter_mut() {
            let n = k.n_intervals();
            k.set_logits(&params[offset..offset + n])?;
            offset += n;
        }
        let mut gating = self.gating.clone();
        gating.set_logits_row_major(&params[offset..])?;
        self.knots = knots;
        self.gating = gating;
        Ok(())
    }

    pub fn set_coeffs(&mut self, coeffs: &[f64]) -> Result<()> {
        if coeffs.len() != self.n_coeffs() {
            return Err(Error::DimensionMismatch(format!(
                "expected {} coefficients, got {}",
                self.n_coeffs(),
                coeffs.len()
            )));
        }
        self.coeffs.copy_from_slice(coeffs);
        Ok(())
    }

    pub fn eval(&self, points: &Points) -> Result<ModelEval> {
        ModelEval::new(self, points)
    }

    /// `y` and `grad y` at `points` using the stored coefficients.
    pub fn forward(&self, points: &Points) -> Result<(Vec<f64>, DMatrix<f64>)> {
        let ev = self.eval(points)?;
        let (y, g) = ev.forward(&self.coeffs);
        let d = self.dim();
        let grads = DMatrix::from_fn(points.len(), d, |i, a| g[i][a]);
        Ok((y, grads))
    }

    pub fn feature_map(&self, points: &Points) -> Result<FeatureMap> {
        Ok(self.eval(points)?.features())
    }

    /// Gradient over the trainable parameters of a scalar loss with
    /// per-point sensitivities `dy` (w.r.t. `y`) and `dgrad` (w.r.t.
    /// `grad y`, `n x d`), holding `c` and the points fixed.
    pub fn param_gradient(&self, points: &Points, dy: &[f64], dgrad: Option<&DMatrix<f64>>) -> Result<Vec<f64>> {
        if dy.len() != points.len() {
            return Err(Error::DimensionMismatch("upstream length does not match batch".into()));
        }
        let ev = self.eval(points)?;
        let sg: Vec<[f64; 2]> = match dgrad {
            Some(m) => {
                if m.nrows() != points.len() || m.ncols() != self.dim() {
                    return Err(Error::DimensionMismatch("gradient upstream has wrong shape".into()));
                }
                (0..points.len())
                    .map(|i| {
                        let mut g = [0.0; 2];
                        for a in 0..self.dim() {
                            g[a] = m[(i, a)];
                        }
                        g
                    })
                    .collect()
            }
            None => vec![[0.0; 2]; points.len()],
        };
        let mut acc = GradAccumulator::new(self);
        ev.backward(&self.coeffs, dy, &sg, &mut acc);
        Ok(acc.finish(self))
    }

    pub fn knot_vectors(&self) -> Vec<Vec<f64>> {
        self.knots.iter().map(|k| k.knots()).collect()
    }
}

/// Accumulates gradients in knot space and gating-weight space, then maps
/// them to the parameter vector in one pass.
#[derive(Debug, Clone)]
pub struct GradAccumulator {
    pub knots: Vec<Vec<f64>>,
    pub weights: DMatrix<f64>,
}

impl GradAccumulator {
    pub fn new(model: &PolySplineModel) -> Self {
        Self {
            knots: model.knots.iter().map(|k| vec![0.0; k.n_basis()]).collect(),
            weights: DMatrix::zeros(model.gating.n_cells(), model.gating.n_splines()),
        }
    }

    pub fn add_knot(&mut self, axis: usize, index: usize, value: f64) {
        self.knots[axis][index] += value;
    }

    pub fn finish(&self, model: &PolySplineModel) -> Vec<f64> {
        let mut out = Vec::with_capacity(model.n_params());
        for (layer, g) in model.knots.iter().zip(&self.knots) {
            out.extend(layer.backward(g));
        }
        let gl = model.gating.backward(&self.weights);
        for r in 0..gl.nrows() {
            out.extend(gl.row(r).iter());
        }
        out
    }
}

/// Cached per-point data of one model evaluation.
#[derive(Debug, Clone)]
pub struct ModelEval {
    dim: usize,
    n: usize,
    n_cells: usize,
    dp: usize,
    my: usize,
    points: Points,
    knots: Vec<Vec<f64>>,
    weights: DMatrix<f64>,
    hats: Vec<[LocalHat; 2]>,
    pou: Vec<f64>,
    pou_grad: Vec<[f64; 2]>,
    pou_mixed: Vec<f64>,
    poly: Vec<PolyPoint>,
}

/// Up to four nonzero splines at a point: index, value, gradient, mixed
/// second derivative.
struct SplineNz {
    index: usize,
    value: f64,
    grad: [f64; 2],
    mixed: f64,
    ab: (usize, usize),
}

impl ModelEval {
    pub fn new(model: &PolySplineModel, points: &Points) -> Result<Self> {
        model.validate()?;
        let dim = model.dim();
        if points.dim() != dim {
            return Err(Error::DimensionMismatch(format!(
                "{}-d points for a {dim}-d model",
                points.dim()
            )));
        }
        points.check_unit_box()?;
        let knots = model.knot_vectors();
        let n = points.len();
        let n_cells = model.n_cells();
        let dp = model.poly.len();
        let my = if dim == 2 { knots[1].len() } else { 1 };
        let weights = model.gating.weights().clone();
        let mut hats = Vec::with_capacity(n);
        let mut poly = Vec::with_capacity(n);
        let mut pou = vec![0.0; n * n_cells];
        let mut pou_grad = vec![[0.0; 2]; n * n_cells];
        let mut pou_mixed = vec![0.0; n * n_cells];
        let mut ev = Self {
            dim,
            n,
            n_cells,
            dp,
            my,
            points: points.clone(),
            knots,
            weights,
            hats: Vec::new(),
            pou: Vec::new(),
            pou_grad: Vec::new(),
            pou_mixed: Vec::new(),
            poly: Vec::new(),
        };
        for i in 0..n {
            let x = points.get(i);
            let hx = local_hat(&ev.knots[0], x[0]).map_err(|e| with_axis(e, 0))?;
            let hy = if dim == 2 {
                local_hat(&ev.knots[1], x[1]).map_err(|e| with_axis(e, 1))?
            } else {
                LocalHat { interval: 0, values: [1.0, 0.0], derivs: [0.0, 0.0] }
            };
            hats.push([hx, hy]);
            let mut pp = PolyPoint::default();
            model.poly.eval_point(x, &mut pp);
            poly.push(pp);
        }
        ev.hats = hats;
        for i in 0..n {
            for nz in ev.nonzeros(i) {
                for a in 0..n_cells {
                    let w = ev.weights[(a, nz.index)];
                    let k = i * n_cells + a;
                    pou[k] += w * nz.value;
                    pou_grad[k][0] += w * nz.grad[0];
                    pou_grad[k][1] += w * nz.grad[1];
                    pou_mixed[k] += w * nz.mixed;
                }
            }
        }
        ev.pou = pou;
        ev.pou_grad = pou_grad;
        ev.pou_mixed = pou_mixed;
        ev.poly = poly;
        Ok(ev)
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    pub fn points(&self) -> &Points {
        &self.points
    }

    pub fn knots(&self) -> &[Vec<f64>] {
        &self.knots
    }

    fn nonzeros(&self, i: usize) -> Vec<SplineNz> {
        let [hx, hy] = self.hats[i];
        let mut out = Vec::with_capacity(4);
        if self.dim == 1 {
            for a in 0..2 {
                out.push(SplineNz {
                    index: hx.interval + a,
                    value: hx.values[a],
                    grad: [hx.derivs[a], 0.0],
                    mixed: 0.0,
                    ab: (a, 0),
                });
            }
        } else {
            for a in 0..2 {
                for b in 0..2 {
                    out.push(SplineNz {
                        index: (hx.interval + a) * self.my + hy.interval + b,
                        value: hx.values[a] * hy.values[b],
                        grad: [hx.derivs[a] * hy.values[b], hx.values[a] * hy.derivs[b]],
                        mixed: hx.derivs[a] * hy.derivs[b],
                        ab: (a, b),
                    });
                }
            }
        }
        out
    }

    /// POU cell values, `n x n_cells`.
    pub fn pou(&self) -> DMatrix<f64> {
        DMatrix::from_row_slice(self.n, self.n_cells, &self.pou)
    }

    pub fn features(&self) -> FeatureMap {
        let k = self.n_cells * self.dp;
        let mut values = DMatrix::zeros(self.n, k);
        let mut grads = vec![DMatrix::zeros(self.n, k); self.dim];
        for i in 0..self.n {
            let pp = &self.poly[i];
            for a in 0..self.n_cells {
                let pk = i * self.n_cells + a;
                let (p, gp) = (self.pou[pk], self.pou_grad[pk]);
                for b in 0..self.dp {
                    let col = a * self.dp + b;
                    values[(i, col)] = p * pp.values[b];
                    for (ax, g) in grads.iter_mut().enumerate() {
                        g[(i, col)] = gp[ax] * pp.values[b] + p * pp.grads[b][ax];
                    }
                }
            }
        }
        FeatureMap { values, grads }
    }

    /// Expert values, gradients and Hessians at point `i` for coefficients `c`.
    fn experts(&self, c: &[f64], i: usize) -> (Vec<f64>, Vec<[f64; 2]>, Vec<[f64; 3]>) {
        let pp = &self.poly[i];
        let mut e = vec![0.0; self.n_cells];
        let mut ge = vec![[0.0; 2]; self.n_cells];
        let mut he = vec![[0.0; 3]; self.n_cells];
        for a in 0..self.n_cells {
            for b in 0..self.dp {
                let cb = c[a * self.dp + b];
                e[a] += cb * pp.values[b];
                ge[a][0] += cb * pp.grads[b][0];
                ge[a][1] += cb * pp.grads[b][1];
                for h in 0..3 {
                    he[a][h] += cb * pp.hess[b][h];
                }
            }
        }
        (e, ge, he)
    }

    /// `y` and `grad y` (padded to two components).
    pub fn forward(&self, c: &[f64]) -> (Vec<f64>, Vec<[f64; 2]>) {
        let mut y = vec![0.0; self.n];
        let mut g = vec![[0.0; 2]; self.n];
        for i in 0..self.n {
            let (e, ge, _) = self.experts(c, i);
            for a in 0..self.n_cells {
                let pk = i * self.n_cells + a;
                let (p, gp) = (self.pou[pk], self.pou_grad[pk]);
                y[i] += p * e[a];
                for ax in 0..self.dim {
                    g[i][ax] += gp[ax] * e[a] + p * ge[a][ax];
                }
            }
        }
        (y, g)
    }

    /// Spatial Hessian of `y` as `[xx, xy, yy]`.
    pub fn hessian(&self, c: &[f64]) -> Vec<[f64; 3]> {
        let mut out = vec![[0.0; 3]; self.n];
        for i in 0..self.n {
            let (e, ge, he) = self.experts(c, i);
            let h = &mut out[i];
            for a in 0..self.n_cells {
                let pk = i * self.n_cells + a;
                let (p, gp, pm) = (self.pou[pk], self.pou_grad[pk], self.pou_mixed[pk]);
                h[0] += 2.0 * gp[0] * ge[a][0] + p * he[a][0];
                h[1] += pm * e[a] + gp[0] * ge[a][1] + gp[1] * ge[a][0] + p * he[a][1];
                h[2] += 2.0 * gp[1] * ge[a][1] + p * he[a][2];
            }
        }
        out
    }

    /// Backward pass at fixed points for a loss with sensitivities
    /// `dy[i] = dL/dy(x_i)` and `dg[i] = dL/dgrad y(x_i)`, where
    /// `y = c^T Phi`.
    pub fn backward(&self, c: &[f64], dy: &[f64], dg: &[[f64; 2]], acc: &mut GradAccumulator) {
        let nc = self.n_cells;
        let mut d_pou = vec![0.0; nc];
        let mut d_pou_grad = vec![[0.0; 2]; nc];
        for i in 0..self.n {
            let (sy, sg) = (dy[i], dg[i]);
            if sy == 0.0 && sg == [0.0, 0.0] {
                continue;
            }
            let (e, ge, _) = self.experts(c, i);
            for a in 0..nc {
                d_pou[a] = sy * e[a] + sg[0] * ge[a][0] + sg[1] * ge[a][1];
                d_pou_grad[a] = [sg[0] * e[a], sg[1] * e[a]];
            }
            let nzs = self.nonzeros(i);
            // spline-level upstream
            let mut d_val = [0.0; 4];
            let mut d_grad = [[0.0; 2]; 4];
            for (s, nz) in nzs.iter().enumerate() {
                for a in 0..nc {
                    let w = self.weights[(a, nz.index)];
                    acc.weights[(a, nz.index)] +=
                        d_pou[a] * nz.value + d_pou_grad[a][0] * nz.grad[0] + d_pou_grad[a][1] * nz.grad[1];
                    d_val[s] += w * d_pou[a];
                    d_grad[s][0] += w * d_pou_grad[a][0];
                    d_grad[s][1] += w * d_pou_grad[a][1];
                }
            }
            let [hx, hy] = self.hats[i];
            let x = self.points.get(i);
            let mut dxv = [0.0; 2];
            let mut dxd = [0.0; 2];
            if self.dim == 1 {
                for s in 0..2 {
                    dxv[s] = d_val[s];
                    dxd[s] = d_grad[s][0];
                }
            } else {
                let mut dyv = [0.0; 2];
                let mut dyd = [0.0; 2];
                for (s, nz) in nzs.iter().enumerate() {
                    let (a, b) = nz.ab;
                    dxv[a] += d_val[s] * hy.values[b] + d_grad[s][1] * hy.derivs[b];
                    dxd[a] += d_grad[s][0] * hy.values[b];
                    dyv[b] += d_val[s] * hx.values[a] + d_grad[s][0] * hx.derivs[a];
                    dyd[b] += d_grad[s][1] * hx.values[a];
                }
                let (ta, tb) = hy.endpoint_vjp(&self.knots[1], x[1], dyv, dyd);
                acc.knots[1][hy.interval] += ta;
                acc.knots[1][hy.interval + 1] += tb;
            }
            let (ta, tb) = hx.endpoint_vjp(&self.knots[0], x[0], dxv, dxd);
            acc.knots[0][hx.interval] += ta;
            acc.knots[0][hx.interval + 1] += tb;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::basis::{coeffs_from_monomial, eval_poly};
    use crate::knots::eval_b1_basis;
    use approx::assert_abs_diff_eq;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_model(rng: &mut ChaCha8Rng, dim: usize, n: usize, cells: usize, degree: usize) -> PolySplineModel {
        let mut cfg = ModelConfig::new(dim, n, cells, degree);
        cfg.knot_noise = 0.7;
        cfg.gating_init = GatingInit::Random { std: 1.0 };
        let mut m = PolySplineModel::new(&cfg, rng).unwrap();
        let c: Vec<f64> = (0..m.n_coeffs()).map(|_| rng.random_range(-1.0..1.0)).collect();
        m.set_coeffs(&c).unwrap();
        m
    }

    /// Direct evaluation of the defining triple sum, 1D.
    fn direct_sum(m: &PolySplineModel, x: f64) -> f64 {
        let s = eval_b1_basis(&m.knots[0].knots(), &[x]).unwrap();
        let p = eval_poly(&m.poly, &Points::from_1d(&[x])).unwrap();
        let w = m.gating.weights();
        let dp = m.poly.len();
        let mut y = 0.0;
        for a in 0..m.n_cells() {
            let gate: f64 = (0..w.ncols()).map(|g| w[(a, g)] * s.values[(0, g)]).sum();
            let expert: f64 = (0..dp).map(|b| m.coeffs[a * dp + b] * p.values[(0, b)]).sum();
            y += gate * expert;
        }
        y
    }

    #[test]
    fn single_cell_reduces_to_polynomial() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut m = PolySplineModel::new(&ModelConfig::new(1, 4, 1, 1), &mut rng).unwrap();
        let c = coeffs_from_monomial(PolyKind::Legendre, 1, &[0.0, 1.0]).unwrap();
        m.set_coeffs(&c).unwrap();
        let (y, g) = m.forward(&Points::from_1d(&[0.3])).unwrap();
        assert_abs_diff_eq!(y[0], 0.3, epsilon = 1e-15);
        assert_abs_diff_eq!(g[(0, 0)], 1.0, epsilon = 1e-14);

        let f = m.feature_map(&Points::from_1d(&[0.3, 0.9])).unwrap();
        let p = eval_poly(&m.poly, &Points::from_1d(&[0.3, 0.9])).unwrap();
        for (a, b) in f.values.iter().zip(p.values.iter()) {
            assert_abs_diff_eq!(a, b, epsilon = 1e-15);
        }
    }

    #[test]
    fn degree_zero_identity_gating_is_spline_interpolant() {
        let knots = KnotLayer::from_logits(vec![0.3, -0.2, 0.5, 0.0], 0.0, 1.0).unwrap();
        let t = knots.knots();
        let gating = GatingWeights::near_identity(5, 80.0).unwrap();
        let poly = PolyBasis::new(0, 1, PolyKind::Legendre).unwrap();
        let c = vec![0.5, -1.0, 2.0, 0.25, 1.5];
        let m = PolySplineModel::from_parts(vec![knots], gating, poly, c.clone()).unwrap();
        let (y, _) = m.forward(&Points::from_1d(&t)).unwrap();
        for (yi, ci) in y.iter().zip(&c) {
            assert_abs_diff_eq!(yi, ci, epsilon = 1e-14);
        }
        // features reduce to the hats
        let f = m.feature_map(&Points::from_1d(&[0.1, 0.6])).unwrap();
        let s = eval_b1_basis(&t, &[0.1, 0.6]).unwrap();
        for (a, b) in f.values.iter().zip(s.values.iter()) {
            assert_abs_diff_eq!(a, b, epsilon = 1e-15);
        }
    }

    #[test]
    fn forward_matches_direct_sum_and_feature_map() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..10 {
            let m = random_model(&mut rng, 1, 7, 3, 3);
            let xs: Vec<f64> = (0..50).map(|_| rng.random::<f64>()).collect();
            let pts = Points::from_1d(&xs);
            let (y, _) = m.forward(&pts).unwrap();
            let f = m.feature_map(&pts).unwrap();
            let via_phi = &f.values * nalgebra::DVector::from_column_slice(&m.coeffs);
            for (i, &x) in xs.iter().enumerate() {
                assert_abs_diff_eq!(y[i], direct_sum(&m, x), epsilon = 1e-13);
                assert_abs_diff_eq!(y[i], via_phi[i], epsilon = 1e-13);
            }
        }
    }

    fn far_from_knots(m: &PolySplineModel, x: &[f64], tol: f64) -> bool {
        m.knot_vectors().iter().zip(x).all(|(t, v)| t.iter().all(|k| (k - v).abs() > tol))
    }

    #[test]
    fn feature_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for dim in [1, 2] {
            let m = random_model(&mut rng, dim, 5, 4, 2);
            let h = 1e-7;
            let mut checked = 0;
            while checked < 100 {
                let x: Vec<f64> = (0..dim).map(|_| rng.random_range(0.001..0.999)).collect();
                if !far_from_knots(&m, &x, 1e-4) {
                    continue;
                }
                let f = m.feature_map(&Points::new(dim, x.clone()).unwrap()).unwrap();
                for ax in 0..dim {
                    let mut xp = x.clone();
                    let mut xm = x.clone();
                    xp[ax] += h;
                    xm[ax] -= h;
                    let fp = m.feature_map(&Points::new(dim, xp).unwrap()).unwrap();
                    let fm = m.feature_map(&Points::new(dim, xm).unwrap()).unwrap();
                    for k in 0..f.values.ncols() {
                        let fd = (fp.values[(0, k)] - fm.values[(0, k)]) / (2.0 * h);
                        let an = f.grads[ax][(0, k)];
                        assert!((fd - an).abs() <= 1e-5 * an.abs().max(1.0), "{fd} vs {an}");
                    }
                }
                checked += 1;
            }
        }
    }

    #[test]
    fn hessian_matches_finite_differences_of_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for dim in [1, 2] {
            let m = random_model(&mut rng, dim, 4, 3, 3);
            let h = 1e-6;
            let mut checked = 0;
            while checked < 20 {
                let x: Vec<f64> = (0..dim).map(|_| rng.random_range(0.01..0.99)).collect();
                if !far_from_knots(&m, &x, 1e-3) {
                    continue;
                }
                let ev = m.eval(&Points::new(dim, x.clone()).unwrap()).unwrap();
                let hs = ev.hessian(&m.coeffs)[0];
                for ax in 0..dim {
                    let mut xp = x.clone();
                    let mut xm = x.clone();
                    xp[ax] += h;
                    xm[ax] -= h;
                    let gp = m.eval(&Points::new(dim, xp).unwrap()).unwrap().forward(&m.coeffs).1[0];
                    let gm = m.eval(&Points::new(dim, xm).unwrap()).unwrap().forward(&m.coeffs).1[0];
                    let row = [(gp[0] - gm[0]) / (2.0 * h), (gp[1] - gm[1]) / (2.0 * h)];
                    let an = if ax == 0 { [hs[0], hs[1]] } else { [hs[1], hs[2]] };
                    for j in 0..dim {
                        assert!((row[j] - an[j]).abs() <= 1e-5 * an[j].abs().max(1.0), "{row:?} vs {an:?}");
                    }
                }
                checked += 1;
            }
        }
    }

    /// Scalar test loss: sum_i a_i y_i + b_i . grad y_i
    fn probe_loss(m: &PolySplineModel, pts: &Points, a: &[f64], b: &DMatrix<f64>) -> f64 {
        let (y, g) = m.forward(pts).unwrap();
        let mut l = 0.0;
        for i in 0..pts.len() {
            l += a[i] * y[i];
            for ax in 0..m.dim() {
                l += b[(i, ax)] * g[(i, ax)];
            }
        }
        l
    }

    #[test]
    fn param_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for dim in [1, 2] {
            let m = random_model(&mut rng, dim, 4, 3, 2);
            let mut coords = Vec::new();
            while coords.len() < 30 * dim {
                let x: Vec<f64> = (0..dim).map(|_| rng.random_range(0.0..1.0)).collect();
                if far_from_knots(&m, &x, 1e-2) {
                    coords.extend(x);
                }
            }
            let pts = Points::new(dim, coords).unwrap();
            let a: Vec<f64> = (0..pts.len()).map(|_| rng.random_range(-1.0..1.0)).collect();
            let b = DMatrix::from_fn(pts.len(), dim, |_, _| rng.random_range(-1.0..1.0));
            let grad = m.param_gradient(&pts, &a, Some(&b)).unwrap();
            let p0 = m.params();
            let h = 1e-6;
            for k in 0..p0.len() {
                let mut mp = m.clone();
                let mut pp = p0.clone();
                pp[k] += h;
                mp.set_params(&pp).unwrap();
                let mut mm = m.clone();
                let mut pm = p0.clone();
                pm[k] -= h;
                mm.set_params(&pm).unwrap();
                let fd = (probe_loss(&mp, &pts, &a, &b) - probe_loss(&mm, &pts, &a, &b)) / (2.0 * h);
                assert!(
                    (fd - grad[k]).abs() <= 1e-4 * grad[k].abs().max(1e-3),
                    "dim {dim} param {k}: fd {fd} vs {}",
                    grad[k]
                );
            }
        }
    }

    #[test]
    fn single_cell_has_zero_gating_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let m = random_model(&mut rng, 1, 5, 1, 2);
        let xs: Vec<f64> = (0..20).map(|_| rng.random::<f64>()).collect();
        let dy: Vec<f64> = xs.iter().map(|x| x - 0.3).collect();
        let g = m.param_gradient(&Points::from_1d(&xs), &dy, None).unwrap();
        // knot logits come first; everything after is gating
        assert!(g[5..].iter().all(|&v| v == 0.0));
        // constant expert: the knots do not affect y either
        let mut c = m.clone();
        c.set_coeffs(&[1.0, 0.0, 0.0]).unwrap();
        let g = c.param_gradient(&Points::from_1d(&xs), &dy, None).unwrap();
        assert!(g.iter().all(|v| v.abs() < 1e-14));
    }

    #[test]
    fn model_is_continuous_across_knots() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let m = random_model(&mut rng, 1, 6, 3, 4);
        let t = m.knots[0].knots();
        for &tk in &t[1..t.len() - 1] {
            let (y, g) = m.forward(&Points::from_1d(&[tk - 1e-9, tk + 1e-9])).unwrap();
            let slope = g[(0, 0)].abs().max(g[(1, 0)].abs()).max(1.0);
            assert!((y[0] - y[1]).abs() <= 1e-7 * slope);
        }
    }

    #[test]
    fn params_round_trip_and_validate_lengths() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let mut m = random_model(&mut rng, 2, 3, 4, 1);
        assert_eq!(m.n_params(), 3 + 3 + 4 * 16);
        let p = m.params();
        m.set_params(&p).unwrap();
        assert_eq!(m.params(), p);
        assert!(m.set_params(&p[1..]).is_err());
        // a collapsed y-axis interval leaves the model untouched
        let mut bad = p.clone();
        bad[0] = 0.3;
        bad[3] = 800.0;
        assert!(m.set_params(&bad).is_err());
        assert_eq!(m.params(), p);
        assert!(m.set_coeffs(&[1.0]).is_err());
    }
}
