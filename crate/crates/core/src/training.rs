//! Least-squares gradient descent (LSGD).
//!
//! The expert coefficients `c` enter the model linearly, so for fixed knots
//! and gating they are obtained by a regularized least-squares solve
//! (regression) or a symmetric linear solve of the weak form (variational).
//! The remaining parameters (knot and gating logits) are trained by Adam.
//!
//! In layer mode the solve is part of every loss evaluation and the gradient
//! includes the sensitivity of `c` to the logits, obtained by the implicit
//! function theorem on the regularized normal equations. In callback mode
//! the gradient is taken at fixed `c` and `c` is re-solved after each step.

use std::path::Path;
use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::Points;
use crate::linalg::{least_squares, solve_symmetric, SpdSolver, ILL_CONDITIONED};
use crate::model::{GradAccumulator, PolySplineModel};
use crate::problems::{assemble, l2_error, Dataset, Problem, VariationalProblem};

/// Least-squares regularizer used by callback-mode regression runs.
pub const CALLBACK_REGULARIZER: f64 = 1e-14;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum LsgdMode {
    #[default]
    Layer,
    Callback,
}

impl std::str::FromStr for LsgdMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "layer" => Ok(LsgdMode::Layer),
            "callback" => Ok(LsgdMode::Callback),
            other => Err(Error::InvalidSpec(format!("unknown LSGD mode '{other}'"))),
        }
    }
}

impl std::fmt::Display for LsgdMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            LsgdMode::Layer => "layer",
            LsgdMode::Callback => "callback",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// Partial Adam settings; missing fields keep their current value.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamConfigPatch {
    pub beta1: Option<f64>,
    pub beta2: Option<f64>,
    pub eps: Option<f64>,
}

impl AdamConfigPatch {
    pub fn apply(&self, base: AdamConfig) -> AdamConfig {
        AdamConfig {
            beta1: self.beta1.unwrap_or(base.beta1),
            beta2: self.beta2.unwrap_or(base.beta2),
            eps: self.eps.unwrap_or(base.eps),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    /// `(first epoch, rate)` pairs; the rate of an epoch is that of the last
    /// entry starting at or before it.
    pub schedule: Vec<(usize, f64)>,
    pub ls_regularizer: f64,
    pub penalty: f64,
    pub mode: LsgdMode,
    pub seed: u64,
    pub adam: AdamConfig,
    /// Re-initialize the optimizer state every this many epochs.
    pub reset_every: Option<usize>,
    /// Mini-batch size for regression; `None` uses the full training set.
    pub batch_size: Option<usize>,
    /// Record a trace row every this many epochs (the final state is always
    /// recorded).
    pub log_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 500,
            schedule: vec![(0, 5e-3)],
            ls_regularizer: 1e-10,
            penalty: 1000.0,
            mode: LsgdMode::Layer,
            seed: 1234,
            adam: AdamConfig::default(),
            reset_every: None,
            batch_size: None,
            log_every: 1,
        }
    }
}

impl TrainConfig {
    /// Training settings used for each benchmark problem.
    pub fn for_problem(name: &str, degree: usize) -> Result<Self> {
        let base = Self::default();
        match name {
            "p1-sine" => Ok(base),
            "p2-kinks" => Ok(Self { ls_regularizer: 1e-12, ..base }),
            "p3-poisson1d" if degree == 0 => Ok(Self {
                epochs: 1000,
                schedule: vec![(0, 0.01), (500, 0.005)],
                ls_regularizer: 1e-8,
                ..base
            }),
            "p3-poisson1d" => Ok(Self { epochs: 100, schedule: vec![(0, 0.005)], ls_regularizer: 1e-8, ..base }),
            "p4-slit" => Ok(Self {
                epochs: 3000,
                schedule: vec![(0, 0.01), (1500, 0.005)],
                ls_regularizer: 1e-8,
                reset_every: Some(500),
                ..base
            }),
            other => Err(Error::InvalidSpec(format!("unknown problem '{other}'"))),
        }
    }

    /// Switch the LSGD mode. Callback-mode regression never differentiates
    /// through the solve, so it drops to the much smaller
    /// [`CALLBACK_REGULARIZER`]; variational problems keep their value.
    pub fn with_mode(mut self, name: &str, mode: LsgdMode) -> Self {
        self.mode = mode;
        if mode == LsgdMode::Callback && matches!(name, "p1-sine" | "p2-kinks") {
            self.ls_regularizer = self.ls_regularizer.min(CALLBACK_REGULARIZER);
        }
        self
    }

    /// Constant learning rate.
    pub fn with_rate(mut self, rate: f64) -> Self {
        self.schedule = vec![(0, rate)];
        self
    }

    /// Learning rate used at `epoch`.
    pub fn rate_at(&self, epoch: usize) -> f64 {
        let mut rate = self.schedule.first().map(|s| s.1).unwrap_or(0.0);
        for &(start, r) in &self.schedule {
            if start <= epoch {
                rate = r;
            }
        }
        rate
    }

    pub fn validate(&self) -> Result<()> {
        if self.schedule.is_empty() {
            return Err(Error::InvalidSpec("learning-rate schedule is empty".into()));
        }
        if self.schedule.iter().any(|&(_, r)| !(r > 0.0 && r.is_finite())) {
            return Err(Error::InvalidSpec("learning rates must be positive".into()));
        }
        if !(self.ls_regularizer >= 0.0 && self.ls_regularizer.is_finite()) {
            return Err(Error::InvalidSpec("least-squares regularizer must be >= 0".into()));
        }
        if !(self.penalty > 0.0 && self.penalty.is_finite()) {
            return Err(Error::InvalidSpec("penalty must be positive".into()));
        }
        if self.reset_every == Some(0) || self.batch_size == Some(0) || self.log_every == 0 {
            return Err(Error::InvalidSpec("reset period, batch size and log period must be positive".into()));
        }
        Ok(())
    }
}

/// Adam with bias correction.
#[derive(Debug, Clone)]
pub struct Adam {
    config: AdamConfig,
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl Adam {
    pub fn new(n: usize, config: AdamConfig) -> Self {
        Self { config, m: vec![0.0; n], v: vec![0.0; n], t: 0 }
    }

    pub fn reset(&mut self) {
        self.m.iter_mut().for_each(|x| *x = 0.0);
        self.v.iter_mut().for_each(|x| *x = 0.0);
        self.t = 0;
    }

    pub fn step(&mut self, params: &mut [f64], grad: &[f64], rate: f64) {
        let AdamConfig { beta1, beta2, eps } = self.config;
        self.t += 1;
        let c1 = 1.0 - beta1.powi(self.t);
        let c2 = 1.0 - beta2.powi(self.t);
        for i in 0..params.len() {
            self.m[i] = beta1 * self.m[i] + (1.0 - beta1) * grad[i];
            self.v[i] = beta2 * self.v[i] + (1.0 - beta2) * grad[i] * grad[i];
            let mh = self.m[i] / c1;
            let vh = self.v[i] / c2;
            params[i] -= rate * mh / (vh.sqrt() + eps);
        }
    }
}

/// Loss, gradient over the trainable logits and the coefficients it was
/// evaluated with.
#[derive(Debug, Clone)]
pub struct LossValue {
    pub loss: f64,
    pub grad: Vec<f64>,
    pub coeffs: Vec<f64>,
    /// Condition estimate of the solve (NaN if none happened).
    pub condition: f64,
}

/// `c = argmin |y - Phi c|^2 + lambda |c|^2`.
pub fn lsgd_solve_regression(phi: &DMatrix<f64>, y: &[f64], lambda: f64) -> Result<Vec<f64>> {
    let (c, _) = least_squares(phi, &DVector::from_column_slice(y), lambda)?;
    Ok(c.iter().copied().collect())
}

/// `c` solving `(A + lambda I) c = b`.
pub fn lsgd_solve_variational(a: &DMatrix<f64>, b: &DVector<f64>, lambda: f64) -> Result<Vec<f64>> {
    let (c, _) = solve_symmetric(a, b, lambda)?;
    Ok(c.iter().copied().collect())
}

/// `dL/dPhi` as a sum of rank-one terms `a b^T` (`a` per point, `b` per
/// coefficient).
#[derive(Debug, Clone)]
pub struct Sensitivity {
    pub terms: Vec<(Vec<f64>, Vec<f64>)>,
}

impl Sensitivity {
    pub fn to_dense(&self, n: usize, k: usize) -> DMatrix<f64> {
        let mut out = DMatrix::zeros(n, k);
        for (a, b) in &self.terms {
            for i in 0..n {
                for j in 0..k {
                    out[(i, j)] += a[i] * b[j];
                }
            }
        }
        out
    }
}

/// Sensitivity of `L = |Phi c(Phi) - y|^2 / n` to `Phi`, with
/// `c(Phi) = (Phi^T Phi + lambda I)^{-1} Phi^T y`.
///
/// With `r = y - Phi c`, `g = (2/n) Phi^T (Phi c - y)` and `v = G^{-1} g`:
///
/// ```text
/// dL/dPhi = (2/n) (Phi c - y) c^T + r v^T - (Phi v) c^T
/// ```
///
/// The first term holds `c` fixed; the other two come from differentiating
/// the normal equations.
pub fn ls_sensitivity(phi: &DMatrix<f64>, y: &[f64], c: &[f64], solver: &SpdSolver) -> Sensitivity {
    let n = phi.nrows();
    let cv = DVector::from_column_slice(c);
    let yv = DVector::from_column_slice(y);
    let pred = phi * &cv;
    let r = &yv - &pred;
    let scale = 2.0 / n as f64;
    let g = phi.tr_mul(&r) * (-scale);
    let v = solver.solve(&g);
    let pv = phi * &v;
    let fixed: Vec<f64> = r.iter().map(|ri| -scale * ri).collect();
    let mut terms = vec![(fixed, c.to_vec())];
    terms.push((r.iter().copied().collect(), v.iter().copied().collect()));
    terms.push((pv.iter().map(|x| -x).collect(), c.to_vec()));
    Sensitivity { terms }
}

fn check_finite(values: &[f64], stage: &'static str, epoch: usize) -> Result<()> {
    if values.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite { stage, epoch })
    }
}

/// Mean squared error on a dataset with the stored coefficients.
pub fn dataset_mse(model: &PolySplineModel, data: &Dataset) -> Result<f64> {
    let (y, _) = model.forward(&data.points)?;
    Ok(y.iter().zip(&data.targets).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / data.len().max(1) as f64)
}

/// Solve for `c` on a dataset and store it in the model.
pub fn solve_regression_coeffs(model: &mut PolySplineModel, data: &Dataset, lambda: f64) -> Result<f64> {
    let phi = model.feature_map(&data.points)?.values;
    let (c, solver) = least_squares(&phi, &DVector::from_column_slice(&data.targets), lambda)?;
    model.set_coeffs(c.as_slice())?;
    Ok(solver.condition)
}

/// Solve the weak form for `c` and store it in the model.
pub fn solve_variational_coeffs(model: &mut PolySplineModel, problem: &VariationalProblem, lambda: f64) -> Result<f64> {
    let sys = assemble(model, problem)?;
    let (c, solver) = solve_symmetric(&sys.a, &sys.b, lambda)?;
    model.set_coeffs(c.as_slice())?;
    Ok(solver.condition)
}

/// Training MSE and its gradient over the logits.
pub fn regression_objective(model: &PolySplineModel, data: &Dataset, lambda: f64, mode: LsgdMode) -> Result<LossValue> {
    let ev = model.eval(&data.points)?;
    let n = data.len();
    let phi = ev.features().values;
    let (coeffs, sens, condition) = match mode {
        LsgdMode::Layer => {
            let (c, solver) = least_squares(&phi, &DVector::from_column_slice(&data.targets), lambda)?;
            let c: Vec<f64> = c.iter().copied().collect();
            let s = ls_sensitivity(&phi, &data.targets, &c, &solver);
            (c, s, solver.condition)
        }
        LsgdMode::Callback => {
            let c = model.coeffs.clone();
            let pred = &phi * DVector::from_column_slice(&c);
            let a: Vec<f64> = (0..n).map(|i| 2.0 / n as f64 * (pred[i] - data.targets[i])).collect();
            (c.clone(), Sensitivity { terms: vec![(a, c)] }, f64::NAN)
        }
    };
    let pred = &phi * DVector::from_column_slice(&coeffs);
    let loss = (0..n).map(|i| (pred[i] - data.targets[i]).powi(2)).sum::<f64>() / n as f64;
    let mut acc = GradAccumulator::new(model);
    let zeros = vec![[0.0; 2]; n];
    for (a, b) in &sens.terms {
        ev.backward(b, a, &zeros, &mut acc);
    }
    Ok(LossValue { loss, grad: acc.finish(model), coeffs, condition })
}

/// Ritz energy and its gradient over the logits, including the motion of
/// quadrature nodes with the knots.
///
/// Layer mode adds the implicit-function correction through
/// `z = v^T Phi`, `v = (A + lambda I)^{-1} (A c - b)`: the gradient is that of
/// `sum w Q` with `c` and `v` frozen, where
///
/// ```text
/// Q = 1/2 grad u^T M grad u + 1/2 kappa u^2 - s u + r - grad z^T M grad u - kappa z u + s z
/// ```
pub fn variational_objective(
    model: &PolySplineModel,
    problem: &VariationalProblem,
    lambda: f64,
    mode: LsgdMode,
) -> Result<LossValue> {
    let sys = assemble(model, problem)?;
    let (c, v, condition) = match mode {
        LsgdMode::Layer => {
            let (c, solver) = solve_symmetric(&sys.a, &sys.b, lambda)?;
            let resid = &sys.a * &c - &sys.b;
            let v = solver.solve(&resid);
            (c, v, solver.condition)
        }
        LsgdMode::Callback => {
            let c = DVector::from_column_slice(&model.coeffs);
            (c, DVector::zeros(model.n_coeffs()), f64::NAN)
        }
    };
    let loss = sys.energy(&c);
    let cs = c.as_slice();
    let vs = v.as_slice();
    let use_v = v.iter().any(|x| *x != 0.0);
    let knots = model.knot_vectors();
    let mut acc = GradAccumulator::new(model);
    for term in problem.terms(model)? {
        let n = term.rule.len();
        let ev = model.eval(&term.rule.points)?;
        let (u, gu) = ev.forward(cs);
        let hu = ev.hessian(cs);
        let (z, gz, hz) = if use_v {
            let (z, gz) = ev.forward(vs);
            (z, gz, ev.hessian(vs))
        } else {
            (vec![0.0; n], vec![[0.0; 2]; n], vec![[0.0; 3]; n])
        };
        let m = term.metric;
        let k = term.kappa;
        let mut su = vec![0.0; n];
        let mut sgu = vec![[0.0; 2]; n];
        let mut sz = vec![0.0; n];
        let mut sgz = vec![[0.0; 2]; n];
        let mut gx = vec![[0.0; 2]; n];
        let mut gw = vec![0.0; n];
        for i in 0..n {
            let w = term.rule.weights[i];
            let d = term.data[i];
            let du = k * u[i] - d.s - k * z[i];
            let dgu = [m[0] * (gu[i][0] - gz[i][0]), m[1] * (gu[i][1] - gz[i][1])];
            let dz = -k * u[i] + d.s;
            let dgz = [-m[0] * gu[i][0], -m[1] * gu[i][1]];
            su[i] = w * du;
            sgu[i] = [w * dgu[0], w * dgu[1]];
            sz[i] = w * dz;
            sgz[i] = [w * dgz[0], w * dgz[1]];
            let h = |hh: &[f64; 3], a: usize, b: usize| match (a, b) {
                (0, 0) => hh[0],
                (1, 1) => hh[2],
                _ => hh[1],
            };
            for a in 0..model.dim() {
                let mut g = du * gu[i][a] + dz * gz[i][a] - d.ds[a] * (u[i] - z[i]) + d.dr[a];
                for b in 0..model.dim() {
                    g += dgu[b] * h(&hu[i], b, a) + dgz[b] * h(&hz[i], b, a);
                }
                gx[i][a] = w * g;
            }
            gw[i] = 0.5 * (m[0] * gu[i][0] * gu[i][0] + m[1] * gu[i][1] * gu[i][1])
                + 0.5 * k * u[i] * u[i]
                - d.s * u[i]
                + d.r
                - (m[0] * gz[i][0] * gu[i][0] + m[1] * gz[i][1] * gu[i][1])
                - k * z[i] * u[i]
                + d.s * z[i];
        }
        ev.backward(cs, &su, &sgu, &mut acc);
        if use_v {
            ev.backward(vs, &sz, &sgz, &mut acc);
        }
        term.rule.position_backward(&knots, &gx, &gw, &mut acc);
    }
    Ok(LossValue { loss, grad: acc.finish(model), coeffs: cs.to_vec(), condition })
}

/// One row of a training trace.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct TraceRow {
    pub epoch: usize,
    pub loss: f64,
    /// Validation MSE for regression, Ritz energy for variational problems.
    pub mse_or_energy: f64,
    /// L2 error against the exact solution (variational problems only).
    pub l2_error: Option<f64>,
    pub wall_time_ms: f64,
}

#[derive(Debug, Clone, Default)]
pub struct Trace {
    pub rows: Vec<TraceRow>,
    /// `key=value` settings written as a comment line above the CSV header.
    pub header: String,
}

impl Trace {
    pub fn last(&self) -> Option<&TraceRow> {
        self.rows.last()
    }

    /// CSV with columns `epoch,loss,mse_or_energy,l2_error,wall_time_ms`,
    /// preceded by one `#` comment line with the optimizer settings.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut text = format!("# {}\n", self.header);
        let mut w = csv::Writer::from_writer(Vec::new());
        for row in &self.rows {
            w.serialize(row)?;
        }
        let body = w.into_inner().map_err(|e| Error::Io(e.into_error()))?;
        text.push_str(&String::from_utf8_lossy(&body));
        std::fs::write(path, text)?;
        Ok(())
    }
}

/// Result of a training run.
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub trace: Trace,
    pub warnings: Vec<String>,
}

fn metrics(model: &PolySplineModel, problem: &Problem, loss: f64) -> Result<(f64, Option<f64>)> {
    match problem {
        Problem::Regression(p) => Ok((dataset_mse(model, &p.validation)?, None)),
        Problem::Variational(p) => {
            let err = l2_error(model, &|x| p.exact(x), p.q_extra)?;
            Ok((loss, Some(err)))
        }
    }
}

fn subset(data: &Dataset, idx: &[usize]) -> Dataset {
    let dim = data.points.dim();
    let mut coords = Vec::with_capacity(idx.len() * dim);
    let mut targets = Vec::with_capacity(idx.len());
    for &i in idx {
        coords.extend_from_slice(data.points.get(i));
        targets.push(data.targets[i]);
    }
    Dataset { points: Points::new(dim, coords).expect("subset of valid points"), targets }
}

/// Train the model's logits with Adam and LSGD, leaving the final solved
/// coefficients in the model.
pub fn train(model: &mut PolySplineModel, problem: &Problem, config: &TrainConfig) -> Result<TrainOutcome> {
    config.validate()?;
    if model.dim() != problem.dim() {
        return Err(Error::DimensionMismatch(format!(
            "{} needs a {}-d model",
            problem.name(),
            problem.dim()
        )));
    }
    let variational = match problem {
        Problem::Variational(p) => Some(VariationalProblem { beta: config.penalty, ..p.clone() }),
        Problem::Regression(_) => None,
    };
    let problem = match &variational {
        Some(v) => Problem::Variational(v.clone()),
        None => problem.clone(),
    };
    let lambda = config.ls_regularizer;
    let mut warnings: Vec<String> = Vec::new();
    let warn_condition = |cond: f64, epoch: usize, warnings: &mut Vec<String>| {
        if cond > ILL_CONDITIONED && warnings.is_empty() {
            let msg = format!("ill-conditioned least-squares system (condition ~{cond:.1e}) at epoch {epoch}");
            log::warn!("{msg}");
            warnings.push(msg);
        }
    };
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let solve = |model: &mut PolySplineModel| -> Result<f64> {
        match &problem {
            Problem::Regression(p) => solve_regression_coeffs(model, &p.train, lambda),
            Problem::Variational(p) => solve_variational_coeffs(model, p, lambda),
        }
    };
    let objective = |model: &PolySplineModel, rng: &mut ChaCha8Rng| -> Result<LossValue> {
        match &problem {
            Problem::Regression(p) => match config.batch_size {
                Some(b) if b < p.train.len() => {
                    let idx = sample(rng, p.train.len(), b).into_vec();
                    regression_objective(model, &subset(&p.train, &idx), lambda, config.mode)
                }
                _ => regression_objective(model, &p.train, lambda, config.mode),
            },
            Problem::Variational(p) => variational_objective(model, p, lambda, config.mode),
        }
    };

    let start = Instant::now();
    let cond = solve(model)?;
    check_finite(&model.coeffs, "least-squares solve", 0)?;
    warn_condition(cond, 0, &mut warnings);
    let mut adam = Adam::new(model.n_params(), config.adam);
    let mut trace = Trace {
        rows: Vec::with_capacity(config.epochs / config.log_every + 2),
        header: format!(
            "problem={} mode={} lambda={:e} penalty={:e} adam_beta1={} adam_beta2={} adam_eps={:e} seed={}",
            problem.name(),
            config.mode,
            lambda,
            config.penalty,
            config.adam.beta1,
            config.adam.beta2,
            config.adam.eps,
            config.seed
        ),
    };
    for epoch in 0..config.epochs {
        if let Some(period) = config.reset_every {
            if epoch > 0 && epoch % period == 0 {
                adam.reset();
            }
        }
        let lv = objective(model, &mut rng)?;
        if !lv.loss.is_finite() {
            return Err(Error::NonFinite { stage: "loss", epoch });
        }
        check_finite(&lv.grad, "gradient", epoch)?;
        if config.mode == LsgdMode::Layer {
            model.set_coeffs(&lv.coeffs)?;
            warn_condition(lv.condition, epoch, &mut warnings);
        }
        if epoch % config.log_every == 0 {
            let (metric, l2) = metrics(model, &problem, lv.loss)?;
            trace.rows.push(TraceRow {
                epoch,
                loss: lv.loss,
                mse_or_energy: metric,
                l2_error: l2,
                wall_time_ms: start.elapsed().as_secs_f64() * 1e3,
            });
        }
        let mut params = model.params();
        adam.step(&mut params, &lv.grad, config.rate_at(epoch));
        check_finite(&params, "optimizer step", epoch)?;
        model.set_params(&params)?;
        if config.mode == LsgdMode::Callback {
            let cond = solve(model)?;
            check_finite(&model.coeffs, "least-squares solve", epoch)?;
            warn_condition(cond, epoch, &mut warnings);
        }
        debug_assert!(model.gating.weights().column_iter().all(|c| (c.sum() - 1.0).abs() < 1e-12));
    }
    // land on the least-squares manifold for the final logits
    let cond = solve(model)?;
    check_finite(&model.coeffs, "least-squares solve", config.epochs)?;
    warn_condition(cond, config.epochs, &mut warnings);
    let loss = match &problem {
        Problem::Regression(p) => dataset_mse(model, &p.train)?,
        Problem::Variational(p) => {
            let sys = assemble(model, p)?;
            sys.energy(&DVector::from_column_slice(&model.coeffs))
        }
    };
    let (metric, l2) = metrics(model, &problem, loss)?;
    trace.rows.push(TraceRow {
        epoch: config.epochs,
        loss,
        mse_or_energy: metric,
        l2_error: l2,
        wall_time_ms: start.elapsed().as_secs_f64() * 1e3,
    });
    Ok(TrainOutcome { trace, warnings })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::basis::{coeffs_from_monomial, PolyKind};
    use crate::gating::GatingInit;
    use crate::model::ModelConfig;
    use crate::problems::{make_problem_1, VariationalProblem};
    use approx::assert_abs_diff_eq;
    use rand::Rng;

    fn random_model(rng: &mut ChaCha8Rng, dim: usize, n: usize, cells: usize, degree: usize) -> PolySplineModel {
        let mut cfg = ModelConfig::new(dim, n, cells, degree);
        cfg.knot_noise = 0.5;
        cfg.gating_init = GatingInit::Random { std: 1.0 };
        let mut m = PolySplineModel::new(&cfg, rng).unwrap();
        let c: Vec<f64> = (0..m.n_coeffs()).map(|_| rng.random_range(-1.0..1.0)).collect();
        m.set_coeffs(&c).unwrap();
        m
    }

    #[test]
    fn schedule_lookup() {
        let c = TrainConfig::for_problem("p3-poisson1d", 0).unwrap();
        assert_eq!(c.rate_at(0), 0.01);
        assert_eq!(c.rate_at(499), 0.01);
        assert_eq!(c.rate_at(500), 0.005);
        let c = TrainConfig::for_problem("p4-slit", 1).unwrap();
        assert_eq!(c.reset_every, Some(500));
        assert_eq!(c.epochs, 3000);
        assert!(TrainConfig { schedule: vec![(0, -1.0)], ..TrainConfig::default() }.validate().is_err());
    }

    #[test]
    fn adam_first_step_moves_by_rate() {
        let mut adam = Adam::new(2, AdamConfig::default());
        let mut p = vec![1.0, -1.0];
        adam.step(&mut p, &[3.0, -0.5], 0.1);
        assert_abs_diff_eq!(p[0], 0.9, epsilon = 1e-8);
        assert_abs_diff_eq!(p[1], -0.9, epsilon = 1e-8);
    }

    #[test]
    fn cubic_is_recovered_by_single_cell() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut m = PolySplineModel::new(&ModelConfig::new(1, 4, 1, 3), &mut rng).unwrap();
        let xs: Vec<f64> = (0..200).map(|_| rng.random::<f64>()).collect();
        let f = |x: f64| 1.0 - 2.0 * x + 0.5 * x * x + 3.0 * x * x * x;
        let data = Dataset { points: Points::from_1d(&xs), targets: xs.iter().map(|&x| f(x)).collect() };
        solve_regression_coeffs(&mut m, &data, 1e-10).unwrap();
        let expect = coeffs_from_monomial(PolyKind::Legendre, 3, &[1.0, -2.0, 0.5, 3.0]).unwrap();
        for (a, b) in m.coeffs.iter().zip(&expect) {
            assert_abs_diff_eq!(a, b, epsilon = 1e-9);
        }
    }

    #[test]
    fn scalar_sensitivity_matches_closed_form() {
        // one column: c = p.y / (p.p + lambda); L = |p c - y|^2 / n
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let n = 6;
        let lambda = 0.3;
        let p: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
        let y: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
        let loss = |p: &[f64]| {
            let pp: f64 = p.iter().map(|v| v * v).sum();
            let py: f64 = p.iter().zip(&y).map(|(a, b)| a * b).sum();
            let c = py / (pp + lambda);
            p.iter().zip(&y).map(|(a, b)| (a * c - b).powi(2)).sum::<f64>() / n as f64
        };
        let phi = DMatrix::from_column_slice(n, 1, &p);
        let (c, solver) = least_squares(&phi, &DVector::from_column_slice(&y), lambda).unwrap();
        let dense = ls_sensitivity(&phi, &y, c.as_slice(), &solver).to_dense(n, 1);
        let h = 1e-6;
        for i in 0..n {
            let mut pp = p.clone();
            pp[i] += h;
            let mut pm = p.clone();
            pm[i] -= h;
            let fd = (loss(&pp) - loss(&pm)) / (2.0 * h);
            assert_abs_diff_eq!(dense[(i, 0)], fd, epsilon = 1e-8);
        }
    }

    #[test]
    fn large_regularizer_pins_coefficients() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let m = random_model(&mut rng, 1, 5, 3, 2);
        let p = make_problem_1(7);
        let small = Dataset { points: Points::from_1d(&p.train.points.coords()[..50]), targets: p.train.targets[..50].to_vec() };
        let lv = regression_objective(&m, &small, 1e12, LsgdMode::Layer).unwrap();
        assert!(lv.coeffs.iter().all(|c| c.abs() < 1e-9));
        assert!(lv.grad.iter().all(|g| g.abs() < 1e-8));
    }

    fn regression_fd_check(mode: LsgdMode, lambda: f64) {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let p = make_problem_1(11);
        let data = Dataset { points: Points::from_1d(&p.train.points.coords()[..80]), targets: p.train.targets[..80].to_vec() };
        for _ in 0..3 {
            let m = random_model(&mut rng, 1, 5, 3, 2);
            let lv = regression_objective(&m, &data, lambda, mode).unwrap();
            let p0 = m.params();
            let h = 1e-6;
            for k in 0..p0.len() {
                let f = |delta: f64| {
                    let mut mm = m.clone();
                    let mut pp = p0.clone();
                    pp[k] += delta;
                    mm.set_params(&pp).unwrap();
                    regression_objective(&mm, &data, lambda, mode).unwrap().loss
                };
                let fd = (f(h) - f(-h)) / (2.0 * h);
                let scale = lv.grad[k].abs().max(1e-4);
                assert!((fd - lv.grad[k]).abs() <= 1e-4 * scale, "{mode} param {k}: fd {fd} vs {}", lv.grad[k]);
            }
        }
    }

    #[test]
    fn layer_regression_gradient_matches_finite_differences() {
        // a large regularizer makes the implicit term visible
        regression_fd_check(LsgdMode::Layer, 1e-2);
        regression_fd_check(LsgdMode::Layer, 1e-10);
    }

    #[test]
    fn callback_regression_gradient_matches_finite_differences() {
        regression_fd_check(LsgdMode::Callback, 1e-10);
    }

    fn variational_fd_check(problem: VariationalProblem, dim: usize, mode: LsgdMode, lambda: f64) {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..2 {
            let m = random_model(&mut rng, dim, 4, 3, 1);
            let lv = variational_objective(&m, &problem, lambda, mode).unwrap();
            let p0 = m.params();
            let h = 1e-6;
            for k in 0..p0.len() {
                let f = |delta: f64| {
                    let mut mm = m.clone();
                    let mut pp = p0.clone();
                    pp[k] += delta;
                    mm.set_params(&pp).unwrap();
                    variational_objective(&mm, &problem, lambda, mode).unwrap().loss
                };
                let fd = (f(h) - f(-h)) / (2.0 * h);
                let scale = lv.grad[k].abs().max(1e-3 * lv.loss.abs().max(1e-3));
                assert!(
                    (fd - lv.grad[k]).abs() <= 1e-4 * scale,
                    "{} {mode} param {k}: fd {fd} vs {}",
                    problem.name(),
                    lv.grad[k]
                );
            }
        }
    }

    #[test]
    fn variational_gradients_match_finite_differences() {
        variational_fd_check(VariationalProblem::poisson_1d(10.0), 1, LsgdMode::Layer, 1e-1);
        variational_fd_check(VariationalProblem::poisson_1d(10.0), 1, LsgdMode::Callback, 1e-8);
        variational_fd_check(VariationalProblem::slit(10.0), 2, LsgdMode::Layer, 1e-1);
        variational_fd_check(VariationalProblem::slit(10.0), 2, LsgdMode::Callback, 1e-8);
    }

    #[test]
    fn layer_mode_stays_on_manifold() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mut m = random_model(&mut rng, 1, 6, 3, 1);
        let problem = Problem::Regression(make_problem_1(3));
        let cfg = TrainConfig { epochs: 20, ..TrainConfig::default() };
        train(&mut m, &problem, &cfg).unwrap();
        let Problem::Regression(p) = &problem else { unreachable!() };
        let before = dataset_mse(&m, &p.train).unwrap();
        let mut again = m.clone();
        solve_regression_coeffs(&mut again, &p.train, cfg.ls_regularizer).unwrap();
        let after = dataset_mse(&again, &p.train).unwrap();
        assert!((before - after).abs() <= 1e-12 * before);
    }

    #[test]
    fn callback_solve_never_increases_regularized_loss() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let p = make_problem_1(5);
        let lambda = 1e-6;
        for _ in 0..10 {
            let mut m = random_model(&mut rng, 1, 6, 3, 2);
            let reg = |m: &PolySplineModel| {
                dataset_mse(m, &p.train).unwrap() * p.train.len() as f64
                    + lambda * m.coeffs.iter().map(|c| c * c).sum::<f64>()
            };
            let before = reg(&m);
            solve_regression_coeffs(&mut m, &p.train, lambda).unwrap();
            assert!(reg(&m) <= before * (1.0 + 1e-14));
        }
    }

    #[test]
    fn traces_are_deterministic() {
        let problem = Problem::Regression(make_problem_1(3));
        let cfg = TrainConfig { epochs: 15, ..TrainConfig::default() };
        let run = || {
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
            let mut m = PolySplineModel::new(&ModelConfig::new(1, 6, 3, 2), &mut rng).unwrap();
            let out = train(&mut m, &problem, &cfg).unwrap();
            (out.trace.rows.iter().map(|r| (r.loss, r.mse_or_energy)).collect::<Vec<_>>(), m.params(), m.coeffs)
        };
        let a = run();
        let b = run();
        assert_eq!(a.0.iter().map(|x| (x.0.to_bits(), x.1.to_bits())).collect::<Vec<_>>(), b.0.iter().map(|x| (x.0.to_bits(), x.1.to_bits())).collect::<Vec<_>>());
        assert_eq!(a.1, b.1);
        assert_eq!(a.2, b.2);
    }

    #[test]
    fn nan_target_aborts_with_stage() {
        let mut p = make_problem_1(3);
        p.train.targets[0] = f64::NAN;
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut m = PolySplineModel::new(&ModelConfig::new(1, 4, 2, 1), &mut rng).unwrap();
        let err = train(&mut m, &Problem::Regression(p), &TrainConfig { epochs: 3, ..TrainConfig::default() });
        assert!(matches!(err, Err(Error::NonFinite { .. }) | Err(Error::InvalidInput(_))), "{err:?}");
    }

    #[test]
    fn poisson_linear_experts_converge() {
        let mut rng = ChaCha8Rng::seed_from_u64(1234);
        let mut m = PolySplineModel::new(&ModelConfig::new(1, 5, 3, 1), &mut rng).unwrap();
        let problem = Problem::Variational(VariationalProblem::poisson_1d(1000.0));
        let cfg = TrainConfig::for_problem("p3-poisson1d", 1).unwrap();
        let out = train(&mut m, &problem, &cfg).unwrap();
        let last = out.trace.last().unwrap();
        assert!(last.l2_error.unwrap() <= 0.01, "{last:?}");
    }
}
