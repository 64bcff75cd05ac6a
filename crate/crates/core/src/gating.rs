//! Convex-combination gating of spline basis functions into POU cells.
//!
//! Gating weights are parameterized by logits through a softmax taken down
//! each column, so `W[alpha, gamma] >= 0` and every column sums to one for
//! any logit values. Cells `phi_alpha = sum_gamma W[alpha, gamma] phi_gamma`
//! then inherit the partition-of-unity property of the hats.

use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{ensure_finite, Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum GatingInit {
    /// i.i.d. Gaussian logits.
    Random { std: f64 },
    /// Contiguous spline blocks assigned to each cell, plus Gaussian noise.
    Banded { strength: f64, noise: f64 },
}

impl Default for GatingInit {
    fn default() -> Self {
        GatingInit::Random { std: 0.5 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GatingWeights {
    logits: DMatrix<f64>,
    weights: DMatrix<f64>,
}

fn column_softmax(logits: &DMatrix<f64>) -> DMatrix<f64> {
    let mut w = logits.clone();
    for mut col in w.column_iter_mut() {
        let max = col.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        col.apply(|v| *v = (*v - max).exp());
        let total = col.sum();
        col /= total;
    }
    w
}

impl GatingWeights {
    pub fn from_logits(logits: DMatrix<f64>) -> Result<Self> {
        if logits.nrows() == 0 || logits.ncols() == 0 {
            return Err(Error::InvalidInput("gating needs at least one cell and one spline".into()));
        }
        ensure_finite(logits.as_slice(), "gating logits")?;
        let weights = column_softmax(&logits);
        Ok(Self { logits, weights })
    }

    /// `n_cells x n_splines` gating with the given initialization.
    ///
    /// For `Banded` in 2D (`grid = Some((nx, ny))` splines per axis with a
    /// square cell count), cells own rectangular blocks of the spline grid;
    /// otherwise blocks are contiguous in the flattened spline index.
    pub fn init<R: Rng + ?Sized>(
        n_cells: usize,
        n_splines: usize,
        grid: Option<(usize, usize)>,
        init: GatingInit,
        rng: &mut R,
    ) -> Result<Self> {
        let mut logits = DMatrix::zeros(n_cells, n_splines);
        let noise = match init {
            GatingInit::Random { std } => std,
            GatingInit::Banded { noise, .. } => noise,
        };
        if noise > 0.0 {
            let normal = Normal::new(0.0, noise).map_err(|e| Error::InvalidInput(e.to_string()))?;
            for v in logits.iter_mut() {
                *v = normal.sample(rng);
            }
        }
        if let GatingInit::Banded { strength, .. } = init {
            let side = (n_cells as f64).sqrt().round() as usize;
            for gamma in 0..n_splines {
                let alpha = match grid {
                    Some((nx, ny)) if side * side == n_cells => {
                        let (i, j) = (gamma / ny, gamma % ny);
                        (i * side / nx) * side + j * side / ny
                    }
                    _ => gamma * n_cells / n_splines,
                };
                logits[(alpha, gamma)] += strength;
            }
        }
        Self::from_logits(logits)
    }

    /// Identity gating `W = delta` approximated with a large logit margin.
    pub fn near_identity(n: usize, margin: f64) -> Result<Self> {
        Self::from_logits(DMatrix::from_fn(n, n, |a, g| if a == g { margin } else { 0.0 }))
    }

    pub fn n_cells(&self) -> usize {
        self.logits.nrows()
    }

    pub fn n_splines(&self) -> usize {
        self.logits.ncols()
    }

    pub fn logits(&self) -> &DMatrix<f64> {
        &self.logits
    }

    pub fn weights(&self) -> &DMatrix<f64> {
        &self.weights
    }

    /// Row-major logits.
    pub fn logits_row_major(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.logits.len());
        for r in 0..self.logits.nrows() {
            out.extend(self.logits.row(r).iter());
        }
        out
    }

    pub fn set_logits_row_major(&mut self, values: &[f64]) -> Result<()> {
        if values.len() != self.logits.len() {
            return Err(Error::DimensionMismatch(format!(
                "expected {} gating logits, got {}",
                self.logits.len(),
                values.len()
            )));
        }
        let logits = DMatrix::from_row_slice(self.n_cells(), self.n_splines(), values);
        *self = Self::from_logits(logits)?;
        Ok(())
    }

    /// Pull `dL/dW` back through the column softmax to `dL/dlogits`.
    pub fn backward(&self, grad_weights: &DMatrix<f64>) -> DMatrix<f64> {
        let w = &self.weights;
        let mut out = DMatrix::zeros(w.nrows(), w.ncols());
        for g in 0..w.ncols() {
            let inner: f64 = (0..w.nrows()).map(|a| w[(a, g)] * grad_weights[(a, g)]).sum();
            for a in 0..w.nrows() {
                out[(a, g)] = w[(a, g)] * (grad_weights[(a, g)] - inner);
            }
        }
        out
    }
}

/// POU cell values `phi_alpha(x) = sum_gamma W[alpha, gamma] phi_gamma(x)`,
/// shape `n x n_cells`.
pub fn pou_values(gating: &GatingWeights, spline_values: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    if spline_values.ncols() != gating.n_splines() {
        return Err(Error::DimensionMismatch(format!(
            "{} spline columns for gating over {} splines",
            spline_values.ncols(),
            gating.n_splines()
        )));
    }
    Ok(spline_values * gating.weights().transpose())
}

/// Gradient w.r.t. gating logits of `sum_{i, alpha} upstream[i, alpha] * pou[i, alpha]`.
pub fn gating_gradient(
    gating: &GatingWeights,
    spline_values: &DMatrix<f64>,
    upstream: &DMatrix<f64>,
) -> Result<DMatrix<f64>> {
    if upstream.nrows() != spline_values.nrows() || upstream.ncols() != gating.n_cells() {
        return Err(Error::DimensionMismatch("upstream shape does not match POU values".into()));
    }
    if spline_values.ncols() != gating.n_splines() {
        return Err(Error::DimensionMismatch("spline columns do not match gating".into()));
    }
    let grad_w = upstream.transpose() * spline_values;
    Ok(gating.backward(&grad_w))
}
