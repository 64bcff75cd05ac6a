//! JSON checkpoints of a trained model.
//!
//! Floats are written with shortest round-trip formatting and parsed with
//! `float_roundtrip`, so save/load reproduces every parameter bit for bit.

use std::fs;
use std::path::Path;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::basis::{PolyBasis, PolyKind};
use crate::error::{Error, Result};
use crate::gating::GatingWeights;
use crate::knots::KnotLayer;
use crate::model::PolySplineModel;

pub const FORMAT: &str = "polyspline-model";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KnotRecord {
    pub lo: f64,
    pub hi: f64,
    pub logits: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub version: u32,
    pub dim: usize,
    pub degree: usize,
    pub basis: PolyKind,
    pub n_cells: usize,
    pub knots: Vec<KnotRecord>,
    /// `n_cells x n_splines` gating logits, row-major.
    pub gating_logits: Vec<f64>,
    pub coeffs: Vec<f64>,
}

impl Checkpoint {
    pub fn from_model(model: &PolySplineModel) -> Self {
        Self {
            format: FORMAT.to_string(),
            version: VERSION,
            dim: model.dim(),
            degree: model.poly.degree,
            basis: model.poly.kind,
            n_cells: model.n_cells(),
            knots: model.knots.iter().map(|k| KnotRecord { lo: k.lo, hi: k.hi, logits: k.logits.clone() }).collect(),
            gating_logits: model.gating.logits_row_major(),
            coeffs: model.coeffs.clone(),
        }
    }

    pub fn into_model(self) -> Result<PolySplineModel> {
        if self.format != FORMAT {
            return Err(Error::Checkpoint(format!("unexpected format '{}'", self.format)));
        }
        if self.version != VERSION {
            return Err(Error::Checkpoint(format!("unsupported version {}", self.version)));
        }
        if self.knots.len() != self.dim {
            return Err(Error::Checkpoint(format!("{} knot layers for dimension {}", self.knots.len(), self.dim)));
        }
        let knots = self
            .knots
            .into_iter()
            .map(|k| KnotLayer::from_logits(k.logits, k.lo, k.hi))
            .collect::<Result<Vec<_>>>()?;
        let n_splines: usize = knots.iter().map(|k| k.n_basis()).product();
        if self.n_cells == 0 || self.gating_logits.len() != self.n_cells * n_splines {
            return Err(Error::Checkpoint(format!(
                "{} gating logits for {} cells and {n_splines} splines",
                self.gating_logits.len(),
                self.n_cells
            )));
        }
        let gating = GatingWeights::from_logits(DMatrix::from_row_slice(self.n_cells, n_splines, &self.gating_logits))?;
        let poly = PolyBasis::new(self.degree, self.dim, self.basis)?;
        PolySplineModel::from_parts(knots, gating, poly, self.coeffs)
    }
}

pub fn to_json(model: &PolySplineModel) -> Result<String> {
    Ok(serde_json::to_string_pretty(&Checkpoint::from_model(model))?)
}

pub fn from_json(text: &str) -> Result<PolySplineModel> {
    serde_json::from_str::<Checkpoint>(text)?.into_model()
}

pub fn save(model: &PolySplineModel, path: &Path) -> Result<()> {
    fs::write(path, to_json(model)?)?;
    Ok(())
}

pub fn load(path: &Path) -> Result<PolySplineModel> {
    from_json(&fs::read_to_string(path)?)
}
