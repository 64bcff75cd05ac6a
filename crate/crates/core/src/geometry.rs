use crate::error::{Error, Result};

/// A batch of points in `d = 1` or `d = 2`, stored row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Points {
    dim: usize,
    coords: Vec<f64>,
}

impl Points {
    pub fn new(dim: usize, coords: Vec<f64>) -> Result<Self> {
        if !(dim == 1 || dim == 2) {
            return Err(Error::InvalidInput(format!("dimension {dim} not supported")));
        }
        if coords.len() % dim != 0 {
            return Err(Error::DimensionMismatch(format!(
                "{} coordinates do not split into points of dimension {dim}",
                coords.len()
            )));
        }
        Ok(Self { dim, coords })
    }

    pub fn from_1d(xs: &[f64]) -> Self {
        Self { dim: 1, coords: xs.to_vec() }
    }

    pub fn from_2d(xs: &[[f64; 2]]) -> Self {
        Self { dim: 2, coords: xs.iter().flat_map(|p| p.iter().copied()).collect() }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.coords.len() / self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.coords.is_empty()
    }

    pub fn get(&self, i: usize) -> &[f64] {
        &self.coords[i * self.dim..(i + 1) * self.dim]
    }

    pub fn coords(&self) -> &[f64] {
        &self.coords
    }

    pub fn axis(&self, axis: usize) -> Vec<f64> {
        self.coords.iter().skip(axis).step_by(self.dim).copied().collect()
    }

    /// Reject points outside the unit box `[0, 1]^d`.
    pub fn check_unit_box(&self) -> Result<()> {
        for (k, &v) in self.coords.iter().enumerate() {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::OutOfDomain { axis: k % self.dim, value: v, lo: 0.0, hi: 1.0 });
            }
        }
        Ok(())
    }
}
