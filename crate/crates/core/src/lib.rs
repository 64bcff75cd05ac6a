pub mod basis;
pub mod check;
pub mod checkpoint;
pub mod error;
pub mod experiment;
pub mod gating;
pub mod geometry;
pub mod knots;
pub mod linalg;
pub mod model;
pub mod oracles;
pub mod problems;
pub mod quadrature;
pub mod training;

pub use error::{Error, Result};
