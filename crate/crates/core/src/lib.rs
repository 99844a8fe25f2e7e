//! Matrix Dyson equation toolkit: solver, density and edge extraction, stability analysis,
//! Gaussian ensembles with matching moments, and Monte Carlo spectral checks.

// NaN-rejecting guards are written as `!(x > y)` on purpose.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod error;
pub mod linalg;
pub mod mde;
pub mod model;
pub mod superop;
pub mod density;
pub mod stability;
pub mod ensemble;
pub mod lab;

pub use error::{MdeError, Result};
pub use linalg::{CMat, CVec, RMat, C64};
pub use mde::{MdeSolution, SolverOptions, SpectralPoint};
pub use model::ModelSpec;
pub use superop::{SelfEnergy, SymmetryClass};
pub use density::{Band, DensityCurve, DensityOptions, EdgeLocation, EdgeReport, Side};
pub use stability::{PolarData, SaturatedData, StabilityOptions, StabilityReport};
pub use ensemble::TrialBatch;
pub use lab::{EdgeStatSample, LocalLawReport};
