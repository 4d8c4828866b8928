//! Linear mixed-effects models for batch-processed proteomics data with a
//! batch-level abundance-dependent missing-data mechanism, fitted by ECM.

pub mod ecm;
mod engine;
pub mod error;
pub mod inference;
pub mod io;
pub mod linalg;
pub mod mechanism;
pub mod quadrature;
pub mod simulation;
pub mod types;

pub use ecm::{fit, FitConfig, FitResult, InitPolicy};
pub use error::{Error, Result};
pub use types::{
    BatchDesign, EStepMoments, FeatureBatchData, MechanismForm, MissingMechanism,
    ModelParameters,
};
