//! Post-hoc uncertainty calibration over precomputed logits.
//!
//! Given a classifier's logits and a scalar epistemic score `u(x)`, the crate
//! fits a temperature, a rejection threshold and a calibration map `τ_u`, then
//! produces `(c+1)`-class predictions two ways: reject-or-classify (RC) and the
//! unified extended softmax (U2C). It also measures err, ece and nll, splits
//! inputs into the four accept/reject regions, and checks the identities that
//! relate the two predictors on any dataset.

pub mod calibration;
pub mod cli;
pub mod data;
pub mod epistemic;
pub mod error;
pub mod metrics;
pub mod numeric;
pub mod predict;
pub mod regions;
pub mod synth;

pub use calibration::{fit_model, load_model, save_model, CalibratedModel, FitOptions};
pub use data::{Dataset, Record, Split};
pub use error::{Error, Result};
pub use predict::{ExtendedPrediction, ExtendedPredictor, Method, Region};
