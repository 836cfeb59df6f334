//! Model-based shift-share instrumental-variable analysis.
//!
//! The crate covers the full chain from origin–destination flow panels to
//! policy counterfactuals: panel ingestion and validation, a structural
//! location-choice simulator, fixed-effects estimation of the log-odds
//! migration equation, Bartik instrument construction, 2SLS with
//! weak-instrument diagnostics, event-study dynamics, decomposition
//! diagnostics and tax-equalisation counterfactuals.

pub mod choice;
pub mod counterfactual;
pub mod diagnostics;
pub mod dynamics;
pub mod error;
pub mod fe;
pub mod frame;
pub mod geo;
pub mod instruments;
pub mod iv;
pub mod linalg;
pub mod montecarlo;
pub mod output;
pub mod panel;
pub mod regression;
pub mod rng;
pub mod simulator;
pub mod vce;
pub mod weakiv;
pub mod workflow;

pub use error::{Error, Result};
