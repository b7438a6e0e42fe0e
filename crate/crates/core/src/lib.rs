//! Neural surrogates of dynamical systems and their transfer to related systems
//! with little data, via Subset Extended Kalman Filter or gradient finetuning.

pub mod datasets;
pub mod error;
pub mod experiments;
pub mod gradient;
pub mod metrics;
pub mod nn;
pub mod node;
pub mod predictor;
pub mod sekf;
pub mod stats;
pub mod systems;

pub use error::{Error, Result};
pub use nn::{NetworkSpec, ParamVector};
