//! Missing-value imputation by transformed distribution matching.
//!
//! Missing entries and an invertible transform are optimised jointly so that
//! random minibatches, once mapped through the transform, have a small
//! squared 2-Wasserstein distance. Setting the transform to the identity
//! recovers the plain minibatch-OT imputer.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod data;
pub mod error;
pub mod imputer;
pub mod inn;
pub mod mask;
pub mod metrics;
pub mod optim;
pub mod ot;
pub mod rng;
pub mod synth;
pub mod theory;

pub use data::{Dataset, MissingMask, StandardizationParams};
pub use error::{Result, TdmError};
pub use imputer::{fit, fit_with, impute, impute_with, ImputeOutput, FitOutput, Mode, SolverChoice, TrainConfig};
pub use mask::{MaskSpec, Mechanism};
pub use metrics::MetricsReport;
pub use synth::SynthKind;
pub use theory::{CheckName, CheckReport};
