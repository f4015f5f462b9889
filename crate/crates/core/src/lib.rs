//! Enveloped Huber regression: a robust, envelope-reduced linear regression
//! fitted by two-step GMM over a Grassmann chart.
//!
//! The numerical core is generic over [`Real`] (`f32` or `f64`); the aliases
//! below pin the common types to one precision.

pub mod asymptotics;
pub mod envelope;
pub mod error;
pub mod estimator;
pub mod gmm;
pub mod linalg;
pub mod robust;
pub mod scalar;
pub mod selection;
pub mod sim;

pub use error::{EhrError, Result};
pub use estimator::Estimator;
pub use scalar::Real;

pub type Dataset64 = robust::Dataset<f64>;
pub type Dataset32 = robust::Dataset<f32>;
pub type FitResult64 = gmm::FitResult<f64>;
pub type FitResult32 = gmm::FitResult<f32>;
pub type Estimate64 = estimator::Estimate<f64>;
pub type Estimate32 = estimator::Estimate<f32>;
pub type EnvelopeParams64 = envelope::EnvelopeParams<f64>;
pub type EnvelopeParams32 = envelope::EnvelopeParams<f32>;
pub type NaturalParams64 = envelope::NaturalParams<f64>;
pub type NaturalParams32 = envelope::NaturalParams<f32>;
pub type CvReport64 = selection::CvReport<f64>;
pub type BootstrapReport64 = selection::BootstrapReport<f64>;
