//! Uniform entry point over the four regression estimators.

use std::fmt;
use std::str::FromStr;

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::error::{EhrError, Result};
use crate::gmm::{fit_ehr, fit_env_ls, FitOptions, FitResult};
use crate::robust::{huber_fit, ols_fit, select_k, Dataset, HuberSpec, IrlsOptions};
use crate::scalar::Real;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Estimator {
    /// Enveloped Huber regression.
    Ehr,
    /// Least-squares envelope GMM.
    Env,
    /// Huber regression.
    Hr,
    /// Ordinary least squares.
    Ls,
}

impl Estimator {
    pub const ALL: [Estimator; 4] = [Self::Ehr, Self::Env, Self::Hr, Self::Ls];

    pub fn name(&self) -> &'static str {
        match self {
            Self::Ehr => "ehr",
            Self::Env => "env",
            Self::Hr => "hr",
            Self::Ls => "ls",
        }
    }

    /// Whether the estimator has an envelope dimension.
    pub fn is_envelope(&self) -> bool {
        matches!(self, Self::Ehr | Self::Env)
    }

    /// Whether the estimator uses the Huber score (and hence a threshold).
    pub fn is_robust(&self) -> bool {
        matches!(self, Self::Ehr | Self::Hr)
    }

    /// Fits the estimator. Envelope estimators need `u`; the others ignore it.
    /// `opts.k` fixes the Huber threshold, otherwise the rule of thumb runs on
    /// `data`.
    pub fn fit<T: Real>(&self, data: &Dataset<T>, u: Option<usize>, opts: &FitOptions) -> Result<Estimate<T>> {
        let need_u = || u.ok_or_else(|| EhrError::InvalidArgument(format!("{self} needs an envelope dimension")));
        match self {
            Self::Ehr => Ok(Estimate::from_envelope(*self, fit_ehr(data, need_u()?, opts)?)),
            Self::Env => Ok(Estimate::from_envelope(*self, fit_env_ls(data, need_u()?, opts)?)),
            Self::Hr => {
                let k = match opts.k {
                    Some(k) => T::lit(k),
                    None => select_k(data)?.spec.k,
                };
                let fit = huber_fit(data, HuberSpec::new(k)?, IrlsOptions::huber())?;
                Ok(Estimate {
                    estimator: *self,
                    mu: fit.mu,
                    beta: fit.beta,
                    u: None,
                    k: Some(k),
                    envelope: None,
                })
            }
            Self::Ls => {
                let fit = ols_fit(data)?;
                Ok(Estimate {
                    estimator: *self,
                    mu: fit.mu,
                    beta: fit.beta,
                    u: None,
                    k: None,
                    envelope: None,
                })
            }
        }
    }
}

impl fmt::Display for Estimator {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Estimator {
    type Err = EhrError;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|e| e.name().eq_ignore_ascii_case(s.trim()))
            .ok_or_else(|| EhrError::InvalidArgument(format!("unknown estimator '{s}' (expected ehr, env, hr or ls)")))
    }
}

/// Coefficients from any estimator, with the envelope fit when there is one.
#[derive(Debug, Clone)]
pub struct Estimate<T: Real> {
    pub estimator: Estimator,
    pub mu: T,
    pub beta: DVector<T>,
    pub u: Option<usize>,
    pub k: Option<T>,
    pub envelope: Option<Box<FitResult<T>>>,
}

impl<T: Real> Estimate<T> {
    fn from_envelope(estimator: Estimator, fit: FitResult<T>) -> Self {
        Self {
            estimator,
            mu: fit.mu(),
            beta: fit.beta().clone(),
            u: Some(fit.u),
            k: fit.k,
            envelope: Some(Box::new(fit)),
        }
    }

    /// Prediction residuals `y − μ − Xβ` on `data`.
    pub fn residuals(&self, data: &Dataset<T>) -> DVector<T> {
        data.residuals(self.mu, &self.beta)
    }
}
