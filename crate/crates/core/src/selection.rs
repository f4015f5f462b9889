//! Cross-validated choice of the envelope dimension and pairs-bootstrap
//! standard deviations.
//!
//! Randomness comes from ChaCha20 seeded with a `u64`; independent tasks use
//! distinct stream numbers of the same seed (see [`seeded_stream`]). Fits run
//! in parallel on the ambient rayon pool and are reduced in index order, so
//! reports do not depend on the thread count.

use nalgebra::DVector;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::error::{EhrError, Result};
use crate::estimator::{Estimate, Estimator};
use crate::gmm::FitOptions;
use crate::robust::{huber_loss, select_k, Dataset};
use crate::scalar::Real;

/// Name recorded in reports for the generator behind [`seeded_stream`].
pub const RNG_NAME: &str = "ChaCha20 (rand_chacha 0.9), seed_from_u64 + set_stream";

/// Generator for task `stream` under `seed`.
pub fn seeded_stream(seed: u64, stream: u64) -> ChaCha20Rng {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Fold label of every row: a seeded shuffle dealt round-robin, so fold
/// sizes differ by at most one.
pub fn fold_assignment(n: usize, folds: usize, seed: u64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut seeded_stream(seed, 0));
    let mut label = vec![0; n];
    for (pos, &row) in order.iter().enumerate() {
        label[row] = pos % folds;
    }
    label
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct CvOptions {
    pub folds: usize,
    /// Largest `u` searched; `None` means `min(p, 6)`.
    pub max_u: Option<usize>,
    pub fit: FitOptions,
}

impl Default for CvOptions {
    fn default() -> Self {
        Self {
            folds: 5,
            max_u: None,
            fit: FitOptions::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CvEntry<T> {
    pub u: usize,
    /// `None` when a fold fit failed; such a `u` is not eligible.
    pub cv: Option<T>,
    pub failed_folds: Vec<usize>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CvReport<T> {
    pub estimator: Estimator,
    pub entries: Vec<CvEntry<T>>,
    pub u_hat: usize,
    pub folds: usize,
    pub seed: u64,
    pub rng: &'static str,
    /// Threshold of the held-out Huber loss; `None` means squared loss.
    pub loss_k: Option<T>,
}

impl<T: Real> CvReport<T> {
    pub fn cv(&self, u: usize) -> Option<T> {
        self.entries.iter().find(|e| e.u == u).and_then(|e| e.cv)
    }
}

/// Held-out criterion `(1/n) Σ_j Σ_{i ∈ S_j} ρ(y_i − μ̂⁽ʲ⁾ − x_iᵀβ̂⁽ʲ⁾)`.
/// `fit` sees each training set in fold order; the first failing fold
/// aborts with its index.
pub fn cv_criterion<T, F>(
    data: &Dataset<T>,
    labels: &[usize],
    folds: usize,
    loss: impl Fn(T) -> T,
    fit: F,
) -> std::result::Result<T, (usize, EhrError)>
where
    T: Real,
    F: Fn(&Dataset<T>) -> Result<(T, DVector<T>)> + Sync,
{
    let fits: Vec<_> = (0..folds)
        .into_par_iter()
        .map(|j| {
            let (train, _) = split(labels, j);
            data.subset(&train).and_then(|d| fit(&d))
        })
        .collect();
    let mut per_row = vec![T::zero(); data.n()];
    for (j, fitted) in fits.into_iter().enumerate() {
        let (mu, beta) = fitted.map_err(|e| (j, e))?;
        let (_, test) = split(labels, j);
        for &i in &test {
            per_row[i] = loss(data.y()[i] - mu - (data.x().row(i) * &beta)[0]);
        }
    }
    // row order keeps the sum independent of how folds are numbered
    let total = per_row.into_iter().fold(T::zero(), |a, v| a + v);
    Ok(total / T::from_usize_lossy(data.n()))
}

fn split(labels: &[usize], fold: usize) -> (Vec<usize>, Vec<usize>) {
    let (test, train): (Vec<usize>, Vec<usize>) = (0..labels.len()).partition(|&i| labels[i] == fold);
    (train, test)
}

/// K-fold cross-validation of the envelope dimension for an envelope
/// estimator. All `u` share one partition. Fold fits follow `opts.fit`
/// (the threshold is re-selected per training fold unless fixed); the
/// held-out loss is Huber at the full-sample threshold for EHR and
/// `r²/2` for the least-squares envelope.
pub fn cv_select_u<T: Real>(data: &Dataset<T>, estimator: Estimator, seed: u64, opts: &CvOptions) -> Result<CvReport<T>> {
    if !estimator.is_envelope() {
        return Err(EhrError::InvalidArgument(format!("{estimator} has no envelope dimension to select")));
    }
    let (n, p, folds) = (data.n(), data.p(), opts.folds);
    if folds < 2 || n < 2 * folds {
        return Err(EhrError::InvalidArgument(format!("need 2 <= K and n >= 2K (K = {folds}, n = {n})")));
    }
    let max_u = opts.max_u.unwrap_or(6).min(p).max(1);
    let loss_k = if estimator.is_robust() {
        Some(match opts.fit.k {
            Some(k) => T::lit(k),
            None => select_k(data)?.spec.k,
        })
    } else {
        None
    };
    let loss = |r: T| match loss_k {
        Some(k) => huber_loss(r, k),
        None => r * r * T::lit(0.5),
    };
    let labels = fold_assignment(n, folds, seed);
    let fold_opts = without_avar(&opts.fit);

    let entries: Vec<CvEntry<T>> = (1..=max_u)
        .map(|u| {
            let value = cv_criterion(data, &labels, folds, loss, |d| {
                estimator.fit(d, Some(u), &fold_opts).map(|e: Estimate<T>| (e.mu, e.beta))
            });
            match value {
                Ok(cv) => CvEntry {
                    u,
                    cv: Some(cv),
                    failed_folds: Vec::new(),
                    error: None,
                },
                Err((j, e)) => CvEntry {
                    u,
                    cv: None,
                    failed_folds: vec![j],
                    error: Some(e.to_string()),
                },
            }
        })
        .collect();
    let u_hat = entries
        .iter()
        .filter_map(|e| e.cv.map(|v| (e.u, v)))
        .fold(None, |best: Option<(usize, T)>, (u, v)| match best {
            Some((_, b)) if !(v < b) => best,
            _ => Some((u, v)),
        })
        .map(|(u, _)| u)
        .ok_or_else(|| EhrError::Numerical("every envelope dimension had a failed fold".into()))?;
    Ok(CvReport {
        estimator,
        entries,
        u_hat,
        folds,
        seed,
        rng: RNG_NAME,
        loss_k,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BootstrapReport<T> {
    pub estimator: Estimator,
    pub u: Option<usize>,
    /// Requested resamples.
    pub resamples: usize,
    pub failures: usize,
    /// More than 10% of the resample fits failed.
    pub flagged: bool,
    /// Standard deviation of each slope over the successful resamples
    /// (divisor: successes − 1).
    pub sd: Vec<T>,
    /// Slopes of each successful resample, in resample order.
    pub estimates: Vec<Vec<T>>,
    pub seed: u64,
    pub rng: &'static str,
}

/// Pairs bootstrap: `b` resamples of `n` rows with replacement, refit with
/// `u` held fixed. Resample `r` draws from stream `r + 1` of `seed`.
pub fn bootstrap_se<T: Real>(
    data: &Dataset<T>,
    estimator: Estimator,
    u: Option<usize>,
    b: usize,
    seed: u64,
    fit: &FitOptions,
) -> Result<BootstrapReport<T>> {
    if b < 2 {
        return Err(EhrError::InvalidArgument(format!("need at least 2 resamples, got {b}")));
    }
    if estimator.is_envelope() && u.is_none() {
        return Err(EhrError::InvalidArgument(format!("{estimator} needs an envelope dimension")));
    }
    let n = data.n();
    let fit = &without_avar(fit);
    let fits: Vec<Option<DVector<T>>> = (0..b)
        .into_par_iter()
        .map(|r| {
            let mut rng = seeded_stream(seed, r as u64 + 1);
            let rows: Vec<usize> = (0..n).map(|_| rng.random_range(0..n)).collect();
            data.subset(&rows)
                .and_then(|d| estimator.fit(&d, u, fit))
                .ok()
                .map(|e| e.beta)
        })
        .collect();
    let estimates: Vec<DVector<T>> = fits.into_iter().flatten().collect();
    let failures = b - estimates.len();
    if estimates.len() < 2 {
        return Err(EhrError::Numerical(format!("only {} of {b} resample fits succeeded", estimates.len())));
    }
    let m = T::from_usize_lossy(estimates.len());
    let mean = estimates.iter().fold(DVector::zeros(data.p()), |acc, e| acc + e) / m;
    let sd = (0..data.p())
        .map(|j| {
            let ss = estimates.iter().fold(T::zero(), |a, e| a + (e[j] - mean[j]) * (e[j] - mean[j]));
            (ss / (m - T::one())).sqrt()
        })
        .collect();
    Ok(BootstrapReport {
        estimator,
        u,
        resamples: b,
        failures,
        flagged: failures * 10 > b,
        sd,
        estimates: estimates.into_iter().map(|e| e.iter().copied().collect()).collect(),
        seed,
        rng: RNG_NAME,
    })
}

/// Refits only need coefficients; duplicated rows can make the sandwich
/// singular without affecting the fit itself.
fn without_avar(opts: &FitOptions) -> FitOptions {
    FitOptions {
        compute_avar: false,
        ..opts.clone()
    }
}

/// Per-coefficient `sd_reference / sd_target` and its average.
pub fn sd_ratios<T: Real>(reference: &BootstrapReport<T>, target: &BootstrapReport<T>) -> Result<(Vec<T>, T)> {
    if reference.sd.len() != target.sd.len() || target.sd.is_empty() {
        return Err(EhrError::Dimension("bootstrap reports cover different coefficients".into()));
    }
    let ratios: Vec<T> = reference.sd.iter().zip(&target.sd).map(|(&a, &b)| a / b).collect();
    let avg = ratios.iter().fold(T::zero(), |a, &r| a + r) / T::from_usize_lossy(ratios.len());
    Ok((ratios, avg))
}
