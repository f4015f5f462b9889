//! Huber loss and score, the baseline linear fitters, and the unconstrained
//! estimating-equation solution.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::envelope::NaturalParams;
use crate::error::{EhrError, Result};
use crate::linalg::{max_abs, SymMatrix};
use crate::scalar::Real;

/// Response vector and predictor matrix (`n x p`).
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset<T: Real> {
    y: DVector<T>,
    x: DMatrix<T>,
}

impl<T: Real> Dataset<T> {
    /// Requires `n > p + 1` and finite entries. Rank is checked by the
    /// fitters that need it.
    pub fn new(y: DVector<T>, x: DMatrix<T>) -> Result<Self> {
        if y.len() != x.nrows() {
            return Err(EhrError::Dimension(format!(
                "response has {} rows, predictors have {}",
                y.len(),
                x.nrows()
            )));
        }
        if y.len() <= x.ncols() + 1 {
            return Err(EhrError::InvalidData(format!(
                "need n > p + 1 (n = {}, p = {})",
                y.len(),
                x.ncols()
            )));
        }
        if let Some(i) = y.iter().position(|v| !v.is_finite_val()) {
            return Err(EhrError::NonFinite(format!("response row {i}")));
        }
        for j in 0..x.ncols() {
            for i in 0..x.nrows() {
                if !x[(i, j)].is_finite_val() {
                    return Err(EhrError::NonFinite(format!("predictor ({i},{j})")));
                }
            }
        }
        Ok(Self { y, x })
    }

    pub fn n(&self) -> usize {
        self.y.len()
    }

    pub fn p(&self) -> usize {
        self.x.ncols()
    }

    pub fn y(&self) -> &DVector<T> {
        &self.y
    }

    pub fn x(&self) -> &DMatrix<T> {
        &self.x
    }

    /// Rows selected by `idx` (repeats allowed).
    pub fn subset(&self, idx: &[usize]) -> Result<Self> {
        let y = DVector::from_iterator(idx.len(), idx.iter().map(|&i| self.y[i]));
        let x = DMatrix::from_fn(idx.len(), self.p(), |r, c| self.x[(idx[r], c)]);
        Self::new(y, x)
    }

    /// Same predictors, response multiplied by `c`.
    pub fn scale_response(&self, c: T) -> Self {
        Self {
            y: &self.y * c,
            x: self.x.clone(),
        }
    }

    /// Design matrix `[1 | X]`.
    pub fn design(&self) -> DMatrix<T> {
        let (n, p) = (self.n(), self.p());
        let mut d = DMatrix::from_element(n, p + 1, T::one());
        d.columns_mut(1, p).copy_from(&self.x);
        d
    }

    pub fn residuals(&self, mu: T, beta: &DVector<T>) -> DVector<T> {
        let fitted = &self.x * beta;
        DVector::from_fn(self.n(), |i, _| self.y[i] - mu - fitted[i])
    }
}

/// Huber threshold.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HuberSpec<T> {
    pub k: T,
}

impl<T: Real> HuberSpec<T> {
    pub fn new(k: T) -> Result<Self> {
        if !(k > T::zero()) || !k.is_finite_val() {
            return Err(EhrError::InvalidArgument(format!(
                "Huber threshold must be positive and finite, got {}",
                k.to_f64_lossy()
            )));
        }
        Ok(Self { k })
    }
}

/// `ρ(r)`: quadratic inside `[-k, k]`, linear outside.
pub fn huber_loss<T: Real>(r: T, k: T) -> T {
    let a = r.abs();
    if a <= k {
        r * r * T::lit(0.5)
    } else {
        k * a - k * k * T::lit(0.5)
    }
}

/// `ψ(r) = clamp(r, -k, k)`.
pub fn huber_psi<T: Real>(r: T, k: T) -> T {
    r.max(-k).min(k)
}

/// Almost-everywhere derivative of `ψ`, taken as 1 on the closed interval.
pub fn huber_dpsi<T: Real>(r: T, k: T) -> T {
    if r.abs() <= k {
        T::one()
    } else {
        T::zero()
    }
}

/// Estimating-equation score used in the first moment block: Huber's `ψ`
/// or the identity (least squares).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Score<T> {
    Huber { k: T },
    Identity,
}

impl<T: Real> Score<T> {
    pub fn psi(&self, r: T) -> T {
        match *self {
            Score::Huber { k } => huber_psi(r, k),
            Score::Identity => r,
        }
    }

    pub fn dpsi(&self, r: T) -> T {
        match *self {
            Score::Huber { k } => huber_dpsi(r, k),
            Score::Identity => T::one(),
        }
    }

    /// Loss whose derivative is `psi` (`r²/2` for the identity score).
    pub fn loss(&self, r: T) -> T {
        match *self {
            Score::Huber { k } => huber_loss(r, k),
            Score::Identity => r * r * T::lit(0.5),
        }
    }

    pub fn k(&self) -> Option<T> {
        match *self {
            Score::Huber { k } => Some(k),
            Score::Identity => None,
        }
    }
}

/// Intercept, slopes and residuals of a linear fit.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearFit<T: Real> {
    pub mu: T,
    pub beta: DVector<T>,
    pub residuals: DVector<T>,
    pub iterations: usize,
    pub converged: bool,
}

impl<T: Real> LinearFit<T> {
    fn from_coef(data: &Dataset<T>, coef: &DVector<T>, iterations: usize, converged: bool) -> Self {
        let mu = coef[0];
        let beta = coef.rows(1, data.p()).into_owned();
        let residuals = data.residuals(mu, &beta);
        Self {
            mu,
            beta,
            residuals,
            iterations,
            converged,
        }
    }

    pub fn coefficients(&self) -> DVector<T> {
        let mut c = DVector::zeros(self.beta.len() + 1);
        c[0] = self.mu;
        c.rows_mut(1, self.beta.len()).copy_from(&self.beta);
        c
    }
}

/// Iteration controls for the reweighted least-squares fitters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IrlsOptions {
    pub max_iter: usize,
    pub tol: f64,
}

impl IrlsOptions {
    pub fn huber() -> Self {
        Self {
            max_iter: 200,
            tol: 1e-10,
        }
    }

    pub fn median() -> Self {
        Self {
            max_iter: 500,
            tol: 1e-10,
        }
    }
}

/// Weighted least squares through a QR factorization of `sqrt(w) [1 | X]`.
fn weighted_ls<T: Real>(design: &DMatrix<T>, y: &DVector<T>, w: &DVector<T>) -> Result<DVector<T>> {
    let (n, q) = design.shape();
    let mut a = design.clone();
    let mut b = y.clone();
    for i in 0..n {
        let s = w[i].sqrt();
        for j in 0..q {
            a[(i, j)] *= s;
        }
        b[i] *= s;
    }
    solve_ls(a, &b)
}

fn solve_ls<T: Real>(a: DMatrix<T>, b: &DVector<T>) -> Result<DVector<T>> {
    let q = a.ncols();
    let scale = max_abs(&a);
    if scale == T::zero() {
        return Err(EhrError::Singular("design matrix is zero".into()));
    }
    let qr = a.qr();
    let r = qr.r();
    for j in 0..q {
        if r[(j, j)].abs() <= scale * T::machine_eps() * T::lit(1e3) {
            return Err(EhrError::Singular(
                "design matrix with intercept is rank deficient".into(),
            ));
        }
    }
    let qtb = qr.q().transpose() * b;
    r.solve_upper_triangular(&qtb)
        .ok_or_else(|| EhrError::Singular("triangular solve failed".into()))
}

/// Ordinary least squares with intercept.
pub fn ols_fit<T: Real>(data: &Dataset<T>) -> Result<LinearFit<T>> {
    let coef = solve_ls(data.design(), data.y())?;
    Ok(LinearFit::from_coef(data, &coef, 1, true))
}

fn huber_objective<T: Real>(res: &DVector<T>, k: T) -> T {
    res.iter().fold(T::zero(), |acc, &r| acc + huber_loss(r, k))
}

fn l1_objective<T: Real>(res: &DVector<T>) -> T {
    res.iter().fold(T::zero(), |acc, r| acc + r.abs())
}

/// Huber regression by IRLS from the OLS start, with the objective trace.
pub(crate) fn huber_irls<T: Real>(
    data: &Dataset<T>,
    spec: HuberSpec<T>,
    opts: IrlsOptions,
) -> Result<(LinearFit<T>, Vec<T>)> {
    let design = data.design();
    let k = spec.k;
    let tol = T::lit(opts.tol);
    let mut coef = solve_ls(design.clone(), data.y())?;
    let mut res = data.y() - &design * &coef;
    let mut obj = huber_objective(&res, k);
    let mut trace = vec![obj];
    let mut best = (obj, coef.clone());
    let mut converged = false;
    let mut iterations = 0;
    while iterations < opts.max_iter {
        iterations += 1;
        let w = DVector::from_iterator(
            res.len(),
            res.iter().map(|&r| {
                let a = r.abs();
                if a <= k {
                    T::one()
                } else {
                    k / a
                }
            }),
        );
        let next = weighted_ls(&design, data.y(), &w)?;
        let change = (&next - &coef).amax();
        coef = next;
        res = data.y() - &design * &coef;
        obj = huber_objective(&res, k);
        trace.push(obj);
        if obj <= best.0 {
            best = (obj, coef.clone());
        }
        if change < tol {
            converged = true;
            break;
        }
    }
    let fit = LinearFit::from_coef(data, &best.1, iterations, converged);
    Ok((fit, trace))
}

/// Huber regression `min Σ ρ(yᵢ − μ − xᵢᵀβ)`.
pub fn huber_fit<T: Real>(data: &Dataset<T>, spec: HuberSpec<T>, opts: IrlsOptions) -> Result<LinearFit<T>> {
    huber_irls(data, spec, opts).map(|(fit, _)| fit)
}

/// Least-absolute-deviation fit by smoothed IRLS (weights `1/max(|r|, δ)`).
pub fn median_fit<T: Real>(data: &Dataset<T>, opts: IrlsOptions) -> Result<LinearFit<T>> {
    let design = data.design();
    let n = data.n();
    let y = data.y();
    let mean = y.sum() / T::from_usize_lossy(n);
    let var = y.iter().fold(T::zero(), |a, &v| a + (v - mean) * (v - mean)) / T::from_usize_lossy(n);
    let scale = if var > T::zero() { var.sqrt() } else { T::one() };
    let delta = T::lit(1e-6) * scale;
    let tol = T::lit(opts.tol);

    let mut coef = solve_ls(design.clone(), y)?;
    let mut res = y - &design * &coef;
    let mut best = (l1_objective(&res), coef.clone());
    let mut converged = false;
    let mut iterations = 0;
    while iterations < opts.max_iter {
        iterations += 1;
        let w = DVector::from_iterator(n, res.iter().map(|&r| T::one() / r.abs().max(delta)));
        let next = weighted_ls(&design, y, &w)?;
        let change = (&next - &coef).amax();
        coef = next;
        res = y - &design * &coef;
        let obj = l1_objective(&res);
        if obj < best.0 {
            best = (obj, coef.clone());
        }
        if change < tol * (T::one() + coef.amax()) {
            converged = true;
            break;
        }
    }
    Ok(LinearFit::from_coef(data, &best.1, iterations, converged))
}

/// Median of a slice (average of the two central values for even length).
pub fn median<T: Real>(values: &[T]) -> T {
    assert!(!values.is_empty(), "median of empty slice");
    let mut v = values.to_vec();
    v.sort_by(|a, b| a.partial_cmp(b).unwrap_or(std::cmp::Ordering::Equal));
    let m = v.len() / 2;
    if v.len() % 2 == 1 {
        v[m]
    } else {
        (v[m - 1] + v[m]) * T::lit(0.5)
    }
}

/// Outcome of the threshold rule of thumb.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KSelection<T> {
    pub spec: HuberSpec<T>,
    pub mad: T,
    /// MAD was zero and `k` was floored.
    pub degenerate: bool,
}

pub const K_FLOOR: f64 = 1e-8;

/// `k = 1.345 · MAD / 0.6745` from the residuals of a median regression.
pub fn k_from_mad<T: Real>(mad: T) -> KSelection<T> {
    let k = T::lit(1.345) * mad / T::lit(0.6745);
    let floor = T::lit(K_FLOOR);
    let degenerate = !(k > floor);
    KSelection {
        spec: HuberSpec {
            k: if degenerate { floor } else { k },
        },
        mad,
        degenerate,
    }
}

/// Rule-of-thumb Huber threshold from median-regression residuals.
pub fn select_k<T: Real>(data: &Dataset<T>) -> Result<KSelection<T>> {
    let fit = median_fit(data, IrlsOptions::median())?;
    let abs: Vec<T> = fit.residuals.iter().map(|r| r.abs()).collect();
    Ok(k_from_mad(median(&abs)))
}

/// Sample mean and covariance of the predictors (divisor `n`).
pub fn predictor_moments<T: Real>(x: &DMatrix<T>) -> (DVector<T>, DMatrix<T>) {
    let (n, p) = x.shape();
    let nf = T::from_usize_lossy(n);
    let mean = DVector::from_fn(p, |j, _| x.column(j).sum() / nf);
    let mut centered = x.clone();
    for j in 0..p {
        let m = mean[j];
        for v in centered.column_mut(j).iter_mut() {
            *v -= m;
        }
    }
    let s = centered.transpose() * &centered / nf;
    let s = (&s + s.transpose()) * T::lit(0.5);
    (mean, s)
}

/// Unconstrained solution `θ̃` of the estimating equations.
#[derive(Debug, Clone)]
pub struct GeeSolution<T: Real> {
    pub theta: NaturalParams<T>,
    pub fit: LinearFit<T>,
    pub score: Score<T>,
}

impl<T: Real> GeeSolution<T> {
    /// Completes a linear fit with the predictor mean and covariance.
    pub fn from_fit(data: &Dataset<T>, fit: LinearFit<T>, score: Score<T>) -> Result<Self> {
        let (mean, cov) = predictor_moments(data.x());
        let theta = NaturalParams {
            mu: fit.mu,
            beta: fit.beta.clone(),
            sigma_x: SymMatrix::new(cov)?,
            mu_x: mean,
        };
        Ok(Self { theta, fit, score })
    }
}

/// `θ̃` for the Huber score.
pub fn gee_solution<T: Real>(data: &Dataset<T>, spec: HuberSpec<T>) -> Result<GeeSolution<T>> {
    let fit = huber_fit(data, spec, IrlsOptions::huber())?;
    GeeSolution::from_fit(data, fit, Score::Huber { k: spec.k })
}

/// `θ̃` for a general score (OLS for the identity score).
pub fn gee_solution_for<T: Real>(data: &Dataset<T>, score: Score<T>) -> Result<GeeSolution<T>> {
    match score {
        Score::Huber { k } => gee_solution(data, HuberSpec::new(k)?),
        Score::Identity => GeeSolution::from_fit(data, ols_fit(data)?, score),
    }
}
