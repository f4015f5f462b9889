//! Moment functions, the two-step weight matrix and the GMM objective.

use nalgebra::{DMatrix, DVector, DVectorView};

use crate::envelope::{env_map, EnvelopeParams, NaturalParams};
use crate::error::{EhrError, Result};
use crate::linalg::{sym_eigen, vech, vech_len, SymMatrix};
use crate::robust::{predictor_moments, Dataset, Score};
use crate::scalar::Real;

/// `g(z; θ)` split into its score, covariance and mean blocks.
#[derive(Debug, Clone, PartialEq)]
pub struct MomentVector<T: Real> {
    pub g1: DVector<T>,
    pub g2: DVector<T>,
    pub g3: DVector<T>,
}

/// Number of moment conditions for `p` predictors.
pub fn moment_dim(p: usize) -> usize {
    1 + 2 * p + vech_len(p)
}

impl<T: Real> MomentVector<T> {
    pub fn to_vector(&self) -> DVector<T> {
        let mut out = DVector::zeros(self.g1.len() + self.g2.len() + self.g3.len());
        out.rows_mut(0, self.g1.len()).copy_from(&self.g1);
        out.rows_mut(self.g1.len(), self.g2.len()).copy_from(&self.g2);
        out.rows_mut(self.g1.len() + self.g2.len(), self.g3.len()).copy_from(&self.g3);
        out
    }
}

/// Moments of a single observation.
pub fn moment_g<T: Real>(y: T, x: DVectorView<'_, T>, theta: &NaturalParams<T>, score: Score<T>) -> MomentVector<T> {
    let p = theta.p();
    assert_eq!(x.len(), p, "observation length");
    let r = y - theta.mu - x.dot(&theta.beta);
    let s = score.psi(r);
    let mut g1 = DVector::zeros(p + 1);
    g1[0] = s;
    g1.rows_mut(1, p).copy_from(&(x * s));
    let d = x - &theta.mu_x;
    let outer = &d * d.transpose();
    let g2 = theta.sigma_x.vech() - vech(&outer).expect("square");
    let g3 = &theta.mu_x - x;
    MomentVector { g1, g2, g3 }
}

/// Predictor summaries reused by every evaluation of `G_n`.
#[derive(Debug, Clone)]
pub struct MomentCache<T: Real> {
    pub x_bar: DVector<T>,
    pub s_x: DMatrix<T>,
}

impl<T: Real> MomentCache<T> {
    pub fn new(x: &DMatrix<T>) -> Self {
        let (x_bar, s_x) = predictor_moments(x);
        Self { x_bar, s_x }
    }
}

/// `G_n(θ) = n⁻¹ Σ g(zᵢ; θ)`. Blocks 2 and 3 come from the sample moments:
/// the mean of `(xᵢ - μx)(xᵢ - μx)ᵀ` is `Sx + (x̄ - μx)(x̄ - μx)ᵀ`.
pub fn sample_moment<T: Real>(data: &Dataset<T>, theta: &NaturalParams<T>, score: Score<T>) -> DVector<T> {
    sample_moment_rows(data.y(), data.x(), theta, score)
}

/// [`sample_moment`] on raw rows, without the dataset size requirements.
pub fn sample_moment_rows<T: Real>(
    y: &DVector<T>,
    x: &DMatrix<T>,
    theta: &NaturalParams<T>,
    score: Score<T>,
) -> DVector<T> {
    sample_moment_cached(y, x, &MomentCache::new(x), theta, score)
}

pub(crate) fn sample_moment_cached<T: Real>(
    y: &DVector<T>,
    x: &DMatrix<T>,
    cache: &MomentCache<T>,
    theta: &NaturalParams<T>,
    score: Score<T>,
) -> DVector<T> {
    sample_moment_parts(
        y,
        x,
        cache,
        theta.mu,
        &theta.beta,
        theta.sigma_x.matrix(),
        &theta.mu_x,
        score,
    )
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn sample_moment_parts<T: Real>(
    y: &DVector<T>,
    x: &DMatrix<T>,
    cache: &MomentCache<T>,
    mu: T,
    beta: &DVector<T>,
    sigma: &DMatrix<T>,
    mu_x: &DVector<T>,
    score: Score<T>,
) -> DVector<T> {
    let p = x.ncols();
    let n = T::from_usize_lossy(x.nrows());
    let mut psi = y - x * beta;
    for v in psi.iter_mut() {
        *v = score.psi(*v - mu);
    }
    let mut out = DVector::zeros(moment_dim(p));
    out[0] = psi.sum() / n;
    out.rows_mut(1, p).copy_from(&(x.tr_mul(&psi) / n));

    let d = &cache.x_bar - mu_x;
    let q = vech_len(p);
    let mut k = 1 + p;
    for j in 0..p {
        for i in j..p {
            out[k] = sigma[(i, j)] - cache.s_x[(i, j)] - d[i] * d[j];
            k += 1;
        }
    }
    out.rows_mut(1 + p + q, p).copy_from(&(-d));
    out
}

/// Per-observation moments stacked as rows (`n x m`).
pub fn moment_matrix<T: Real>(data: &Dataset<T>, theta: &NaturalParams<T>, score: Score<T>) -> DMatrix<T> {
    let p = data.p();
    let m = moment_dim(p);
    let mut out = DMatrix::zeros(data.n(), m);
    let x = data.x();
    for i in 0..data.n() {
        let xi = x.row(i).transpose();
        let g = moment_g(data.y()[i], xi.column(0), theta, score).to_vector();
        out.set_row(i, &g.transpose());
    }
    out
}

/// `Δ̂` with a record of any ridge adjustment.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightMatrix<T: Real> {
    pub delta: SymMatrix<T>,
    pub ridge_applied: bool,
    pub ridge_value: T,
    /// Condition number of the equilibrated outer-product average.
    pub condition: T,
    /// Fewer observations than moment conditions.
    pub underdetermined: bool,
}

pub const RIDGE_CONDITION: f64 = 1e12;
pub const DEFAULT_RIDGE_EPS: f64 = 1e-8;

/// Inverse of the average moment outer product `M` at `θ̃`.
///
/// Conditioning is judged on the equilibrated matrix `R = D^{-1/2} M D^{-1/2}`
/// (`D = diag M`), so the decision does not depend on the units of `y` or
/// `x`. When `cond(R) > 1e12`, `ridge_eps · trace(R) / m` is added to the
/// diagonal of `R` before inverting; otherwise the result is exactly `M⁻¹`.
pub fn weight_matrix<T: Real>(
    data: &Dataset<T>,
    theta_tilde: &NaturalParams<T>,
    score: Score<T>,
    ridge_eps: T,
) -> Result<WeightMatrix<T>> {
    let g = moment_matrix(data, theta_tilde, score);
    if g.iter().any(|v| !v.is_finite_val()) {
        return Err(EhrError::NonFinite("moment vector at the preliminary estimate".into()));
    }
    let m = g.ncols();
    let outer = g.tr_mul(&g) / T::from_usize_lossy(data.n());
    let outer = (&outer + outer.transpose()) * T::lit(0.5);
    let scale = DVector::from_fn(m, |j, _| {
        let d = outer[(j, j)];
        if d > T::zero() {
            T::one() / d.sqrt()
        } else {
            T::one()
        }
    });
    let r = DMatrix::from_fn(m, m, |i, j| outer[(i, j)] * scale[i] * scale[j]);
    let (vals, vecs) = sym_eigen(&r)?;
    let top = vals[0];
    let bottom = vals[m - 1];
    let condition = if bottom > T::zero() { top / bottom } else { T::lit(f64::INFINITY) };
    let ridge_applied = !(condition <= T::lit(RIDGE_CONDITION));
    let ridge_value = if ridge_applied {
        ridge_eps * r.trace() / T::from_usize_lossy(m)
    } else {
        T::zero()
    };
    let inv_vals = DVector::from_iterator(m, vals.iter().map(|&l| T::one() / (l + ridge_value)));
    if inv_vals.iter().any(|v| !v.is_finite_val() || *v <= T::zero()) {
        return Err(EhrError::Singular("moment outer product is singular even after ridge".into()));
    }
    let r_inv = &vecs * DMatrix::from_diagonal(&inv_vals) * vecs.transpose();
    let delta = DMatrix::from_fn(m, m, |i, j| r_inv[(i, j)] * scale[i] * scale[j]);
    Ok(WeightMatrix {
        delta: SymMatrix::symmetrize(delta)?,
        ridge_applied,
        ridge_value,
        condition,
        underdetermined: data.n() < m,
    })
}

/// Quadratic form `Gᵀ Δ G`.
pub(crate) fn quad_form<T: Real>(g: &DVector<T>, delta: &DMatrix<T>) -> T {
    let dg = delta * g;
    g.dot(&dg)
}

/// `G_n(θ)ᵀ Δ̂ G_n(θ)` at `θ = env(ζ)`.
pub fn gmm_objective<T: Real>(
    data: &Dataset<T>,
    zeta: &EnvelopeParams<T>,
    delta: &WeightMatrix<T>,
    score: Score<T>,
) -> Result<T> {
    if zeta.p() != data.p() {
        return Err(EhrError::Dimension("envelope parameters and data disagree on p".into()));
    }
    let theta = env_map(zeta)?;
    Ok(quad_form(&sample_moment(data, &theta, score), delta.delta.matrix()))
}
