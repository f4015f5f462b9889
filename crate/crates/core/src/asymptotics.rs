//! Asymptotic covariances of the unconstrained and envelope estimators, and
//! the Huber efficiency factor for the reference error laws.

use std::fmt;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::{Distribution, Exp1, StandardNormal, StudentT};
use serde::{Deserialize, Serialize};
use statrs::distribution::{Continuous, ContinuousCDF, Gamma, Normal};

use crate::envelope::EnvelopeBasis;
use crate::error::{EhrError, Result};
use crate::linalg::{contraction, default_pinv_tol, kron, pinv, spd_inverse, vech, vech_len, SymMatrix};
use crate::robust::{predictor_moments, Dataset, LinearFit, Score};
use crate::scalar::Real;

/// `U₁` and `V₁` of the sandwich `U₁⁻¹ V₁ U₁⁻¹`, laid out along
/// `θ = (μ, β, vech Σx, μx)`.
#[derive(Debug, Clone, PartialEq)]
pub struct SandwichParts<T: Real> {
    pub p: usize,
    pub u1: SymMatrix<T>,
    pub v1: SymMatrix<T>,
}

impl<T: Real> SandwichParts<T> {
    /// `U₁⁻¹ V₁ U₁⁻¹`; only the leading `(1+p)` block of `U₁` differs from
    /// the identity.
    pub fn avar(&self) -> Result<SymMatrix<T>> {
        let d = self.u1.dim();
        let b = 1 + self.p;
        let u11 = self.u1.matrix().view((0, 0), (b, b)).into_owned();
        let u11_inv = spd_inverse(&u11).map_err(|_| {
            EhrError::Singular("score derivative block is singular (every residual clipped?)".into())
        })?;
        let mut inv = DMatrix::identity(d, d);
        inv.view_mut((0, 0), (b, b)).copy_from(&u11_inv);
        let out = &inv * self.v1.matrix() * &inv;
        SymMatrix::symmetrize(out)
    }
}

/// Plug-in `U₁`, `V₁` at a fitted linear model: expectations become sample
/// means, `μx` becomes `x̄`, and `ψ'` is the a.e. derivative of the score.
pub fn sandwich_parts<T: Real>(data: &Dataset<T>, fit: &LinearFit<T>, score: Score<T>) -> Result<SandwichParts<T>> {
    let (n, p) = (data.n(), data.p());
    if fit.residuals.len() != n || fit.beta.len() != p {
        return Err(EhrError::Dimension("fit does not match the data".into()));
    }
    let nf = T::from_usize_lossy(n);
    let q = vech_len(p);
    let d = 1 + p + q + p;
    let w = data.design();
    let (x_bar, s_x) = predictor_moments(data.x());

    let mut u11 = DMatrix::zeros(1 + p, 1 + p);
    let mut v11 = DMatrix::zeros(1 + p, 1 + p);
    let mut v22 = DMatrix::zeros(q, q);
    let mut v23 = DMatrix::zeros(q, p);
    let mut vs = Vec::with_capacity(n);
    let mut v_bar = DVector::zeros(q);
    for i in 0..n {
        let wi = w.row(i).transpose();
        let r = fit.residuals[i];
        let outer = &wi * wi.transpose();
        u11 += &outer * score.dpsi(r);
        let s = score.psi(r);
        v11 += outer * (s * s);
        let di = data.x().row(i).transpose() - &x_bar;
        let vi = vech(&(&di * di.transpose()))?;
        v_bar += &vi;
        v23 += &vi * di.transpose();
        vs.push(vi);
    }
    v_bar /= nf;
    for vi in &vs {
        let c = vi - &v_bar;
        v22 += &c * c.transpose();
    }
    u11 /= nf;
    v11 /= nf;
    v22 /= nf;
    v23 /= nf;

    let mut u1 = DMatrix::identity(d, d);
    u1.view_mut((0, 0), (1 + p, 1 + p)).copy_from(&u11);
    let mut v1 = DMatrix::zeros(d, d);
    v1.view_mut((0, 0), (1 + p, 1 + p)).copy_from(&v11);
    v1.view_mut((1 + p, 1 + p), (q, q)).copy_from(&v22);
    v1.view_mut((1 + p, 1 + p + q), (q, p)).copy_from(&v23);
    v1.view_mut((1 + p + q, 1 + p), (p, q)).copy_from(&v23.transpose());
    v1.view_mut((1 + p + q, 1 + p + q), (p, p)).copy_from(&s_x);
    Ok(SandwichParts {
        p,
        u1: SymMatrix::symmetrize(u1)?,
        v1: SymMatrix::symmetrize(v1)?,
    })
}

/// Plug-in `avar(√n θ̃)`.
pub fn sandwich_avar<T: Real>(data: &Dataset<T>, fit: &LinearFit<T>, score: Score<T>) -> Result<SymMatrix<T>> {
    sandwich_parts(data, fit, score)?.avar()
}

/// Population `avar(√n θ̃)` for Gaussian predictors `x ~ N(μx, Σx)` and an
/// error independent of `x` with Huber factor `factor`.
pub fn population_sandwich_normal<T: Real>(sigma_x: &DMatrix<T>, mu_x: &DVector<T>, factor: T) -> Result<SymMatrix<T>> {
    let p = sigma_x.nrows();
    let q = vech_len(p);
    let d = 1 + 2 * p + q;
    let mut eww = DMatrix::zeros(1 + p, 1 + p);
    eww[(0, 0)] = T::one();
    eww.view_mut((0, 1), (1, p)).copy_from(&mu_x.transpose());
    eww.view_mut((1, 0), (p, 1)).copy_from(mu_x);
    eww.view_mut((1, 1), (p, p)).copy_from(&(sigma_x + mu_x * mu_x.transpose()));
    let top = spd_inverse(&eww)? * factor;
    let c = contraction::<T>(p);
    let v22 = &c * kron(sigma_x, sigma_x) * c.transpose() * T::lit(2.0);
    let mut out = DMatrix::zeros(d, d);
    out.view_mut((0, 0), (1 + p, 1 + p)).copy_from(&top);
    out.view_mut((1 + p, 1 + p), (q, q)).copy_from(&v22);
    out.view_mut((1 + p + q, 1 + p + q), (p, p)).copy_from(sigma_x);
    SymMatrix::symmetrize(out)
}

/// `Ψ (Ψᵀ Υ⁻¹ Ψ)† Ψᵀ` for `Υ = avar(√n θ̃)`.
pub fn projected_avar<T: Real>(psi1: &DMatrix<T>, avar_tilde: &SymMatrix<T>) -> Result<SymMatrix<T>> {
    if psi1.nrows() != avar_tilde.dim() {
        return Err(EhrError::Dimension(format!(
            "Jacobian has {} rows, covariance is {}x{}",
            psi1.nrows(),
            avar_tilde.dim(),
            avar_tilde.dim()
        )));
    }
    let inv = spd_inverse(avar_tilde.matrix())
        .map_err(|_| EhrError::Singular("avar of the unconstrained estimator is not invertible".into()))?;
    let inner = psi1.transpose() * inv * psi1;
    let inner = (&inner + inner.transpose()) * T::lit(0.5);
    let out = psi1 * pinv(&inner, default_pinv_tol())? * psi1.transpose();
    SymMatrix::symmetrize(out)
}

/// `factor · Γ Ω⁻¹ Γᵀ`: the covariance of `β̂` when `Γ` is known.
pub fn known_gamma_avar<T: Real>(basis: &EnvelopeBasis<T>, omega: &DMatrix<T>, factor: T) -> Result<SymMatrix<T>> {
    if omega.shape() != (basis.u(), basis.u()) {
        return Err(EhrError::Dimension("Ω does not match the basis".into()));
    }
    let g = basis.gamma.matrix();
    SymMatrix::symmetrize(g * spd_inverse(omega)? * g.transpose() * factor)
}

/// Closed-form `avar(√n β̂)` for independent errors and centered predictors:
/// `f Γ Ω⁻¹ Γᵀ + (ηᵀ ⊗ Γ0) T† (η ⊗ Γ0ᵀ)` with
/// `T = f⁻¹ ηηᵀ ⊗ Ω0 + Ω ⊗ Ω0⁻¹ + Ω⁻¹ ⊗ Ω0 − 2 I`.
pub fn corollary2_avar<T: Real>(
    basis: &EnvelopeBasis<T>,
    eta: &DVector<T>,
    omega: &DMatrix<T>,
    omega0: &DMatrix<T>,
    factor: T,
) -> Result<SymMatrix<T>> {
    let (p, u) = (basis.p(), basis.u());
    let pu = p - u;
    if eta.len() != u || omega.shape() != (u, u) || omega0.shape() != (pu, pu) {
        return Err(EhrError::Dimension("closed-form inputs disagree with the basis".into()));
    }
    let first = known_gamma_avar(basis, omega, factor)?.into_inner();
    if pu == 0 {
        return SymMatrix::symmetrize(first);
    }
    let g0 = basis.gamma0.matrix();
    let om_inv = spd_inverse(omega)?;
    let om0_inv = spd_inverse(omega0)?;
    let eet = eta * eta.transpose();
    let t = kron(&eet, omega0) / factor + kron(omega, &om0_inv) + kron(&om_inv, omega0)
        - DMatrix::identity(u * pu, u * pu) * T::lit(2.0);
    let t = (&t + t.transpose()) * T::lit(0.5);
    let left = kron(&DMatrix::from_row_slice(1, u, eta.as_slice()), g0);
    let second = &left * pinv(&t, default_pinv_tol())? * left.transpose();
    SymMatrix::symmetrize(first + second)
}

/// The six reference error laws.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ErrorDistribution {
    Normal,
    T3,
    /// `0.9 N(0,1) + 0.1 N(0,25)`.
    Mixnorm,
    /// Standard Laplace, variance 2.
    Laplace,
    /// `Z · V` with `Z = ±1` and `V ~ Gamma(shape 2, scale 2)`.
    Sgamma,
    Cauchy,
}

impl ErrorDistribution {
    pub const ALL: [ErrorDistribution; 6] = [
        ErrorDistribution::Normal,
        ErrorDistribution::T3,
        ErrorDistribution::Mixnorm,
        ErrorDistribution::Laplace,
        ErrorDistribution::Sgamma,
        ErrorDistribution::Cauchy,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            Self::Normal => "normal",
            Self::T3 => "t3",
            Self::Mixnorm => "mixnorm",
            Self::Laplace => "laplace",
            Self::Sgamma => "sgamma",
            Self::Cauchy => "cauchy",
        }
    }

    /// Density at `e`.
    pub fn density(&self, e: f64) -> f64 {
        match self {
            Self::Normal => std_normal().pdf(e),
            Self::T3 => {
                let c = 6.0 * 3f64.sqrt() / std::f64::consts::PI / 9.0;
                c / (1.0 + e * e / 3.0).powi(2)
            }
            Self::Mixnorm => 0.9 * std_normal().pdf(e) + 0.1 * std_normal().pdf(e / 5.0) / 5.0,
            Self::Laplace => 0.5 * (-e.abs()).exp(),
            Self::Sgamma => 0.5 * sgamma_abs().pdf(e.abs()),
            Self::Cauchy => 1.0 / (std::f64::consts::PI * (1.0 + e * e)),
        }
    }

    /// `var(ε)`; infinite for the Cauchy law.
    pub fn variance(&self) -> f64 {
        match self {
            Self::Normal => 1.0,
            Self::T3 => 3.0,
            Self::Mixnorm => 0.9 + 0.1 * 25.0,
            Self::Laplace => 2.0,
            Self::Sgamma => 24.0,
            Self::Cauchy => f64::INFINITY,
        }
    }

    /// `P(|ε| > t)` for `t ≥ 0`.
    pub fn tail(&self, t: f64) -> f64 {
        let t = t.abs();
        match self {
            Self::Normal => normal_two_sided_tail(t),
            Self::T3 => {
                use statrs::distribution::StudentsT;
                2.0 * StudentsT::new(0.0, 1.0, 3.0).expect("valid").sf(t)
            }
            Self::Mixnorm => 0.9 * normal_two_sided_tail(t) + 0.1 * normal_two_sided_tail(t / 5.0),
            Self::Laplace => (-t).exp(),
            Self::Sgamma => sgamma_abs().sf(t),
            Self::Cauchy => 1.0 - 2.0 / std::f64::consts::PI * t.atan(),
        }
    }

    /// Median of `|ε|`.
    pub fn mad(&self) -> f64 {
        match self {
            Self::Normal => std_normal().inverse_cdf(0.75),
            Self::T3 => {
                use statrs::distribution::StudentsT;
                StudentsT::new(0.0, 1.0, 3.0).expect("valid").inverse_cdf(0.75)
            }
            Self::Mixnorm => {
                let n = std_normal();
                let mass = |m: f64| 0.9 * (2.0 * n.cdf(m) - 1.0) + 0.1 * (2.0 * n.cdf(m / 5.0) - 1.0);
                bisect(|m| mass(m) - 0.5, 0.0, 10.0)
            }
            Self::Laplace => std::f64::consts::LN_2,
            Self::Sgamma => sgamma_abs().inverse_cdf(0.5),
            Self::Cauchy => 1.0,
        }
    }

    /// One draw.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        match self {
            Self::Normal => StandardNormal.sample(rng),
            Self::T3 => StudentT::new(3.0).expect("valid").sample(rng),
            Self::Mixnorm => {
                let wide = rng.random::<f64>() < 0.1;
                let z: f64 = StandardNormal.sample(rng);
                if wide {
                    5.0 * z
                } else {
                    z
                }
            }
            Self::Laplace => {
                let e: f64 = Exp1.sample(rng);
                if rng.random::<bool>() {
                    e
                } else {
                    -e
                }
            }
            Self::Sgamma => {
                let a: f64 = Exp1.sample(rng);
                let b: f64 = Exp1.sample(rng);
                let v = 2.0 * (a + b);
                if rng.random::<bool>() {
                    v
                } else {
                    -v
                }
            }
            Self::Cauchy => {
                let a: f64 = StandardNormal.sample(rng);
                let b: f64 = StandardNormal.sample(rng);
                a / b
            }
        }
    }
}

impl fmt::Display for ErrorDistribution {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ErrorDistribution {
    type Err = EhrError;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|d| d.name().eq_ignore_ascii_case(s.trim()))
            .ok_or_else(|| EhrError::InvalidArgument(format!("unknown error distribution '{s}'")))
    }
}

/// `P(|Z| > t)`; libm's `erfc` is accurate to an ulp where statrs drifts
/// by about 1e-11 in the body of the distribution.
fn normal_two_sided_tail(t: f64) -> f64 {
    libm::erfc(t / std::f64::consts::SQRT_2)
}

fn std_normal() -> Normal {
    Normal::new(0.0, 1.0).expect("valid")
}

fn sgamma_abs() -> Gamma {
    Gamma::new(2.0, 0.5).expect("valid")
}

fn bisect<F: Fn(f64) -> f64>(f: F, mut lo: f64, mut hi: f64) -> f64 {
    let mut flo = f(lo);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        let fm = f(mid);
        if (fm < 0.0) == (flo < 0.0) {
            lo = mid;
            flo = fm;
        } else {
            hi = mid;
        }
        if hi - lo < 1e-15 * hi.max(1.0) {
            break;
        }
    }
    0.5 * (lo + hi)
}

/// Adaptive Simpson quadrature with absolute tolerance `tol`.
pub fn adaptive_simpson<F: Fn(f64) -> f64>(f: &F, a: f64, b: f64, tol: f64) -> f64 {
    let fa = f(a);
    let fb = f(b);
    let m = 0.5 * (a + b);
    let fm = f(m);
    let whole = (b - a) / 6.0 * (fa + 4.0 * fm + fb);
    simpson_step(f, a, b, fa, fm, fb, whole, tol, 60)
}

#[allow(clippy::too_many_arguments)]
fn simpson_step<F: Fn(f64) -> f64>(f: &F, a: f64, b: f64, fa: f64, fm: f64, fb: f64, whole: f64, tol: f64, depth: u32) -> f64 {
    let m = 0.5 * (a + b);
    let lm = 0.5 * (a + m);
    let rm = 0.5 * (m + b);
    let flm = f(lm);
    let frm = f(rm);
    let left = (m - a) / 6.0 * (fa + 4.0 * flm + fm);
    let right = (b - m) / 6.0 * (fm + 4.0 * frm + fb);
    let diff = left + right - whole;
    if depth == 0 || diff.abs() <= 15.0 * tol {
        return left + right + diff / 15.0;
    }
    simpson_step(f, a, m, fa, flm, fm, left, 0.5 * tol, depth - 1)
        + simpson_step(f, m, b, fm, frm, fb, right, 0.5 * tol, depth - 1)
}

/// `(E ψ'(ε), E ψ²(ε))` for the Huber score with threshold `k`.
/// `E ψ' = P(|ε| ≤ k)` comes from the distribution function, and
/// `E ψ² = 2∫₀ᵏ e² f(e) de + k² P(|ε| > k)` needs the density only on
/// `[0, k]` because `ψ² = k²` beyond it.
pub fn huber_moments(dist: ErrorDistribution, k: f64) -> Result<(f64, f64)> {
    if !(k > 0.0) || !k.is_finite() {
        return Err(EhrError::InvalidArgument(format!("threshold must be positive and finite, got {k}")));
    }
    let second = |e: f64| e * e * dist.density(e);
    // unit panels resolve the density near the origin; past that the
    // integrand is smooth and geometric panels cover any reach cheaply
    let mut edges = vec![0.0];
    let mut e = 0.0;
    while e < k {
        e = if e < 64.0 { e + 1.0 } else { 2.0 * e };
        edges.push(e.min(k));
    }
    let tol = 1e-13 / edges.len() as f64;
    let sq: f64 = edges.windows(2).map(|w| adaptive_simpson(&second, w[0], w[1], tol)).sum();
    let tail = dist.tail(k);
    Ok((1.0 - tail, 2.0 * sq + k * k * tail))
}

/// Huber factor `E ψ² / (E ψ')²`.
pub fn huber_factor(dist: ErrorDistribution, k: f64) -> Result<f64> {
    let (d, s) = huber_moments(dist, k)?;
    Ok(s / (d * d))
}

/// Rule-of-thumb threshold at the population level: `1.345 · MAD / 0.6745`.
pub fn population_k(dist: ErrorDistribution) -> f64 {
    1.345 * dist.mad() / 0.6745
}
