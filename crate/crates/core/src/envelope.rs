//! Envelope coordinates.
//!
//! The envelope basis is written in the unconstrained chart
//! `Γ_raw = P [I; A]`, `Γ0_raw = P [-Aᵀ; I]`, where `P` is a row permutation
//! chosen once from the initial basis. `Γ_rawᵀ Γ0_raw = 0` for every `A`, so
//! `Σ = Γ_raw Ω Γ_rawᵀ + Γ0_raw Ω0 Γ0_rawᵀ` always has `span(Γ_raw)` as a
//! reducing subspace. [`canonicalize`] converts back to semi-orthogonal bases.

use nalgebra::{DMatrix, DVector};

use crate::error::{EhrError, Result};
use crate::linalg::{
    contraction, expansion, is_spd, kron, log_chol_to_spd, spd_inverse, spd_to_log_chol, thin_qr, unvech,
    vech, vech_len, SemiOrthMatrix, SymMatrix,
};
use crate::scalar::Real;

/// `θ = (μ, β, vech Σx, μx)`.
#[derive(Debug, Clone, PartialEq)]
pub struct NaturalParams<T: Real> {
    pub mu: T,
    pub beta: DVector<T>,
    pub sigma_x: SymMatrix<T>,
    pub mu_x: DVector<T>,
}

/// Length of `θ` for `p` predictors.
pub fn theta_dim(p: usize) -> usize {
    1 + 2 * p + vech_len(p)
}

/// Length of `ζ = (μ, η, vec Γ, vech Ω, vech Ω0, μx)` in the semi-orthogonal
/// parameterization (overparameterized by `u²`).
pub fn zeta_dim(p: usize, u: usize) -> usize {
    1 + u + p * u + vech_len(u) + vech_len(p - u) + p
}

/// Number of free coordinates of the A-chart.
pub fn chart_dim(p: usize, u: usize) -> usize {
    1 + u + (p - u) * u + vech_len(u) + vech_len(p - u) + p
}

impl<T: Real> NaturalParams<T> {
    pub fn p(&self) -> usize {
        self.beta.len()
    }

    /// Stacked `θ` vector.
    pub fn to_vector(&self) -> DVector<T> {
        let p = self.p();
        let mut out = DVector::zeros(theta_dim(p));
        out[0] = self.mu;
        out.rows_mut(1, p).copy_from(&self.beta);
        let q = vech_len(p);
        out.rows_mut(1 + p, q).copy_from(&self.sigma_x.vech());
        out.rows_mut(1 + p + q, p).copy_from(&self.mu_x);
        out
    }

    pub fn from_vector(v: &DVector<T>, p: usize) -> Result<Self> {
        if v.len() != theta_dim(p) {
            return Err(EhrError::Dimension(format!(
                "θ for p = {p} has {} entries, got {}",
                theta_dim(p),
                v.len()
            )));
        }
        let q = vech_len(p);
        Ok(Self {
            mu: v[0],
            beta: v.rows(1, p).into_owned(),
            sigma_x: SymMatrix::from_vech(&v.rows(1 + p, q).into_owned(), p)?,
            mu_x: v.rows(1 + p + q, p).into_owned(),
        })
    }
}

/// Envelope parameters in the A-chart.
#[derive(Debug, Clone, PartialEq)]
pub struct EnvelopeParams<T: Real> {
    pub mu: T,
    pub eta: DVector<T>,
    /// `(p-u) x u`, unconstrained.
    pub a: DMatrix<T>,
    pub omega: SymMatrix<T>,
    pub omega0: SymMatrix<T>,
    pub mu_x: DVector<T>,
    /// `perm[r]` is the original predictor index placed at row `r` of `[I; A]`.
    pub perm: Vec<usize>,
}

/// Orthonormal envelope basis and its complement.
#[derive(Debug, Clone, PartialEq)]
pub struct EnvelopeBasis<T: Real> {
    pub gamma: SemiOrthMatrix<T>,
    pub gamma0: SemiOrthMatrix<T>,
}

impl<T: Real> EnvelopeBasis<T> {
    pub fn new(gamma: DMatrix<T>, gamma0: DMatrix<T>) -> Result<Self> {
        if gamma.nrows() != gamma0.nrows() || gamma.ncols() + gamma0.ncols() != gamma.nrows() {
            return Err(EhrError::Dimension("basis and complement do not split the space".into()));
        }
        let cross = crate::linalg::max_abs(&(gamma.transpose() * &gamma0));
        if cross > T::lit(1e-10).max(T::machine_eps() * T::lit(1e6)) {
            return Err(EhrError::InvalidArgument(format!(
                "basis is not orthogonal to its complement ({:e})",
                cross.to_f64_lossy()
            )));
        }
        Ok(Self {
            gamma: SemiOrthMatrix::new(gamma)?,
            gamma0: SemiOrthMatrix::new(gamma0)?,
        })
    }

    pub fn p(&self) -> usize {
        self.gamma.rows()
    }

    pub fn u(&self) -> usize {
        self.gamma.cols()
    }
}

/// Envelope parameters with semi-orthogonal bases.
#[derive(Debug, Clone, PartialEq)]
pub struct CanonicalEnvelope<T: Real> {
    pub mu: T,
    pub basis: EnvelopeBasis<T>,
    pub eta: DVector<T>,
    pub omega: SymMatrix<T>,
    pub omega0: SymMatrix<T>,
    pub mu_x: DVector<T>,
}

impl<T: Real> CanonicalEnvelope<T> {
    pub fn natural(&self) -> NaturalParams<T> {
        let g = self.basis.gamma.matrix();
        let g0 = self.basis.gamma0.matrix();
        let sigma = g * self.omega.matrix() * g.transpose() + g0 * self.omega0.matrix() * g0.transpose();
        NaturalParams {
            mu: self.mu,
            beta: g * &self.eta,
            sigma_x: SymMatrix::symmetrize(sigma).expect("square"),
            mu_x: self.mu_x.clone(),
        }
    }
}

fn check_perm(perm: &[usize], p: usize) -> Result<()> {
    if perm.len() != p {
        return Err(EhrError::Dimension(format!("permutation of length {} for p = {p}", perm.len())));
    }
    let mut seen = vec![false; p];
    for &i in perm {
        if i >= p || seen[i] {
            return Err(EhrError::InvalidArgument("perm is not a permutation".into()));
        }
        seen[i] = true;
    }
    Ok(())
}

/// Raw bases `P[I; A]` and `P[-Aᵀ; I]`.
pub fn build_basis<T: Real>(a: &DMatrix<T>, perm: &[usize]) -> Result<(DMatrix<T>, DMatrix<T>)> {
    let (pu, u) = a.shape();
    let p = pu + u;
    check_perm(perm, p)?;
    Ok(build_basis_unchecked(a, perm))
}

pub(crate) fn build_basis_unchecked<T: Real>(a: &DMatrix<T>, perm: &[usize]) -> (DMatrix<T>, DMatrix<T>) {
    let (pu, u) = a.shape();
    let p = pu + u;
    let mut g = DMatrix::zeros(p, u);
    let mut g0 = DMatrix::zeros(p, pu);
    for r in 0..u {
        g[(perm[r], r)] = T::one();
        for c in 0..pu {
            g0[(perm[r], c)] = -a[(c, r)];
        }
    }
    for r in 0..pu {
        let row = perm[u + r];
        for c in 0..u {
            g[(row, c)] = a[(r, c)];
        }
        g0[(row, r)] = T::one();
    }
    (g, g0)
}

impl<T: Real> EnvelopeParams<T> {
    pub fn new(
        mu: T,
        eta: DVector<T>,
        a: DMatrix<T>,
        omega: SymMatrix<T>,
        omega0: SymMatrix<T>,
        mu_x: DVector<T>,
        perm: Vec<usize>,
    ) -> Result<Self> {
        let u = eta.len();
        let p = mu_x.len();
        if u == 0 || u > p {
            return Err(EhrError::InvalidArgument(format!("envelope dimension {u} outside 1..={p}")));
        }
        if a.shape() != (p - u, u) || omega.dim() != u || omega0.dim() != p - u {
            return Err(EhrError::Dimension("envelope parameter blocks disagree".into()));
        }
        check_perm(&perm, p)?;
        if !is_spd(omega.matrix()) || !is_spd(omega0.matrix()) {
            return Err(EhrError::InvalidArgument("Ω and Ω0 must be positive definite".into()));
        }
        Ok(Self {
            mu,
            eta,
            a,
            omega,
            omega0,
            mu_x,
            perm,
        })
    }

    pub fn p(&self) -> usize {
        self.mu_x.len()
    }

    pub fn u(&self) -> usize {
        self.eta.len()
    }

    pub fn raw_basis(&self) -> (DMatrix<T>, DMatrix<T>) {
        build_basis_unchecked(&self.a, &self.perm)
    }

    /// Free coordinates `(μ, η, vec A, logchol Ω, logchol Ω0, μx)` for the
    /// optimizer.
    pub fn to_free_coords(&self) -> Result<Vec<T>> {
        let mut out = Vec::with_capacity(chart_dim(self.p(), self.u()));
        out.push(self.mu);
        out.extend(self.eta.iter().copied());
        out.extend(self.a.iter().copied());
        out.extend(spd_to_log_chol(self.omega.matrix())?.iter().copied());
        if self.omega0.dim() > 0 {
            out.extend(spd_to_log_chol(self.omega0.matrix())?.iter().copied());
        }
        out.extend(self.mu_x.iter().copied());
        Ok(out)
    }

    /// Inverse of [`Self::to_free_coords`].
    pub fn from_free_coords(coords: &[T], p: usize, u: usize, perm: &[usize]) -> Result<Self> {
        if coords.len() != chart_dim(p, u) {
            return Err(EhrError::Dimension(format!(
                "chart for (p, u) = ({p}, {u}) has {} coordinates, got {}",
                chart_dim(p, u),
                coords.len()
            )));
        }
        check_perm(perm, p)?;
        let mut at = 0;
        let mut take = |len: usize| {
            let s = &coords[at..at + len];
            at += len;
            s
        };
        let mu = take(1)[0];
        let eta = DVector::from_column_slice(take(u));
        let a = DMatrix::from_column_slice(p - u, u, take((p - u) * u));
        let omega = log_chol_to_spd(take(vech_len(u)), u);
        let omega0 = log_chol_to_spd(take(vech_len(p - u)), p - u);
        let mu_x = DVector::from_column_slice(take(p));
        Ok(Self {
            mu,
            eta,
            a,
            omega: SymMatrix::symmetrize(omega)?,
            omega0: SymMatrix::symmetrize(omega0)?,
            mu_x,
            perm: perm.to_vec(),
        })
    }
}

/// `env(ζ)`: natural parameters implied by A-chart envelope parameters.
pub fn env_map<T: Real>(zeta: &EnvelopeParams<T>) -> Result<NaturalParams<T>> {
    if !is_spd(zeta.omega.matrix()) || !is_spd(zeta.omega0.matrix()) {
        return Err(EhrError::InvalidArgument("Ω and Ω0 must be positive definite".into()));
    }
    Ok(env_map_unchecked(zeta))
}

pub(crate) fn env_map_unchecked<T: Real>(zeta: &EnvelopeParams<T>) -> NaturalParams<T> {
    let (g, g0) = zeta.raw_basis();
    let sigma = &g * zeta.omega.matrix() * g.transpose() + &g0 * zeta.omega0.matrix() * g0.transpose();
    NaturalParams {
        mu: zeta.mu,
        beta: &g * &zeta.eta,
        sigma_x: SymMatrix::symmetrize(sigma).expect("square"),
        mu_x: zeta.mu_x.clone(),
    }
}

/// Orthonormalizes a raw basis pair and absorbs the triangular factors into
/// `η`, `Ω` and `Ω0`: with `Γ_raw = Γ R`, `η_c = R η`, `Ω_c = R Ω Rᵀ`.
pub fn canonicalize_basis<T: Real>(
    gamma_raw: &DMatrix<T>,
    gamma0_raw: &DMatrix<T>,
    eta: &DVector<T>,
    omega: &DMatrix<T>,
    omega0: &DMatrix<T>,
) -> Result<(EnvelopeBasis<T>, DVector<T>, SymMatrix<T>, SymMatrix<T>)> {
    let (g, r) = thin_qr(gamma_raw);
    let (g0, r0) = thin_qr(gamma0_raw);
    let tiny = T::machine_eps() * T::lit(1e3);
    for (rr, what) in [(&r, "Γ"), (&r0, "Γ0")] {
        let scale = rr.iter().fold(T::zero(), |a, v| a.max(v.abs()));
        for j in 0..rr.ncols() {
            if rr[(j, j)].abs() <= scale * tiny {
                return Err(EhrError::Singular(format!("raw {what} basis is rank deficient")));
            }
        }
    }
    let eta_c = &r * eta;
    let omega_c = SymMatrix::symmetrize(&r * omega * r.transpose())?;
    let omega0_c = SymMatrix::symmetrize(&r0 * omega0 * r0.transpose())?;
    let basis = EnvelopeBasis {
        gamma: SemiOrthMatrix::new_unchecked(g),
        gamma0: SemiOrthMatrix::new_unchecked(g0),
    };
    Ok((basis, eta_c, omega_c, omega0_c))
}

/// Semi-orthogonal form of A-chart parameters.
pub fn canonicalize<T: Real>(zeta: &EnvelopeParams<T>) -> Result<CanonicalEnvelope<T>> {
    let (g, g0) = zeta.raw_basis();
    let (basis, eta, omega, omega0) =
        canonicalize_basis(&g, &g0, &zeta.eta, zeta.omega.matrix(), zeta.omega0.matrix())?;
    Ok(CanonicalEnvelope {
        mu: zeta.mu,
        basis,
        eta,
        omega,
        omega0,
        mu_x: zeta.mu_x.clone(),
    })
}

/// Greedy row pivoting for the A-chart: repeatedly picks the row of `basis`
/// with the largest norm after projecting out the rows already chosen
/// (column-pivoted Gram-Schmidt on `basisᵀ`). Ties go to the lower index.
pub fn pivot_rows<T: Real>(basis: &DMatrix<T>) -> Vec<usize> {
    let (p, u) = basis.shape();
    let mut work = basis.clone();
    let mut chosen = Vec::with_capacity(p);
    let mut used = vec![false; p];
    for _ in 0..u {
        let mut best = None;
        let mut best_norm = -T::one();
        for r in 0..p {
            if used[r] {
                continue;
            }
            let nrm = work.row(r).norm_squared();
            if nrm > best_norm {
                best_norm = nrm;
                best = Some(r);
            }
        }
        let r = best.expect("u <= p");
        used[r] = true;
        chosen.push(r);
        let dir = work.row(r).transpose();
        let nn = dir.norm_squared();
        if nn > T::zero() {
            for s in 0..p {
                if !used[s] {
                    let coef = (work.row(s) * &dir)[0] / nn;
                    let upd = work.row(s) - dir.transpose() * coef;
                    work.set_row(s, &upd);
                }
            }
        }
    }
    chosen.extend((0..p).filter(|r| !used[*r]));
    chosen
}

/// `A = Γ₂ Γ₁⁻¹` for a basis whose pivoted leading block `Γ₁` is invertible.
pub fn a_from_basis<T: Real>(basis: &DMatrix<T>, perm: &[usize]) -> Result<DMatrix<T>> {
    let (p, u) = basis.shape();
    check_perm(perm, p)?;
    let g1 = DMatrix::from_fn(u, u, |r, c| basis[(perm[r], c)]);
    let g2 = DMatrix::from_fn(p - u, u, |r, c| basis[(perm[u + r], c)]);
    let inv = g1
        .try_inverse()
        .ok_or_else(|| EhrError::Singular("leading block of the pivoted basis is singular".into()))?;
    Ok(g2 * inv)
}

/// Coordinates of `M` in a (possibly non-orthonormal) basis `B`:
/// `(BᵀB)⁻¹ Bᵀ M B (BᵀB)⁻¹`.
pub(crate) fn coordinates_in_basis<T: Real>(b: &DMatrix<T>, m: &DMatrix<T>) -> Result<DMatrix<T>> {
    if b.ncols() == 0 {
        return Ok(DMatrix::zeros(0, 0));
    }
    let ginv = spd_inverse(&(b.transpose() * b))?;
    let out = &ginv * b.transpose() * m * b * &ginv;
    Ok((&out + out.transpose()) * T::lit(0.5))
}

/// Expresses semi-orthogonal envelope parameters in the A-chart, choosing the
/// row pivot from `Γ`.
pub fn to_a_chart<T: Real>(env: &CanonicalEnvelope<T>) -> Result<EnvelopeParams<T>> {
    let g = env.basis.gamma.matrix();
    let perm = pivot_rows(g);
    to_a_chart_with_perm(env, perm)
}

pub fn to_a_chart_with_perm<T: Real>(env: &CanonicalEnvelope<T>, perm: Vec<usize>) -> Result<EnvelopeParams<T>> {
    let g = env.basis.gamma.matrix();
    let g0 = env.basis.gamma0.matrix();
    let a = a_from_basis(g, &perm)?;
    let (b, b0) = build_basis_unchecked(&a, &perm);
    let sigma_in = g * env.omega.matrix() * g.transpose();
    let sigma_out = g0 * env.omega0.matrix() * g0.transpose();
    let omega = coordinates_in_basis(&b, &sigma_in)?;
    let omega0 = coordinates_in_basis(&b0, &sigma_out)?;
    let beta = g * &env.eta;
    let ginv = spd_inverse(&(b.transpose() * &b))?;
    let eta = &ginv * b.transpose() * beta;
    EnvelopeParams::new(
        env.mu,
        eta,
        a,
        SymMatrix::symmetrize(omega)?,
        SymMatrix::symmetrize(omega0)?,
        env.mu_x.clone(),
        perm,
    )
}

/// Closed-form Jacobian `∂ env(ζ) / ∂ζᵀ` at semi-orthogonal parameters.
///
/// Rows follow `(μ, β, vech Σx, μx)`; columns follow
/// `(μ, η, vec Γ, vech Ω, vech Ω0, μx)`.
pub fn jacobian_psi1<T: Real>(
    basis: &EnvelopeBasis<T>,
    eta: &DVector<T>,
    omega: &DMatrix<T>,
    omega0: &DMatrix<T>,
) -> Result<DMatrix<T>> {
    let p = basis.p();
    let u = basis.u();
    let pu = p - u;
    if eta.len() != u || omega.shape() != (u, u) || omega0.shape() != (pu, pu) {
        return Err(EhrError::Dimension("Jacobian inputs disagree with the basis".into()));
    }
    let g = basis.gamma.matrix();
    let g0 = basis.gamma0.matrix();
    let q = vech_len(p);
    let qu = vech_len(u);
    let q0 = vech_len(pu);
    let rows = theta_dim(p);
    let cols = zeta_dim(p, u);
    let mut j = DMatrix::zeros(rows, cols);

    // column offsets
    let c_eta = 1;
    let c_gamma = c_eta + u;
    let c_omega = c_gamma + p * u;
    let c_omega0 = c_omega + qu;
    let c_mux = c_omega0 + q0;
    // row offsets
    let r_beta = 1;
    let r_sigma = r_beta + p;
    let r_mux = r_sigma + q;

    j[(0, 0)] = T::one();
    j.view_mut((r_beta, c_eta), (p, u)).copy_from(g);
    let eta_row = DMatrix::from_row_slice(1, u, eta.as_slice());
    j.view_mut((r_beta, c_gamma), (p, p * u))
        .copy_from(&kron(&eta_row, &DMatrix::identity(p, p)));

    let cp = contraction::<T>(p);
    let two = T::lit(2.0);
    let outer0 = g0 * omega0 * g0.transpose();
    let d_gamma = (kron(&(g * omega), &DMatrix::identity(p, p)) - kron(g, &outer0)) * two;
    j.view_mut((r_sigma, c_gamma), (q, p * u)).copy_from(&(&cp * d_gamma));
    if u > 0 {
        let eu = expansion::<T>(u);
        j.view_mut((r_sigma, c_omega), (q, qu))
            .copy_from(&(&cp * kron(g, g) * eu));
    }
    if pu > 0 {
        let e0 = expansion::<T>(pu);
        j.view_mut((r_sigma, c_omega0), (q, q0))
            .copy_from(&(&cp * kron(g0, g0) * e0));
    }
    j.view_mut((r_mux, c_mux), (p, p)).fill_with_identity();
    Ok(j)
}

/// Central finite-difference Jacobian of `env` in A-chart coordinates
/// `(μ, η, vec A, vech Ω, vech Ω0, μx)`, with `Ω`, `Ω0` perturbed entrywise
/// through `vech`.
pub fn jacobian_fd_a_chart<T: Real>(zeta: &EnvelopeParams<T>, step: T) -> DMatrix<T> {
    let p = zeta.p();
    let u = zeta.u();
    let base = flat_chart(zeta);
    let cols = base.len();
    let mut jac = DMatrix::zeros(theta_dim(p), cols);
    let two = T::lit(2.0);
    for c in 0..cols {
        let mut plus = base.clone();
        let mut minus = base.clone();
        plus[c] += step;
        minus[c] -= step;
        let tp = env_map_unchecked(&unflat_chart(&plus, p, u, &zeta.perm)).to_vector();
        let tm = env_map_unchecked(&unflat_chart(&minus, p, u, &zeta.perm)).to_vector();
        jac.set_column(c, &((tp - tm) / (two * step)));
    }
    jac
}

fn flat_chart<T: Real>(z: &EnvelopeParams<T>) -> Vec<T> {
    let mut out = vec![z.mu];
    out.extend(z.eta.iter().copied());
    out.extend(z.a.iter().copied());
    out.extend(vech(z.omega.matrix()).expect("square").iter().copied());
    out.extend(vech(z.omega0.matrix()).expect("square").iter().copied());
    out.extend(z.mu_x.iter().copied());
    out
}

fn unflat_chart<T: Real>(v: &[T], p: usize, u: usize, perm: &[usize]) -> EnvelopeParams<T> {
    let mut at = 0;
    let mut take = |len: usize| {
        let s = &v[at..at + len];
        at += len;
        s
    };
    let mu = take(1)[0];
    let eta = DVector::from_column_slice(take(u));
    let a = DMatrix::from_column_slice(p - u, u, take((p - u) * u));
    let omega = unvech(&DVector::from_column_slice(take(vech_len(u))), u).expect("length");
    let omega0 = unvech(&DVector::from_column_slice(take(vech_len(p - u))), p - u).expect("length");
    let mu_x = DVector::from_column_slice(take(p));
    EnvelopeParams {
        mu,
        eta,
        a,
        omega: SymMatrix::new(omega).expect("symmetric"),
        omega0: SymMatrix::new(omega0).expect("symmetric"),
        mu_x,
        perm: perm.to_vec(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::{max_abs, orthonormal_complement, pinv, projection};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha20Rng;

    fn rand_mat(r: usize, c: usize, rng: &mut ChaCha20Rng) -> DMatrix<f64> {
        DMatrix::from_fn(r, c, |_, _| rng.random_range(-1.0..1.0))
    }

    fn rand_spd(d: usize, rng: &mut ChaCha20Rng) -> SymMatrix<f64> {
        let b = rand_mat(d, d, rng);
        SymMatrix::symmetrize(&b * b.transpose() + DMatrix::identity(d, d) * 0.5).unwrap()
    }

    fn rand_zeta(p: usize, u: usize, rng: &mut ChaCha20Rng) -> EnvelopeParams<f64> {
        let mut perm: Vec<usize> = (0..p).collect();
        for i in (1..p).rev() {
            let j = rng.random_range(0..=i);
            perm.swap(i, j);
        }
        EnvelopeParams::new(
            rng.random_range(-1.0..1.0),
            DVector::from_fn(u, |_, _| rng.random_range(-2.0..2.0)),
            rand_mat(p - u, u, rng),
            rand_spd(u, rng),
            rand_spd(p - u, rng),
            DVector::from_fn(p, |_, _| rng.random_range(-1.0..1.0)),
            perm,
        )
        .unwrap()
    }

    fn rand_canonical(p: usize, u: usize, rng: &mut ChaCha20Rng) -> CanonicalEnvelope<f64> {
        let g = SemiOrthMatrix::new(crate::linalg::thin_q(&rand_mat(p, u, rng))).unwrap();
        let g0 = orthonormal_complement(&g);
        CanonicalEnvelope {
            mu: 0.3,
            basis: EnvelopeBasis { gamma: g, gamma0: g0 },
            eta: DVector::from_fn(u, |_, _| rng.random_range(-2.0..2.0)),
            omega: rand_spd(u, rng),
            omega0: rand_spd(p - u, rng),
            mu_x: DVector::from_fn(p, |_, _| rng.random_range(-1.0..1.0)),
        }
    }

    #[test]
    fn basis_zero_a() {
        let a = DMatrix::<f64>::zeros(3, 2);
        let (g, g0) = build_basis(&a, &[0, 1, 2, 3, 4]).unwrap();
        let mut ei = DMatrix::zeros(5, 2);
        ei[(0, 0)] = 1.0;
        ei[(1, 1)] = 1.0;
        assert_eq!(g, ei);
        let mut e0 = DMatrix::zeros(5, 3);
        for i in 0..3 {
            e0[(2 + i, i)] = 1.0;
        }
        assert_eq!(g0, e0);
    }

    #[test]
    fn basis_full_space() {
        let a = DMatrix::<f64>::zeros(0, 3);
        let (g, g0) = build_basis(&a, &[0, 1, 2]).unwrap();
        assert_eq!(g, DMatrix::identity(3, 3));
        assert_eq!(g0.ncols(), 0);
    }

    #[test]
    fn basis_block_orthogonality() {
        let mut rng = ChaCha20Rng::seed_from_u64(21);
        for _ in 0..20 {
            let a = rand_mat(3, 2, &mut rng) * 3.0;
            let (g, g0) = build_basis(&a, &[4, 2, 0, 1, 3]).unwrap();
            assert!(max_abs(&(g.transpose() * g0)) < 1e-12);
        }
        assert!(build_basis(&DMatrix::<f64>::zeros(3, 2), &[0, 1, 2, 3, 3]).is_err());
    }

    #[test]
    fn env_map_examples() {
        let z = EnvelopeParams::new(
            0.0,
            DVector::from_vec(vec![1.0, 0.0]),
            DMatrix::zeros(1, 2),
            SymMatrix::identity(2),
            SymMatrix::identity(1),
            DVector::zeros(3),
            vec![0, 1, 2],
        )
        .unwrap();
        let th = env_map(&z).unwrap();
        assert_eq!(th.beta.as_slice(), &[1.0, 0.0, 0.0]);
        assert_eq!(th.sigma_x.matrix(), &DMatrix::identity(3, 3));

        let mut rng = ChaCha20Rng::seed_from_u64(22);
        let om = rand_spd(3, &mut rng);
        let z = EnvelopeParams::new(
            1.0,
            DVector::from_vec(vec![0.5, -1.0, 2.0]),
            DMatrix::zeros(0, 3),
            om.clone(),
            SymMatrix::identity(0),
            DVector::zeros(3),
            vec![2, 0, 1],
        )
        .unwrap();
        let th = env_map(&z).unwrap();
        // perm only relabels rows of the identity: β and Σ are permuted copies
        let (g, _) = z.raw_basis();
        assert!(max_abs(&(th.sigma_x.matrix() - &g * om.matrix() * g.transpose())) < 1e-14);
        assert!((&th.beta - &g * &z.eta).amax() < 1e-14);

        let identity_chart = EnvelopeParams::new(
            1.0,
            DVector::from_vec(vec![0.5, -1.0, 2.0]),
            DMatrix::zeros(0, 3),
            om.clone(),
            SymMatrix::identity(0),
            DVector::zeros(3),
            vec![0, 1, 2],
        )
        .unwrap();
        let th = env_map(&identity_chart).unwrap();
        assert_eq!(th.beta.as_slice(), &[0.5, -1.0, 2.0]);
        assert_eq!(th.sigma_x.matrix(), om.matrix());
    }

    #[test]
    fn reducing_subspace_property() {
        let mut rng = ChaCha20Rng::seed_from_u64(23);
        for _ in 0..10 {
            let z = rand_zeta(6, 2, &mut rng);
            let th = env_map(&z).unwrap();
            let (g, _) = z.raw_basis();
            let pg = projection(&g).unwrap();
            let qg = DMatrix::identity(6, 6) - &pg;
            assert!(max_abs(&(&qg * th.sigma_x.matrix() * &pg)) < 1e-9);
        }
    }

    #[test]
    fn canonicalize_preserves_env() {
        let mut rng = ChaCha20Rng::seed_from_u64(24);
        for _ in 0..10 {
            let z = rand_zeta(6, 2, &mut rng);
            let (g_raw, _) = z.raw_basis();
            let c = canonicalize(&z).unwrap();
            let g = c.basis.gamma.matrix();
            assert!((g * &c.eta - &g_raw * &z.eta).amax() < 1e-10);
            assert!(
                max_abs(&(g * c.omega.matrix() * g.transpose() - &g_raw * z.omega.matrix() * g_raw.transpose()))
                    < 1e-10
            );
            let before = env_map(&z).unwrap();
            let after = c.natural();
            assert!(max_abs(&(before.sigma_x.matrix() - after.sigma_x.matrix())) < 1e-10);
            assert!(max_abs(&(g.transpose() * c.basis.gamma0.matrix())) < 1e-10);
        }
    }

    #[test]
    fn canonicalize_zero_a_is_identity() {
        let mut rng = ChaCha20Rng::seed_from_u64(25);
        let mut z = rand_zeta(5, 2, &mut rng);
        z.a = DMatrix::zeros(3, 2);
        z.perm = (0..5).collect();
        let c = canonicalize(&z).unwrap();
        let mut top = DMatrix::zeros(5, 2);
        top[(0, 0)] = 1.0;
        top[(1, 1)] = 1.0;
        assert!(max_abs(&(c.basis.gamma.matrix() - top)) < 1e-15);
        assert!((&c.eta - &z.eta).amax() < 1e-15);
        assert!(max_abs(&(c.omega.matrix() - z.omega.matrix())) < 1e-15);
    }

    #[test]
    fn canonicalize_is_idempotent() {
        let mut rng = ChaCha20Rng::seed_from_u64(26);
        let z = rand_zeta(6, 3, &mut rng);
        let c = canonicalize(&z).unwrap();
        let (b2, e2, o2, o02) = canonicalize_basis(
            c.basis.gamma.matrix(),
            c.basis.gamma0.matrix(),
            &c.eta,
            c.omega.matrix(),
            c.omega0.matrix(),
        )
        .unwrap();
        assert!(max_abs(&(b2.gamma.matrix() - c.basis.gamma.matrix())) < 1e-12);
        assert!(max_abs(&(b2.gamma0.matrix() - c.basis.gamma0.matrix())) < 1e-12);
        assert!((&e2 - &c.eta).amax() < 1e-12);
        assert!(max_abs(&(o2.matrix() - c.omega.matrix())) < 1e-12);
        assert!(max_abs(&(o02.matrix() - c.omega0.matrix())) < 1e-12);
    }

    #[test]
    fn a_chart_roundtrip() {
        let mut rng = ChaCha20Rng::seed_from_u64(27);
        for _ in 0..10 {
            let c = rand_canonical(6, 2, &mut rng);
            let z = to_a_chart(&c).unwrap();
            let th_a = env_map(&z).unwrap();
            let th_c = c.natural();
            assert!((th_a.to_vector() - th_c.to_vector()).amax() < 1e-10);
        }
    }

    #[test]
    fn free_coords_roundtrip() {
        let mut rng = ChaCha20Rng::seed_from_u64(28);
        let z = rand_zeta(5, 2, &mut rng);
        let coords = z.to_free_coords().unwrap();
        assert_eq!(coords.len(), chart_dim(5, 2));
        let back = EnvelopeParams::from_free_coords(&coords, 5, 2, &z.perm).unwrap();
        assert!((env_map(&back).unwrap().to_vector() - env_map(&z).unwrap().to_vector()).amax() < 1e-12);
    }

    #[test]
    fn jacobian_identity_basis() {
        let p = 3;
        let basis = EnvelopeBasis::new(DMatrix::<f64>::identity(p, p), DMatrix::zeros(p, 0)).unwrap();
        let eta = DVector::from_vec(vec![1.0, -2.0, 0.5]);
        let j = jacobian_psi1(&basis, &eta, &DMatrix::identity(p, p), &DMatrix::zeros(0, 0)).unwrap();
        let beta_block = j.view((1, 1), (p, p)).into_owned();
        assert_eq!(beta_block, DMatrix::identity(p, p));
        let kr = j.view((1, 1 + p), (p, p * p)).into_owned();
        let expect = kron(&DMatrix::from_row_slice(1, p, eta.as_slice()), &DMatrix::identity(p, p));
        assert_eq!(kr, expect);
    }

    #[test]
    fn jacobian_corner_blocks() {
        let mut rng = ChaCha20Rng::seed_from_u64(29);
        let c = rand_canonical(4, 1, &mut rng);
        let j = jacobian_psi1(&c.basis, &c.eta, c.omega.matrix(), c.omega0.matrix()).unwrap();
        assert_eq!(j[(0, 0)], 1.0);
        let (r, cc) = j.shape();
        let tail = j.view((r - 4, cc - 4), (4, 4)).into_owned();
        assert_eq!(tail, DMatrix::identity(4, 4));
        assert_eq!(r, theta_dim(4));
        assert_eq!(cc, zeta_dim(4, 1));
    }

    /// Derivative of env along a tangent direction of the semi-orthogonal
    /// chart: `Γ(t) = Γ + t dΓ`, `Γ0(t)` re-derived from `Γ(t)` to first order.
    #[test]
    fn jacobian_matches_tangent_finite_differences() {
        let mut rng = ChaCha20Rng::seed_from_u64(30);
        let p = 3;
        let u = 1;
        let c = rand_canonical(p, u, &mut rng);
        let g = c.basis.gamma.matrix().clone();
        let g0 = c.basis.gamma0.matrix().clone();
        let jac = jacobian_psi1(&c.basis, &c.eta, c.omega.matrix(), c.omega0.matrix()).unwrap();
        let h = 1e-6;
        let eval = |g: &DMatrix<f64>, g0: &DMatrix<f64>, eta: &DVector<f64>, om: &DMatrix<f64>, om0: &DMatrix<f64>| {
            let sigma = g * om * g.transpose() + g0 * om0 * g0.transpose();
            NaturalParams {
                mu: c.mu,
                beta: g * eta,
                sigma_x: SymMatrix::symmetrize(sigma).unwrap(),
                mu_x: c.mu_x.clone(),
            }
            .to_vector()
        };
        // tangent directions dΓ = Γ0 B
        for k in 0..(p - u) {
            let mut b = DMatrix::zeros(p - u, u);
            b[(k, 0)] = 1.0;
            let dg = &g0 * &b;
            let dg0 = -&g * b.transpose();
            let tp = eval(&(&g + &dg * h), &(&g0 + &dg0 * h), &c.eta, c.omega.matrix(), c.omega0.matrix());
            let tm = eval(&(&g - &dg * h), &(&g0 - &dg0 * h), &c.eta, c.omega.matrix(), c.omega0.matrix());
            let fd = (tp - tm) / (2.0 * h);
            let off = 1 + u;
            let closed = jac.view((0, off), (jac.nrows(), p * u)) * crate::linalg::vec_of(&dg);
            let rel = (&fd - &closed).amax() / fd.amax().max(1e-12);
            assert!(rel < 1e-6, "relative error {rel}");
        }
        // plain coordinates η, Ω, Ω0, μ, μx
        let base = eval(&g, &g0, &c.eta, c.omega.matrix(), c.omega0.matrix());
        let col_eta = jac.column(1).into_owned();
        let mut e2 = c.eta.clone();
        e2[0] += h;
        let fd = (eval(&g, &g0, &e2, c.omega.matrix(), c.omega0.matrix()) - &base) / h;
        assert!((&fd - &col_eta).amax() < 1e-6);
        let off_om0 = 1 + u + p * u + vech_len(u);
        for (k, (i, jj)) in [(0usize, (0usize, 0usize)), (1, (1, 0)), (2, (1, 1))].into_iter() {
            let mut om0p = c.omega0.matrix().clone();
            let mut om0m = c.omega0.matrix().clone();
            om0p[(i, jj)] += h;
            om0m[(i, jj)] -= h;
            if i != jj {
                om0p[(jj, i)] += h;
                om0m[(jj, i)] -= h;
            }
            let fd = (eval(&g, &g0, &c.eta, c.omega.matrix(), &om0p) - eval(&g, &g0, &c.eta, c.omega.matrix(), &om0m))
                / (2.0 * h);
            assert!((&fd - jac.column(off_om0 + k)).amax() < 1e-6);
        }
    }

    /// The projected covariance depends only on the column space of the
    /// Jacobian, so the closed form and A-chart finite differences agree.
    #[test]
    fn jacobian_column_space_matches_a_chart() {
        let mut rng = ChaCha20Rng::seed_from_u64(31);
        for &(p, u) in &[(3usize, 1usize), (4, 2), (5, 2)] {
            let c = rand_canonical(p, u, &mut rng);
            let z = to_a_chart(&c).unwrap();
            let closed = jacobian_psi1(&c.basis, &c.eta, c.omega.matrix(), c.omega0.matrix()).unwrap();
            let fd = jacobian_fd_a_chart(&z, 1e-5);
            let d = theta_dim(p);
            let b = rand_mat(d, d, &mut rng);
            let ups = &b * b.transpose() + DMatrix::identity(d, d);
            let ups_inv = ups.clone().try_inverse().unwrap();
            let proj = |psi: &DMatrix<f64>| {
                let inner = psi.transpose() * &ups_inv * psi;
                psi * pinv(&inner, 1e-10).unwrap() * psi.transpose()
            };
            let a = proj(&closed);
            let bm = proj(&fd);
            let rel = max_abs(&(&a - &bm)) / max_abs(&a);
            assert!(rel < 1e-6, "p={p} u={u}: {rel}");
        }
    }

    #[test]
    fn pivoting_prefers_well_conditioned_rows() {
        let g = nalgebra::dmatrix![0.0; 1e-3; 1.0; 0.0];
        let g = crate::linalg::thin_q(&g);
        let perm = pivot_rows(&g);
        assert_eq!(perm[0], 2);
        assert_eq!(perm.len(), 4);
        let mut sorted = perm.clone();
        sorted.sort();
        assert_eq!(sorted, vec![0, 1, 2, 3]);
    }
}
