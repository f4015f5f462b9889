//! The two-step envelope GMM estimator.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::asymptotics::{projected_avar, sandwich_avar};
use crate::envelope::{
    a_from_basis, build_basis_unchecked, canonicalize, chart_dim, coordinates_in_basis, env_map_unchecked,
    jacobian_psi1, pivot_rows, CanonicalEnvelope, EnvelopeParams, NaturalParams,
};
use crate::error::{EhrError, Result};
use crate::gmm::moments::{moment_dim, quad_form, sample_moment_parts, weight_matrix, MomentCache, WeightMatrix, DEFAULT_RIDGE_EPS};
use crate::gmm::nelder_mead::{
    nelder_mead_with_offsets, nelder_mead_with_steps, Minimum, NelderMeadOptions, OptimizerMeta, StopReason,
};
use crate::gmm::pls::{coefficient_krylov_start, eigen_signal_start, pls_initializer};
use crate::linalg::{log_chol_to_spd, spd_inverse, sym_eigen, vech_len, SymMatrix};
use crate::robust::{gee_solution_for, select_k, Dataset, GeeSolution, Score};
use crate::scalar::Real;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FitOptions {
    pub nelder_mead: NelderMeadOptions,
    /// Shape the simplex by the Gauss-Newton curvature, re-shaping it
    /// periodically; otherwise use axis steps in the raw chart.
    pub whiten: bool,
    /// Initial simplex step for the log-diagonal Cholesky coordinates
    /// (raw chart only).
    pub log_diag_step: f64,
    pub ridge_eps: f64,
    /// Search only where the fitted values' sample variance `βᵀ Sx β` is
    /// at most this multiple of the sample variance of `y`. With a bounded
    /// score the objective flattens out as `β` grows, and on small samples
    /// that plateau can undercut the proper local minimum.
    pub fitted_var_cap: Option<f64>,
    /// Fixed Huber threshold; `None` applies the rule of thumb.
    pub k: Option<f64>,
    pub compute_avar: bool,
}

impl Default for FitOptions {
    fn default() -> Self {
        Self {
            nelder_mead: NelderMeadOptions::default(),
            whiten: true,
            log_diag_step: 0.05,
            ridge_eps: DEFAULT_RIDGE_EPS,
            fitted_var_cap: Some(100.0),
            k: None,
            compute_avar: true,
        }
    }
}

/// Starting subspace for the optimizer; `perm` overrides the row pivot.
#[derive(Debug, Clone, PartialEq)]
pub struct StartingSubspace<T: Real> {
    pub basis: DMatrix<T>,
    pub perm: Option<Vec<usize>>,
}

#[derive(Debug, Clone)]
pub struct FitResult<T: Real> {
    pub zeta_hat: EnvelopeParams<T>,
    pub envelope: CanonicalEnvelope<T>,
    pub theta_hat: NaturalParams<T>,
    pub u: usize,
    pub objective: T,
    pub initial_objective: T,
    /// `avar(√n θ̂)` along `(μ, β, vech Σx, μx)`.
    pub avar: Option<SymMatrix<T>>,
    pub k: Option<T>,
    pub score: Score<T>,
    pub gee: GeeSolution<T>,
    pub weight: WeightMatrix<T>,
    /// The starting basis had to be completed with eigenvectors of `Sx`.
    pub init_padded: bool,
    pub optimizer: OptimizerMeta,
}

impl<T: Real> FitResult<T> {
    pub fn mu(&self) -> T {
        self.theta_hat.mu
    }

    pub fn beta(&self) -> &DVector<T> {
        &self.theta_hat.beta
    }

    /// Asymptotic standard errors of `β̂` (`√(avar_jj / n)`).
    pub fn beta_se(&self, n: usize) -> Option<DVector<T>> {
        let avar = self.avar.as_ref()?;
        let p = self.theta_hat.p();
        let nf = T::from_usize_lossy(n);
        Some(DVector::from_fn(p, |j, _| (avar.matrix()[(1 + j, 1 + j)].max(T::zero()) / nf).sqrt()))
    }
}

/// Enveloped Huber regression at dimension `u`.
pub fn fit_ehr<T: Real>(data: &Dataset<T>, u: usize, opts: &FitOptions) -> Result<FitResult<T>> {
    let k = match opts.k {
        Some(k) => T::lit(k),
        None => select_k(data)?.spec.k,
    };
    fit_envelope(data, u, Score::Huber { k }, opts, None)
}

/// Least-squares envelope GMM: the same pipeline with the identity score.
/// A convenient normal-theory comparison, not the envelope likelihood
/// estimator.
pub fn fit_env_ls<T: Real>(data: &Dataset<T>, u: usize, opts: &FitOptions) -> Result<FitResult<T>> {
    fit_envelope(data, u, Score::Identity, opts, None)
}

/// Objective in free A-chart coordinates with everything but `ζ` fixed.
pub(crate) struct ChartObjective<'a, T: Real> {
    data: &'a Dataset<T>,
    cache: MomentCache<T>,
    delta: &'a DMatrix<T>,
    score: Score<T>,
    u: usize,
    perm: &'a [usize],
    /// Largest admissible `βᵀ Sx β`.
    fitted_var_cap: Option<T>,
}

impl<'a, T: Real> ChartObjective<'a, T> {
    pub(crate) fn new(data: &'a Dataset<T>, delta: &'a DMatrix<T>, score: Score<T>, u: usize, perm: &'a [usize]) -> Self {
        Self {
            data,
            cache: MomentCache::new(data.x()),
            delta,
            score,
            u,
            perm,
            fitted_var_cap: None,
        }
    }

    /// Restricts the search to `βᵀ Sx β ≤ ratio · s²_y`.
    fn with_fitted_var_cap(mut self, ratio: Option<f64>) -> Self {
        self.fitted_var_cap = ratio.map(|r| {
            let y = self.data.y();
            let n = T::from_usize_lossy(y.len());
            let m = y.sum() / n;
            let ss = y.iter().fold(T::zero(), |a, &v| a + (v - m) * (v - m));
            T::lit(r) * ss / (n - T::one())
        });
        self
    }

    pub(crate) fn value(&self, c: &[T]) -> T {
        if let Some(cap) = self.fitted_var_cap {
            let (_, beta, _, _) = self.natural(c);
            if (&self.cache.s_x * &beta).dot(&beta) > cap {
                return T::lit(f64::INFINITY);
            }
        }
        let v = quad_form(&self.moments(c), self.delta);
        if v.is_finite_val() {
            v
        } else {
            T::lit(f64::INFINITY)
        }
    }

    /// `G_n` at the chart point `c`.
    pub(crate) fn moments(&self, c: &[T]) -> DVector<T> {
        let (mu, beta, sigma, mu_x) = self.natural(c);
        sample_moment_parts(self.data.y(), self.data.x(), &self.cache, mu, &beta, &sigma, &mu_x, self.score)
    }

    /// `(μ, β, Σx, μx)` at the chart point `c`.
    fn natural(&self, c: &[T]) -> (T, DVector<T>, DMatrix<T>, DVector<T>) {
        let p = self.data.p();
        let u = self.u;
        let pu = p - u;
        let mut at = 1;
        let mu = c[0];
        let eta = DVector::from_column_slice(&c[at..at + u]);
        at += u;
        let a = DMatrix::from_column_slice(pu, u, &c[at..at + pu * u]);
        at += pu * u;
        let om = log_chol_to_spd(&c[at..at + vech_len(u)], u);
        at += vech_len(u);
        let om0 = log_chol_to_spd(&c[at..at + vech_len(pu)], pu);
        at += vech_len(pu);
        let mu_x = DVector::from_column_slice(&c[at..at + p]);
        let (g, g0) = build_basis_unchecked(&a, self.perm);
        let sigma = &g * om * g.transpose() + &g0 * om0 * g0.transpose();
        let beta = &g * eta;
        (mu, beta, sigma, mu_x)
    }

    /// Central-difference Jacobian of `G_n` in chart coordinates.
    fn moment_jacobian(&self, c: &[T]) -> DMatrix<T> {
        let mut jac = DMatrix::zeros(moment_dim(self.data.p()), c.len());
        let mut probe = c.to_vec();
        for i in 0..c.len() {
            let h = T::lit(1e-6) * c[i].abs().max(T::one());
            probe[i] = c[i] + h;
            let up = self.moments(&probe);
            probe[i] = c[i] - h;
            let down = self.moments(&probe);
            probe[i] = c[i];
            jac.set_column(i, &((up - down) / (h + h)));
        }
        jac
    }
}

/// Iterations, per coordinate, between re-shapings of the simplex.
const RESHAPE_BLOCK: usize = 100;

/// Nelder-Mead whose simplex is rebuilt from the local curvature every
/// `RESHAPE_BLOCK · d` iterations and at every restart. The total iteration
/// cap and the restart rule are those of [`nelder_mead_with_offsets`].
fn shaped_nelder_mead<T: Real>(
    objective: &ChartObjective<'_, T>,
    x0: &[T],
    opts: &NelderMeadOptions,
) -> Result<Minimum<T>> {
    let d = x0.len();
    let total = opts.iteration_cap(d);
    let step = T::lit(opts.step);
    let mut edges = curvature_edges(objective, x0, step)?;
    let mut x = x0.to_vec();
    let mut f = objective.value(x0);
    let mut meta = OptimizerMeta {
        iterations: 0,
        evaluations: 1,
        restarts: 0,
        converged: false,
        stop: StopReason::MaxIterations,
    };
    let mut phase_start = f;
    while meta.iterations < total {
        let block = NelderMeadOptions {
            max_iter: Some((RESHAPE_BLOCK * d).min(total - meta.iterations)),
            restarts: 0,
            ..opts.clone()
        };
        let run = nelder_mead_with_offsets(|c| objective.value(c), &x, &edges, &block);
        meta.iterations += run.meta.iterations;
        meta.evaluations += run.meta.evaluations;
        if run.f <= f {
            x = run.x;
            f = run.f;
        }
        // a degenerate curvature keeps the previous shape
        if let Ok(e) = curvature_edges(objective, &x, step) {
            edges = e;
        }
        if run.meta.stop == StopReason::MaxIterations {
            continue;
        }
        let improved = phase_start - f;
        if meta.restarts == opts.restarts || (meta.restarts > 0 && !(improved > T::lit(opts.ftol))) {
            meta.converged = true;
            meta.stop = run.meta.stop;
            break;
        }
        meta.restarts += 1;
        phase_start = f;
    }
    Ok(Minimum { x, f, meta })
}

/// Curvature eigenvalues below this fraction of the largest are floored.
const CURVATURE_FLOOR: f64 = 1e-12;

/// Simplex edges `step · vⱼ / √λⱼ` from the eigenpairs of the Gauss-Newton
/// curvature `JᵀΔJ` at `origin`. The simplex then starts round in the
/// metric of the local quadratic model, however unevenly the moment
/// blocks are weighted; since the simplex moves are affine this is the
/// same as searching whitened coordinates.
fn curvature_edges<T: Real>(objective: &ChartObjective<'_, T>, origin: &[T], step: T) -> Result<Vec<Vec<T>>> {
    let jac = objective.moment_jacobian(origin);
    let h = jac.transpose() * objective.delta * &jac;
    let h = (&h + h.transpose()) * T::lit(0.5);
    let (vals, vecs) = sym_eigen(&h)?;
    let top = vals.iter().fold(T::zero(), |a, &v| a.max(v));
    if !(top > T::zero()) || !top.is_finite_val() {
        return Err(EhrError::Numerical("objective curvature vanishes at the starting values".into()));
    }
    let floor = top * T::lit(CURVATURE_FLOOR);
    Ok(vals
        .iter()
        .enumerate()
        .map(|(j, &v)| {
            let s = step / v.max(floor).sqrt();
            vecs.column(j).iter().map(|&e| e * s).collect()
        })
        .collect())
}

/// Initial envelope parameters: the start basis in the A-chart, with `η`,
/// `Ω`, `Ω0` from projecting `β̃` and `Sx` onto it.
fn initial_params<T: Real>(
    gee: &GeeSolution<T>,
    basis: &DMatrix<T>,
    perm: Vec<usize>,
) -> Result<EnvelopeParams<T>> {
    let a = a_from_basis(basis, &perm)?;
    let (b, b0) = build_basis_unchecked(&a, &perm);
    let sx = gee.theta.sigma_x.matrix();
    let omega = coordinates_in_basis(&b, sx)?;
    let omega0 = coordinates_in_basis(&b0, sx)?;
    let eta = spd_inverse(&(b.transpose() * &b))? * b.transpose() * &gee.theta.beta;
    EnvelopeParams::new(
        gee.theta.mu,
        eta,
        a,
        SymMatrix::symmetrize(omega)?,
        SymMatrix::symmetrize(omega0)?,
        gee.theta.mu_x.clone(),
        perm,
    )
    .map_err(|e| EhrError::Numerical(format!("starting values: {e}")))
}

fn chart_steps(p: usize, u: usize, step: f64, log_step: f64) -> Vec<f64> {
    let mut steps = vec![step; chart_dim(p, u)];
    let mut at = 1 + u + (p - u) * u;
    for d in [u, p - u] {
        for j in 0..d {
            for i in j..d {
                if i == j {
                    steps[at] = log_step;
                }
                at += 1;
            }
        }
    }
    steps
}

/// Full pipeline for an arbitrary score: `θ̃` → `Δ̂` → start → simplex
/// search over `ζ` → canonical form and asymptotic covariance.
pub fn fit_envelope<T: Real>(
    data: &Dataset<T>,
    u: usize,
    score: Score<T>,
    opts: &FitOptions,
    start: Option<StartingSubspace<T>>,
) -> Result<FitResult<T>> {
    let p = data.p();
    if u == 0 || u > p {
        return Err(EhrError::InvalidArgument(format!("envelope dimension {u} outside 1..={p}")));
    }
    let gee = gee_solution_for(data, score)?;
    let weight = weight_matrix(data, &gee.theta, score, T::lit(opts.ridge_eps))?;

    let candidates = match start {
        Some(s) => {
            if s.basis.shape() != (p, u) {
                return Err(EhrError::Dimension("starting basis must be p x u".into()));
            }
            let perm = s.perm.unwrap_or_else(|| pivot_rows(&s.basis));
            vec![(s.basis, perm, false)]
        }
        None => {
            let pls = pls_initializer(data, u)?;
            let coef = coefficient_krylov_start(data, &gee.theta.beta, u)?;
            let eig = eigen_signal_start(data, &gee.theta.beta, u)?;
            vec![
                (pls.basis, pls.perm, pls.padded),
                (coef.basis, coef.perm, coef.padded),
                (eig.basis, eig.perm, eig.padded),
            ]
        }
    };
    // keep the candidate with the smallest starting objective; ties go to the earlier one
    let mut chosen: Option<(EnvelopeParams<T>, T, bool)> = None;
    for (basis, perm, padded) in candidates {
        let zeta = initial_params(&gee, &basis, perm)?;
        let value = ChartObjective::new(data, weight.delta.matrix(), score, u, &zeta.perm)
            .with_fitted_var_cap(opts.fitted_var_cap)
            .value(&zeta.to_free_coords()?);
        if chosen.as_ref().is_none_or(|(_, best, _)| value < *best) {
            chosen = Some((zeta, value, padded));
        }
    }
    let (zeta0, f0, padded) = chosen.expect("at least one candidate");
    if !f0.is_finite_val() {
        return Err(EhrError::Numerical("objective is not finite at the starting values".into()));
    }
    let coords0 = zeta0.to_free_coords()?;
    let objective = ChartObjective::new(data, weight.delta.matrix(), score, u, &zeta0.perm)
        .with_fitted_var_cap(opts.fitted_var_cap);
    let min = if opts.whiten {
        shaped_nelder_mead(&objective, &coords0, &opts.nelder_mead)?
    } else {
        let steps: Vec<T> = chart_steps(p, u, opts.nelder_mead.step, opts.log_diag_step)
            .into_iter()
            .map(T::lit)
            .collect();
        nelder_mead_with_steps(|c| objective.value(c), &coords0, &steps, &opts.nelder_mead)
    };
    let coords = min.x.clone();
    debug_assert!(min.f <= f0);

    let zeta_hat = EnvelopeParams::from_free_coords(&coords, p, u, &zeta0.perm)?;
    let theta_hat = env_map_unchecked(&zeta_hat);
    let envelope = canonicalize(&zeta_hat)?;
    let avar = if opts.compute_avar {
        let ups = sandwich_avar(data, &gee.fit, score)?;
        let psi1 = jacobian_psi1(
            &envelope.basis,
            &envelope.eta,
            envelope.omega.matrix(),
            envelope.omega0.matrix(),
        )?;
        Some(projected_avar(&psi1, &ups)?)
    } else {
        None
    };
    Ok(FitResult {
        zeta_hat,
        envelope,
        theta_hat,
        u,
        objective: min.f,
        initial_objective: f0,
        avar,
        k: score.k(),
        score,
        gee,
        weight,
        init_padded: padded,
        optimizer: min.meta,
    })
}
