//! Partial least squares starting subspace.

use nalgebra::{DMatrix, DVector};

use crate::envelope::{a_from_basis, pivot_rows};
use crate::error::{EhrError, Result};
use crate::linalg::sym_eigen;
use crate::robust::{predictor_moments, Dataset};
use crate::scalar::Real;

/// Orthonormal starting basis and its A-chart coordinates.
#[derive(Debug, Clone, PartialEq)]
pub struct PlsStart<T: Real> {
    pub basis: DMatrix<T>,
    pub a: DMatrix<T>,
    pub perm: Vec<usize>,
    /// Number of Krylov directions kept before padding.
    pub krylov_rank: usize,
    /// Eigenvectors of `Sx` were used to complete the basis.
    pub padded: bool,
}

/// Relative size below which a Krylov direction is treated as dependent.
const KRYLOV_TOL: f64 = 1e-8;

/// Span of `{Sxy, Sx Sxy, ..., Sx^{u-1} Sxy}` (the SIMPLS weight space for a
/// single response), orthonormalized by Gram-Schmidt. Directions that are
/// numerically dependent end the sequence; the basis is then completed with
/// the leading eigenvectors of `Sx` projected off the directions kept.
pub fn pls_initializer<T: Real>(data: &Dataset<T>, u: usize) -> Result<PlsStart<T>> {
    let p = data.p();
    if u == 0 || u > p {
        return Err(EhrError::InvalidArgument(format!("envelope dimension {u} outside 1..={p}")));
    }
    let n = T::from_usize_lossy(data.n());
    let (x_bar, s_x) = predictor_moments(data.x());
    let y_bar = data.y().sum() / n;
    let mut s_xy = DVector::zeros(p);
    for i in 0..data.n() {
        let dy = data.y()[i] - y_bar;
        for j in 0..p {
            s_xy[j] += (data.x()[(i, j)] - x_bar[j]) * dy;
        }
    }
    s_xy /= n;

    let var_y = data.y().iter().fold(T::zero(), |a, &v| a + (v - y_bar) * (v - y_bar)) / n;
    let scale = (var_y * s_x.trace()).sqrt();
    krylov_start(&s_x, &s_xy, scale, u)
}

/// Span of `{b, Sx b, ..., Sx^{u-1} b}` for a coefficient estimate `b`,
/// completed like [`pls_initializer`]. Since the envelope contains `β`,
/// seeding with an accurate `β̃` keeps the first moment block small from
/// the start.
pub fn coefficient_krylov_start<T: Real>(data: &Dataset<T>, beta: &DVector<T>, u: usize) -> Result<PlsStart<T>> {
    let p = data.p();
    if u == 0 || u > p || beta.len() != p {
        return Err(EhrError::InvalidArgument(format!("envelope dimension {u} outside 1..={p}")));
    }
    let (_, s_x) = predictor_moments(data.x());
    krylov_start(&s_x, beta, beta.norm(), u)
}

/// The `u` eigenvectors of `Sx` carrying the most of the signal variance
/// `βᵀ Sx β`, ranked by `λⱼ (vⱼᵀ β)²` (ties keep eigenvalue order). When
/// the envelope is spanned by eigenvectors this recovers it up to the error
/// in `β`, even if `Sx` has a large nearly isotropic block that the Krylov
/// sequences wander into. Has no Krylov part, so `krylov_rank` is 0.
pub fn eigen_signal_start<T: Real>(data: &Dataset<T>, beta: &DVector<T>, u: usize) -> Result<PlsStart<T>> {
    let p = data.p();
    if u == 0 || u > p || beta.len() != p {
        return Err(EhrError::InvalidArgument(format!("envelope dimension {u} outside 1..={p}")));
    }
    let (_, s_x) = predictor_moments(data.x());
    let (vals, vecs) = sym_eigen(&s_x)?;
    let mut order: Vec<(usize, T)> = (0..p)
        .map(|j| {
            let c = vecs.column(j).dot(beta);
            (j, vals[j].max(T::zero()) * c * c)
        })
        .collect();
    order.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap_or(std::cmp::Ordering::Equal));
    let cols: Vec<DVector<T>> = order[..u].iter().map(|&(j, _)| vecs.column(j).into_owned()).collect();
    let basis = DMatrix::from_columns(&cols);
    let perm = pivot_rows(&basis);
    let a = a_from_basis(&basis, &perm)?;
    Ok(PlsStart {
        basis,
        a,
        perm,
        krylov_rank: 0,
        padded: false,
    })
}

fn krylov_start<T: Real>(s_x: &DMatrix<T>, seed: &DVector<T>, scale: T, u: usize) -> Result<PlsStart<T>> {
    let p = s_x.nrows();
    let tol = T::lit(KRYLOV_TOL);
    let mut cols: Vec<DVector<T>> = Vec::with_capacity(u);
    if seed.norm() > tol * scale && scale > T::zero() {
        let mut v = seed.clone();
        while cols.len() < u {
            let raw_norm = v.norm();
            let mut w = v.clone();
            for _ in 0..2 {
                for c in &cols {
                    let proj = c.dot(&w);
                    w -= c * proj;
                }
            }
            let wn = w.norm();
            if !(raw_norm > T::zero()) || wn <= tol * raw_norm {
                break;
            }
            cols.push(w / wn);
            v = s_x * &v;
            let vn = v.norm();
            if vn > T::zero() {
                v /= vn;
            }
        }
    }
    let krylov_rank = cols.len();
    let padded = krylov_rank < u;
    if padded {
        let (_, vecs) = sym_eigen(s_x)?;
        for j in 0..p {
            if cols.len() == u {
                break;
            }
            let mut w = vecs.column(j).into_owned();
            for _ in 0..2 {
                for c in &cols {
                    let proj = c.dot(&w);
                    w -= c * proj;
                }
            }
            let wn = w.norm();
            if wn > T::lit(1e-6) {
                cols.push(w / wn);
            }
        }
        if cols.len() < u {
            return Err(EhrError::Numerical("could not complete the starting basis".into()));
        }
    }
    let basis = DMatrix::from_columns(&cols);
    let perm = pivot_rows(&basis);
    let a = a_from_basis(&basis, &perm)?;
    Ok(PlsStart {
        basis,
        a,
        perm,
        krylov_rank,
        padded,
    })
}
