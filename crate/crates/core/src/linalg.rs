//! Dense kernels for envelope algebra.
//!
//! Half-vectorization uses the lower triangle stacked column by column
//! (`j <= i` within column `j`). Every module that touches `vech` indices
//! (contraction/expansion matrices, Jacobians, moment vectors) relies on this
//! ordering.

use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::error::{EhrError, Result};
use crate::scalar::Real;

/// Symmetric matrix with exactly mirrored entries.
#[derive(Debug, Clone, PartialEq)]
pub struct SymMatrix<T: Real>(DMatrix<T>);

impl<T: Real> SymMatrix<T> {
    /// Validates exact symmetry and finiteness.
    pub fn new(m: DMatrix<T>) -> Result<Self> {
        check_square(&m)?;
        let mut worst = T::zero();
        for j in 0..m.ncols() {
            for i in 0..m.nrows() {
                if !m[(i, j)].is_finite_val() {
                    return Err(EhrError::NonFinite(format!("entry ({i},{j})")));
                }
                worst = worst.max((m[(i, j)] - m[(j, i)]).abs());
            }
        }
        if worst > T::zero() {
            return Err(EhrError::NotSymmetric(worst.to_f64_lossy()));
        }
        Ok(Self(m))
    }

    /// Averages `m` with its transpose.
    pub fn symmetrize(m: DMatrix<T>) -> Result<Self> {
        check_square(&m)?;
        let half = T::lit(0.5);
        let s = (&m + m.transpose()) * half;
        Self::new(s)
    }

    pub fn identity(p: usize) -> Self {
        Self(DMatrix::identity(p, p))
    }

    pub fn from_vech(v: &DVector<T>, p: usize) -> Result<Self> {
        Ok(Self(unvech(v, p)?))
    }

    pub fn dim(&self) -> usize {
        self.0.nrows()
    }

    pub fn matrix(&self) -> &DMatrix<T> {
        &self.0
    }

    pub fn into_inner(self) -> DMatrix<T> {
        self.0
    }

    pub fn vech(&self) -> DVector<T> {
        vech(&self.0).expect("square by construction")
    }
}

/// Matrix with orthonormal columns.
#[derive(Debug, Clone, PartialEq)]
pub struct SemiOrthMatrix<T: Real>(DMatrix<T>);

impl<T: Real> SemiOrthMatrix<T> {
    /// Accepts `m` when `mᵀm = I` to within `1e-10` entrywise (scaled for `f32`).
    pub fn new(m: DMatrix<T>) -> Result<Self> {
        if m.ncols() > m.nrows() {
            return Err(EhrError::Dimension(format!(
                "semi-orthogonal matrix needs cols <= rows, got {}x{}",
                m.nrows(),
                m.ncols()
            )));
        }
        let gram = m.transpose() * &m;
        let dev = max_abs(&(gram - DMatrix::identity(m.ncols(), m.ncols())));
        let tol = orthonormal_tol::<T>();
        if dev > tol {
            return Err(EhrError::InvalidArgument(format!(
                "columns are not orthonormal (deviation {:e})",
                dev.to_f64_lossy()
            )));
        }
        Ok(Self(m))
    }

    pub(crate) fn new_unchecked(m: DMatrix<T>) -> Self {
        Self(m)
    }

    pub fn matrix(&self) -> &DMatrix<T> {
        &self.0
    }

    pub fn into_inner(self) -> DMatrix<T> {
        self.0
    }

    pub fn rows(&self) -> usize {
        self.0.nrows()
    }

    pub fn cols(&self) -> usize {
        self.0.ncols()
    }
}

fn orthonormal_tol<T: Real>() -> T {
    (T::machine_eps() * T::lit(1e6)).max(T::lit(1e-10))
}

fn check_square<T: Real>(m: &DMatrix<T>) -> Result<()> {
    if m.nrows() != m.ncols() {
        return Err(EhrError::NotSquare {
            rows: m.nrows(),
            cols: m.ncols(),
        });
    }
    Ok(())
}

/// Largest absolute entry (0 for an empty matrix).
pub fn max_abs<T: Real>(m: &DMatrix<T>) -> T {
    m.iter().fold(T::zero(), |acc, v| acc.max(v.abs()))
}

/// Number of free entries in a symmetric `p x p` matrix.
pub fn vech_len(p: usize) -> usize {
    p * (p + 1) / 2
}

/// Position of `(i, j)` (`i >= j`) inside `vech`.
#[inline]
pub fn vech_index(p: usize, i: usize, j: usize) -> usize {
    debug_assert!(i >= j && i < p);
    // columns 0..j hold p + (p-1) + ... + (p-j+1) entries
    j * p - j * j.saturating_sub(1) / 2 + (i - j)
}

/// Half-vectorization: lower triangle, column by column.
pub fn vech<T: Real>(m: &DMatrix<T>) -> Result<DVector<T>> {
    check_square(m)?;
    let p = m.nrows();
    let mut out = DVector::zeros(vech_len(p));
    let mut k = 0;
    for j in 0..p {
        for i in j..p {
            out[k] = m[(i, j)];
            k += 1;
        }
    }
    Ok(out)
}

/// Inverse of [`vech`]: rebuilds the symmetric matrix.
pub fn unvech<T: Real>(v: &DVector<T>, p: usize) -> Result<DMatrix<T>> {
    if v.len() != vech_len(p) {
        return Err(EhrError::Dimension(format!(
            "vech of a {p}x{p} matrix has {} entries, got {}",
            vech_len(p),
            v.len()
        )));
    }
    let mut m = DMatrix::zeros(p, p);
    let mut k = 0;
    for j in 0..p {
        for i in j..p {
            m[(i, j)] = v[k];
            m[(j, i)] = v[k];
            k += 1;
        }
    }
    Ok(m)
}

/// Column-stacking vectorization.
pub fn vec_of<T: Real>(m: &DMatrix<T>) -> DVector<T> {
    DVector::from_column_slice(m.as_slice())
}

/// Contraction `C_p` (`vech = C vec`) and expansion `E_p` (`vec = E vech`).
///
/// `C_p` averages the two mirrored entries, so `C_p K_p = C_p` for the
/// commutation matrix `K_p`, and `C_p E_p = I`.
pub fn contraction_expansion<T: Real>(p: usize) -> Result<(DMatrix<T>, DMatrix<T>)> {
    if p == 0 {
        return Err(EhrError::InvalidArgument(
            "contraction/expansion matrices need p >= 1".into(),
        ));
    }
    Ok((contraction(p), expansion(p)))
}

pub(crate) fn expansion<T: Real>(p: usize) -> DMatrix<T> {
    let q = vech_len(p);
    let mut e = DMatrix::zeros(p * p, q);
    let mut k = 0;
    for j in 0..p {
        for i in j..p {
            e[(i + j * p, k)] = T::one();
            e[(j + i * p, k)] = T::one();
            k += 1;
        }
    }
    e
}

pub(crate) fn contraction<T: Real>(p: usize) -> DMatrix<T> {
    let q = vech_len(p);
    let half = T::lit(0.5);
    let mut c = DMatrix::zeros(q, p * p);
    let mut k = 0;
    for j in 0..p {
        for i in j..p {
            if i == j {
                c[(k, i + j * p)] = T::one();
            } else {
                c[(k, i + j * p)] = half;
                c[(k, j + i * p)] = half;
            }
            k += 1;
        }
    }
    c
}

/// Kronecker product.
pub fn kron<T: Real>(a: &DMatrix<T>, b: &DMatrix<T>) -> DMatrix<T> {
    a.kronecker(b)
}

/// Symmetric eigendecomposition with eigenvalues sorted in decreasing order.
pub fn sym_eigen<T: Real>(m: &DMatrix<T>) -> Result<(DVector<T>, DMatrix<T>)> {
    check_square(m)?;
    let p = m.nrows();
    if p == 0 {
        return Ok((DVector::zeros(0), DMatrix::zeros(0, 0)));
    }
    if m.iter().any(|v| !v.is_finite_val()) {
        return Err(EhrError::NonFinite("eigendecomposition input".into()));
    }
    let half = T::lit(0.5);
    let sym = (m + m.transpose()) * half;
    let eig = SymmetricEigen::try_new(sym, T::machine_eps(), 10_000)
        .ok_or_else(|| EhrError::Numerical("symmetric eigensolver did not converge".into()))?;
    let mut order: Vec<usize> = (0..p).collect();
    order.sort_by(|&a, &b| {
        eig.eigenvalues[b]
            .partial_cmp(&eig.eigenvalues[a])
            .unwrap_or(std::cmp::Ordering::Equal)
    });
    let vals = DVector::from_iterator(p, order.iter().map(|&i| eig.eigenvalues[i]));
    let mut vecs = DMatrix::zeros(p, p);
    for (dst, &src) in order.iter().enumerate() {
        let mut col = eig.eigenvectors.column(src).into_owned();
        // sign convention: largest-magnitude component positive
        let mut pivot = 0;
        for r in 0..p {
            if col[r].abs() > col[pivot].abs() {
                pivot = r;
            }
        }
        if col[pivot] < T::zero() {
            col.neg_mut();
        }
        vecs.set_column(dst, &col);
    }
    Ok((vals, vecs))
}

/// Moore-Penrose inverse of a symmetric positive semidefinite matrix.
///
/// Eigenvalues below `tol * λ_max` are treated as structural zeros; an
/// eigenvalue below `-tol * λ_max` is reported as indefiniteness.
pub fn pinv<T: Real>(m: &DMatrix<T>, tol: T) -> Result<DMatrix<T>> {
    if tol <= T::zero() {
        return Err(EhrError::InvalidArgument("pinv tolerance must be positive".into()));
    }
    let (vals, vecs) = sym_eigen(m)?;
    let p = vals.len();
    if p == 0 {
        return Ok(DMatrix::zeros(0, 0));
    }
    let lmax = vals.iter().fold(T::zero(), |a, v| a.max(v.abs()));
    if lmax == T::zero() {
        return Ok(DMatrix::zeros(p, p));
    }
    let cut = tol * lmax;
    let mut inv_vals = DVector::zeros(p);
    for i in 0..p {
        let v = vals[i];
        if v < -cut {
            return Err(EhrError::Indefinite(v.to_f64_lossy()));
        }
        if v > cut {
            inv_vals[i] = T::one() / v;
        }
    }
    let scaled = DMatrix::from_fn(p, p, |r, c| vecs[(r, c)] * inv_vals[c]);
    let out = &scaled * vecs.transpose();
    Ok((&out + out.transpose()) * T::lit(0.5))
}

/// Default relative cutoff used with [`pinv`].
pub fn default_pinv_tol<T: Real>() -> T {
    T::lit(1e-10).max(T::machine_eps() * T::lit(100.0))
}

/// Inverse of a symmetric positive definite matrix via Cholesky.
pub fn spd_inverse<T: Real>(m: &DMatrix<T>) -> Result<DMatrix<T>> {
    check_square(m)?;
    let chol = nalgebra::Cholesky::new(m.clone())
        .ok_or_else(|| EhrError::Singular("matrix is not positive definite".into()))?;
    let inv = chol.inverse();
    Ok((&inv + inv.transpose()) * T::lit(0.5))
}

/// Symmetric square root of a PSD matrix (negative rounding noise clipped).
pub fn sym_sqrt<T: Real>(m: &DMatrix<T>) -> Result<DMatrix<T>> {
    let (vals, vecs) = sym_eigen(m)?;
    let p = vals.len();
    let scaled = DMatrix::from_fn(p, p, |r, c| vecs[(r, c)] * vals[c].max(T::zero()).sqrt());
    Ok(&scaled * vecs.transpose())
}

/// Orthogonal projection onto the column span of a full-rank basis.
pub fn projection<T: Real>(basis: &DMatrix<T>) -> Result<DMatrix<T>> {
    if basis.ncols() == 0 {
        return Ok(DMatrix::zeros(basis.nrows(), basis.nrows()));
    }
    let gram = basis.transpose() * basis;
    let inv = spd_inverse(&gram)
        .map_err(|_| EhrError::Singular("basis is rank deficient".into()))?;
    let p = basis * inv * basis.transpose();
    Ok((&p + p.transpose()) * T::lit(0.5))
}

/// Orthonormal basis of the orthogonal complement of `span(Γ)`.
///
/// Taken from the trailing columns of the Householder QR factor of
/// `[Γ | I_p]`, so the result depends only on `Γ`.
pub fn orthonormal_complement<T: Real>(gamma: &SemiOrthMatrix<T>) -> SemiOrthMatrix<T> {
    let p = gamma.rows();
    let u = gamma.cols();
    if u == p {
        return SemiOrthMatrix::new_unchecked(DMatrix::zeros(p, 0));
    }
    let q = full_q(gamma.matrix());
    let mut comp = q.columns(u, p - u).into_owned();
    // remove the residual Γ component picked up by rounding, then renormalize
    let g = gamma.matrix();
    comp -= g * (g.transpose() * &comp);
    let comp = thin_q(&comp);
    SemiOrthMatrix::new_unchecked(comp)
}

/// Full `p x p` orthogonal factor of `[a | I]`.
fn full_q<T: Real>(a: &DMatrix<T>) -> DMatrix<T> {
    let p = a.nrows();
    let mut aug = DMatrix::zeros(p, a.ncols() + p);
    aug.columns_mut(0, a.ncols()).copy_from(a);
    aug.columns_mut(a.ncols(), p).fill_with_identity();
    let qr = aug.qr();
    let q = qr.q();
    q.columns(0, p).into_owned()
}

/// Thin orthonormal factor with the sign fixed so that `R` has a
/// non-negative diagonal.
pub fn thin_q<T: Real>(a: &DMatrix<T>) -> DMatrix<T> {
    thin_qr(a).0
}

/// Thin QR with `R` diagonal made non-negative.
pub fn thin_qr<T: Real>(a: &DMatrix<T>) -> (DMatrix<T>, DMatrix<T>) {
    let k = a.ncols();
    if k == 0 {
        return (DMatrix::zeros(a.nrows(), 0), DMatrix::zeros(0, 0));
    }
    let qr = a.clone().qr();
    let mut q = qr.q();
    let mut r = qr.r();
    for j in 0..k.min(r.nrows()) {
        if r[(j, j)] < T::zero() {
            q.column_mut(j).neg_mut();
            r.row_mut(j).neg_mut();
        }
    }
    (q, r)
}

/// Operator-norm distance `‖P_A − P_B‖₂` between two column spans.
pub fn subspace_distance<T: Real>(a: &DMatrix<T>, b: &DMatrix<T>) -> Result<T> {
    if a.nrows() != b.nrows() {
        return Err(EhrError::Dimension("bases live in different spaces".into()));
    }
    check_full_rank(a)?;
    check_full_rank(b)?;
    let d = projection(a)? - projection(b)?;
    let (vals, _) = sym_eigen(&d)?;
    let norm = vals.iter().fold(T::zero(), |acc, v| acc.max(v.abs()));
    Ok(norm.min(T::one()))
}

fn check_full_rank<T: Real>(a: &DMatrix<T>) -> Result<()> {
    if a.ncols() == 0 {
        return Ok(());
    }
    let gram = a.transpose() * a;
    let (vals, _) = sym_eigen(&gram)?;
    let lmax = vals[0];
    let lmin = vals[vals.len() - 1];
    if lmax <= T::zero() || lmin <= lmax * T::machine_eps() * T::lit(1e4) {
        return Err(EhrError::Singular("basis is rank deficient".into()));
    }
    Ok(())
}

/// Log-Cholesky chart for SPD matrices: `M = L Lᵀ` with `L` lower
/// triangular and `log diag(L)` unconstrained. Coordinates follow `vech`
/// order of `L`.
pub fn spd_to_log_chol<T: Real>(m: &DMatrix<T>) -> Result<DVector<T>> {
    let p = m.nrows();
    let chol = nalgebra::Cholesky::new(m.clone())
        .ok_or_else(|| EhrError::Singular("matrix is not positive definite".into()))?;
    let l = chol.l();
    let mut out = DVector::zeros(vech_len(p));
    let mut k = 0;
    for j in 0..p {
        for i in j..p {
            out[k] = if i == j { l[(i, j)].ln() } else { l[(i, j)] };
            k += 1;
        }
    }
    Ok(out)
}

/// Inverse of [`spd_to_log_chol`]; `coords` has `vech_len(p)` entries.
pub fn log_chol_to_spd<T: Real>(coords: &[T], p: usize) -> DMatrix<T> {
    let mut l = DMatrix::zeros(p, p);
    let mut k = 0;
    for j in 0..p {
        for i in j..p {
            l[(i, j)] = if i == j { coords[k].exp() } else { coords[k] };
            k += 1;
        }
    }
    let m = &l * l.transpose();
    (&m + m.transpose()) * T::lit(0.5)
}

/// Eigenvalue range check: all eigenvalues strictly positive.
pub fn is_spd<T: Real>(m: &DMatrix<T>) -> bool {
    m.nrows() == m.ncols() && (m.nrows() == 0 || nalgebra::Cholesky::new(m.clone()).is_some())
}

/// Smallest eigenvalue of a symmetric matrix (`+∞`-like zero for empty input).
pub fn min_eigenvalue<T: Real>(m: &DMatrix<T>) -> Result<T> {
    let (vals, _) = sym_eigen(m)?;
    Ok(if vals.is_empty() { T::zero() } else { vals[vals.len() - 1] })
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::dmatrix;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha20Rng;

    fn rand_sym(p: usize, rng: &mut ChaCha20Rng) -> DMatrix<f64> {
        let a = DMatrix::from_fn(p, p, |_, _| rng.random_range(-1.0..1.0));
        (&a + a.transpose()) * 0.5
    }

    fn rand_mat(r: usize, c: usize, rng: &mut ChaCha20Rng) -> DMatrix<f64> {
        DMatrix::from_fn(r, c, |_, _| rng.random_range(-1.0..1.0))
    }

    #[test]
    fn vech_small_cases() {
        let m = dmatrix![1.0, 2.0; 2.0, 3.0];
        assert_eq!(vech(&m).unwrap().as_slice(), &[1.0, 2.0, 3.0]);
        let id = DMatrix::<f64>::identity(2, 2);
        assert_eq!(vech(&id).unwrap().as_slice(), &[1.0, 0.0, 1.0]);
        assert!(vech(&DMatrix::<f64>::zeros(2, 3)).is_err());
    }

    #[test]
    fn vech_index_matches_loop_order() {
        for p in 1..7 {
            let mut k = 0;
            for j in 0..p {
                for i in j..p {
                    assert_eq!(vech_index(p, i, j), k);
                    k += 1;
                }
            }
        }
    }

    #[test]
    fn vech_roundtrip_random() {
        let mut rng = ChaCha20Rng::seed_from_u64(1);
        for p in 1..=8 {
            let m = rand_sym(p, &mut rng);
            let back = unvech(&vech(&m).unwrap(), p).unwrap();
            assert_eq!(back, m);
        }
    }

    #[test]
    fn contraction_expansion_identities() {
        let (c1, e1) = contraction_expansion::<f64>(1).unwrap();
        assert_eq!(c1, DMatrix::from_element(1, 1, 1.0));
        assert_eq!(e1, DMatrix::from_element(1, 1, 1.0));

        let (c2, _) = contraction_expansion::<f64>(2).unwrap();
        let m = dmatrix![1.0, 2.0; 2.0, 3.0];
        assert_eq!((c2 * vec_of(&m)).as_slice(), &[1.0, 2.0, 3.0]);

        let mut rng = ChaCha20Rng::seed_from_u64(2);
        for p in 1..=8 {
            let (c, e) = contraction_expansion::<f64>(p).unwrap();
            let q = vech_len(p);
            assert!(max_abs(&(&c * &e - DMatrix::identity(q, q))) < 1e-15);
            for _ in 0..10 {
                let m = rand_sym(p, &mut rng);
                let v = vec_of(&m);
                let h = vech(&m).unwrap();
                assert!((&c * &v - &h).amax() < 1e-14);
                assert!((&e * &h - &v).amax() < 1e-14);
                assert!((&e * (&c * &v) - &v).amax() < 1e-14);
            }
        }
        assert!(contraction_expansion::<f64>(0).is_err());
    }

    #[test]
    fn complement_cases() {
        let e1 = SemiOrthMatrix::new(dmatrix![1.0f64; 0.0]).unwrap();
        let c = orthonormal_complement(&e1);
        assert_eq!(c.cols(), 1);
        assert!((c.matrix()[(1, 0)].abs() - 1.0).abs() < 1e-14);
        assert!(c.matrix()[(0, 0)].abs() < 1e-14);

        let full = SemiOrthMatrix::new(DMatrix::<f64>::identity(3, 3)).unwrap();
        assert_eq!(orthonormal_complement(&full).cols(), 0);

        let mut rng = ChaCha20Rng::seed_from_u64(3);
        let g = thin_q(&rand_mat(6, 2, &mut rng));
        let g = SemiOrthMatrix::new(g).unwrap();
        let g0 = orthonormal_complement(&g);
        assert_eq!(g0.cols(), 4);
        assert!(max_abs(&(g0.matrix().transpose() * g.matrix())) < 1e-10);
        assert!(max_abs(&(g0.matrix().transpose() * g0.matrix() - DMatrix::identity(4, 4))) < 1e-10);
        // deterministic
        assert_eq!(orthonormal_complement(&g), g0);
    }

    #[test]
    fn pinv_cases() {
        let i3 = DMatrix::<f64>::identity(3, 3);
        assert!(max_abs(&(pinv(&i3, 1e-10).unwrap() - &i3)) < 1e-14);
        let d = dmatrix![2.0, 0.0; 0.0, 0.0];
        let pd = pinv(&d, 1e-10).unwrap();
        assert!(max_abs(&(pd - dmatrix![0.5, 0.0; 0.0, 0.0])) < 1e-14);

        let mut rng = ChaCha20Rng::seed_from_u64(4);
        let b = rand_mat(5, 3, &mut rng);
        let m = &b * b.transpose();
        let mp = pinv(&m, 1e-10).unwrap();
        assert!(max_abs(&(&m * &mp * &m - &m)) < 1e-8);

        let indefinite = dmatrix![1.0, 0.0; 0.0, -1.0];
        assert!(matches!(pinv(&indefinite, 1e-10), Err(EhrError::Indefinite(_))));
    }

    #[test]
    fn pinv_of_spd_is_inverse() {
        let mut rng = ChaCha20Rng::seed_from_u64(5);
        for _ in 0..10 {
            let b = rand_mat(4, 4, &mut rng);
            let m = &b * b.transpose() + DMatrix::identity(4, 4) * 0.5;
            let inv = m.clone().try_inverse().unwrap();
            let rel = max_abs(&(pinv(&m, 1e-10).unwrap() - &inv)) / max_abs(&inv);
            assert!(rel < 1e-9);
        }
    }

    #[test]
    fn projection_properties() {
        let mut rng = ChaCha20Rng::seed_from_u64(6);
        let g = rand_mat(7, 3, &mut rng);
        let p = projection(&g).unwrap();
        assert!(max_abs(&(&p * &p - &p)) < 1e-10);
        assert!(max_abs(&(&p - p.transpose())) < 1e-10);
    }

    #[test]
    fn subspace_distance_cases() {
        let e1 = dmatrix![1.0f64; 0.0];
        let e2 = dmatrix![0.0f64; 1.0];
        assert!(subspace_distance(&e1, &e1).unwrap() < 1e-15);
        assert!((subspace_distance(&e1, &e2).unwrap() - 1.0).abs() < 1e-14);

        let mut rng = ChaCha20Rng::seed_from_u64(7);
        let a = rand_mat(6, 2, &mut rng);
        let r = rand_mat(2, 2, &mut rng) + DMatrix::identity(2, 2) * 2.0;
        assert!(subspace_distance(&a, &(&a * r)).unwrap() < 1e-10);

        let deficient = dmatrix![1.0, 2.0; 1.0, 2.0; 0.0, 0.0];
        assert!(subspace_distance(&deficient, &deficient).is_err());
    }

    #[test]
    fn subspace_distance_metric_properties() {
        let mut rng = ChaCha20Rng::seed_from_u64(8);
        for _ in 0..50 {
            let a = rand_mat(5, 2, &mut rng);
            let b = rand_mat(5, 2, &mut rng);
            let c = rand_mat(5, 2, &mut rng);
            let ab = subspace_distance(&a, &b).unwrap();
            let ba = subspace_distance(&b, &a).unwrap();
            let bc = subspace_distance(&b, &c).unwrap();
            let ac = subspace_distance(&a, &c).unwrap();
            assert!((ab - ba).abs() < 1e-12);
            assert!(ac <= ab + bc + 1e-12);
            assert!((0.0..=1.0).contains(&ab));
        }
    }

    #[test]
    fn log_cholesky_roundtrip() {
        let mut rng = ChaCha20Rng::seed_from_u64(9);
        let b = rand_mat(3, 3, &mut rng);
        let m = &b * b.transpose() + DMatrix::identity(3, 3);
        let coords = spd_to_log_chol(&m).unwrap();
        let back = log_chol_to_spd(coords.as_slice(), 3);
        assert!(max_abs(&(back - m)) < 1e-12);
    }

    #[test]
    fn sym_matrix_validation() {
        assert!(SymMatrix::new(dmatrix![1.0, 2.0; 2.0, 1.0]).is_ok());
        assert!(matches!(
            SymMatrix::new(dmatrix![1.0, 2.0; 2.5, 1.0]),
            Err(EhrError::NotSymmetric(_))
        ));
        assert!(SymMatrix::new(dmatrix![1.0, f64::NAN; f64::NAN, 1.0]).is_err());
        let s = SymMatrix::symmetrize(dmatrix![1.0, 2.0; 3.0, 1.0]).unwrap();
        assert_eq!(s.matrix()[(0, 1)], 2.5);
    }

    #[test]
    fn works_in_single_precision() {
        let m = nalgebra::dmatrix![4.0f32, 1.0; 1.0, 3.0];
        let inv = pinv(&m, default_pinv_tol::<f32>()).unwrap();
        let id = &m * inv;
        assert!(max_abs(&(id - DMatrix::identity(2, 2))) < 1e-5);
    }
}
