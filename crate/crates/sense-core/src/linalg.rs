//! Dense linear algebra helpers used throughout the crate.
//!
//! Everything here operates on dynamically sized nalgebra matrices. Hermitian
//! eigendecompositions are always returned with eigenvalues sorted in
//! descending order, which nalgebra does not guarantee on its own.

use nalgebra::{Cholesky, ComplexField, DMatrix, DVector};

use crate::error::{Result, SenseError};

pub type C64 = nalgebra::Complex<f64>;
pub type CMat = DMatrix<C64>;
pub type CVec = DVector<C64>;
pub type RMat = DMatrix<f64>;
pub type RVec = DVector<f64>;

pub const IM: C64 = C64::new(0.0, 1.0);

pub fn cr(x: f64) -> C64 {
    C64::new(x, 0.0)
}

/// Hermitian part (M + M^H) / 2.
pub fn hermitian_part(m: &CMat) -> CMat {
    (m + m.adjoint()).scale(0.5)
}

/// Symmetric part (M + M^T) / 2.
pub fn symmetric_part(m: &RMat) -> RMat {
    (m + m.transpose()).scale(0.5)
}

fn sorted_eig<T>(m: DMatrix<T>) -> (RVec, DMatrix<T>)
where
    T: ComplexField<RealField = f64>,
{
    let eig = nalgebra::SymmetricEigen::new(m);
    let mut order: Vec<usize> = (0..eig.eigenvalues.len()).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let values = RVec::from_iterator(order.len(), order.iter().map(|&i| eig.eigenvalues[i]));
    let vectors = DMatrix::from_columns(
        &order
            .iter()
            .map(|&i| eig.eigenvectors.column(i).into_owned())
            .collect::<Vec<_>>(),
    );
    (values, vectors)
}

/// Eigendecomposition of a Hermitian matrix, eigenvalues descending. The
/// input is re-hermitized first so callers may pass matrices with roundoff
/// asymmetry.
pub fn hermitian_eig_desc(m: &CMat) -> (RVec, CMat) {
    sorted_eig(hermitian_part(m))
}

/// Eigendecomposition of a real symmetric matrix, eigenvalues descending.
pub fn symmetric_eig_desc(m: &RMat) -> (RVec, RMat) {
    sorted_eig(symmetric_part(m))
}

/// Projects a real symmetric matrix onto the PSD cone by clipping negative
/// eigenvalues. Returns the projection and the total clipped mass
/// (sum of absolute values of the removed eigenvalues).
pub fn psd_project(m: &RMat) -> (RMat, f64) {
    let (values, vectors) = symmetric_eig_desc(m);
    let mut clipped = 0.0;
    let kept = RVec::from_iterator(
        values.len(),
        values.iter().map(|&v| {
            if v < 0.0 {
                clipped += -v;
                0.0
            } else {
                v
            }
        }),
    );
    let rebuilt = &vectors * RMat::from_diagonal(&kept) * vectors.transpose();
    (symmetric_part(&rebuilt), clipped)
}

/// log(sum(exp(xs))) with the usual max shift. Returns -inf for an empty
/// slice or when every entry is -inf.
pub fn logsumexp(xs: &[f64]) -> f64 {
    let max = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return max;
    }
    max + xs.iter().map(|&x| (x - max).exp()).sum::<f64>().ln()
}

/// Column-major flattening of a matrix into a vector.
pub fn vec_columns(m: &CMat) -> CVec {
    CVec::from_column_slice(m.as_slice())
}

/// tr(A B) without any conjugation.
pub fn trace_prod(a: &CMat, b: &CMat) -> C64 {
    debug_assert_eq!(a.nrows(), b.ncols());
    debug_assert_eq!(a.ncols(), b.nrows());
    let mut acc = C64::new(0.0, 0.0);
    for i in 0..a.nrows() {
        for j in 0..a.ncols() {
            acc += a[(i, j)] * b[(j, i)];
        }
    }
    acc
}

/// tr(A B^H) = sum_ij A_ij conj(B_ij).
pub fn trace_prod_adjoint(a: &CMat, b: &CMat) -> C64 {
    b.dotc(a)
}

/// Solves A x = b for real symmetric positive definite A via Cholesky.
pub fn solve_spd(a: &RMat, b: &RVec) -> Option<RVec> {
    Cholesky::new(symmetric_part(a)).map(|chol| chol.solve(b))
}

/// Cholesky factorization of a Hermitian positive definite matrix, adding an
/// escalating diagonal jitter if the exact factorization fails. The flag
/// records whether any jitter was needed.
pub fn cholesky_with_jitter(m: &CMat, context: &'static str) -> Result<(Cholesky<C64, nalgebra::Dyn>, bool)> {
    let n = m.nrows();
    let base = hermitian_part(m);
    let scale =
        (base.diagonal().iter().map(|d| d.re).sum::<f64>() / n as f64).max(f64::MIN_POSITIVE);
    for attempt in 0..5 {
        let c = if attempt == 0 {
            base.clone()
        } else {
            let eps = scale * 1e-12 * 100f64.powi(attempt - 1);
            &base + CMat::from_diagonal_element(n, n, cr(eps))
        };
        if let Some(chol) = Cholesky::new(c) {
            if attempt > 0 {
                log::debug!("event=cholesky_jitter context={context} attempt={attempt}");
            }
            return Ok((chol, attempt > 0));
        }
    }
    Err(SenseError::Singular { context })
}

/// Log-density of the circularly symmetric complex Gaussian CN(mean, cov)
/// evaluated at y. Nearly singular covariances get an escalating diagonal
/// jitter; the returned flag records whether any jitter was needed.
pub fn complex_gaussian_logpdf(y: &CVec, mean: &CVec, cov: &CMat) -> Result<(f64, bool)> {
    let n = y.len();
    if mean.len() != n || cov.nrows() != n || cov.ncols() != n {
        return Err(SenseError::Shape {
            context: "complex_gaussian_logpdf",
            detail: format!(
                "y has {} entries, mean {}, cov {}x{}",
                n,
                mean.len(),
                cov.nrows(),
                cov.ncols()
            ),
        });
    }
    let (chol, jittered) = cholesky_with_jitter(cov, "complex gaussian covariance")?;
    let log_det: f64 = chol.l().diagonal().iter().map(|d| 2.0 * d.re.ln()).sum();
    let resid = y - mean;
    let solved = chol.solve(&resid);
    let quad = resid.dotc(&solved).re;
    Ok((-(n as f64) * std::f64::consts::PI.ln() - log_det - quad, jittered))
}

/// Largest and smallest eigenvalues of a real symmetric matrix.
pub fn symmetric_extreme_eigs(m: &RMat) -> (f64, f64) {
    let (values, _) = symmetric_eig_desc(m);
    (values[0], values[values.len() - 1])
}
