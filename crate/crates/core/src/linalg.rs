//! Small dense linear-algebra helpers on top of nalgebra.
//!
//! Everything here works on `DMatrix<f64>` of desk-scale size (d <= 10), so
//! clarity wins over asymptotic cost.

use nalgebra::{Complex, DMatrix, DVector};

use crate::error::{Error, Result};

/// Condition number above which a Lyapunov operator is declared resonant.
pub const LYAPUNOV_MAX_CONDITION: f64 = 1e12;

/// Solves `M X + X Mᵀ = Q` for `X` by vectorising to the `d² × d²` system
/// `(I ⊗ M + M ⊗ I) vec(X) = vec(Q)`.
///
/// The result is symmetrised, which is exact when `Q` is symmetric.
pub fn solve_lyapunov(m: &DMatrix<f64>, q: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let d = m.nrows();
    if m.ncols() != d || q.shape() != (d, d) {
        return Err(Error::InvalidInput("lyapunov: shape mismatch".into()));
    }
    let id = DMatrix::<f64>::identity(d, d);
    let op = id.kronecker(m) + m.kronecker(&id);
    let sv = op.singular_values();
    let smax = sv.max();
    let smin = sv.min();
    let cond = if smin > 0.0 { smax / smin } else { f64::INFINITY };
    if !(cond < LYAPUNOV_MAX_CONDITION) {
        return Err(Error::ResonantSpectrum(cond));
    }
    // column-major vec() is exactly nalgebra's storage order
    let rhs = DVector::from_column_slice(q.as_slice());
    let sol = op
        .lu()
        .solve(&rhs)
        .ok_or(Error::ResonantSpectrum(f64::INFINITY))?;
    let x = DMatrix::from_column_slice(d, d, sol.as_slice());
    Ok((&x + x.transpose()) * 0.5)
}

/// Solution of `M X + X Mᵀ = Q` closest to `x0` in Frobenius norm, for a
/// resonant but consistent spectrum. Fails if the system is inconsistent.
pub fn solve_lyapunov_near(m: &DMatrix<f64>, q: &DMatrix<f64>, x0: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let d = m.nrows();
    let id = DMatrix::<f64>::identity(d, d);
    let op = id.kronecker(m) + m.kronecker(&id);
    let r = q - (m * x0 + x0 * m.transpose());
    let rhs = DVector::from_column_slice(r.as_slice());
    let svd = op.svd(true, true);
    let cut = svd.singular_values.max() * 1e-12;
    let dx = svd
        .solve(&rhs, cut)
        .map_err(|e| Error::NonFiniteValue(format!("lyapunov: {e}")))?;
    let x = x0 + DMatrix::from_column_slice(d, d, dx.as_slice());
    let x = (&x + x.transpose()) * 0.5;
    if lyapunov_residual(m, &x, q) > 1e-10 * (1.0 + q.norm()) {
        return Err(Error::ResonantSpectrum(f64::INFINITY));
    }
    Ok(x)
}

/// Frobenius norm of `M X + X Mᵀ - Q`.
pub fn lyapunov_residual(m: &DMatrix<f64>, x: &DMatrix<f64>, q: &DMatrix<f64>) -> f64 {
    (m * x + x * m.transpose() - q).norm()
}

pub fn eigenvalues(m: &DMatrix<f64>) -> Vec<Complex<f64>> {
    m.clone().complex_eigenvalues().iter().copied().collect()
}

/// Unit vector spanning the (numerical) kernel of `a`, taken as the right
/// singular vector of the smallest singular value.
pub fn null_vector(a: &DMatrix<f64>) -> DVector<f64> {
    let svd = a.clone().svd(false, true);
    let v_t = svd.v_t.expect("requested V^T");
    let (imin, _) = svd
        .singular_values
        .iter()
        .enumerate()
        .fold((0, f64::INFINITY), |acc, (i, &s)| if s < acc.1 { (i, s) } else { acc });
    let v = v_t.row(imin).transpose();
    let n = v.norm();
    v / n
}

/// Unit eigenvector of `m` for the real eigenvalue `lambda`.
pub fn real_eigenvector(m: &DMatrix<f64>, lambda: f64) -> DVector<f64> {
    let d = m.nrows();
    let shifted = m - DMatrix::<f64>::identity(d, d) * lambda;
    let mut v = null_vector(&shifted);
    // one inverse-iteration sweep sharpens the kernel estimate
    let perturbed = &shifted + DMatrix::<f64>::identity(d, d) * (1e-14 * (1.0 + lambda.abs()));
    if let Some(w) = perturbed.lu().solve(&v) {
        let nw = w.norm();
        if nw.is_finite() && nw > 0.0 {
            v = w / nw;
        }
    }
    v
}

/// Eigenvalues of a symmetric matrix, ascending.
pub fn symmetric_eigenvalues(s: &DMatrix<f64>) -> Vec<f64> {
    let sym = (s + s.transpose()) * 0.5;
    let mut ev: Vec<f64> = sym.symmetric_eigenvalues().iter().copied().collect();
    ev.sort_by(|a, b| a.total_cmp(b));
    ev
}

pub fn count_negative(s: &DMatrix<f64>) -> usize {
    symmetric_eigenvalues(s).into_iter().filter(|&l| l < 0.0).count()
}

/// Orthonormal basis (as columns) of the hyperplane orthogonal to the unit
/// vector `n`. Returns a `d × (d-1)` matrix; empty when `d = 1`.
pub fn orthonormal_complement(n: &DVector<f64>) -> DMatrix<f64> {
    let d = n.len();
    if d == 1 {
        return DMatrix::zeros(1, 0);
    }
    // Householder reflector mapping e_k to ±n, k the largest component of n
    let k = n.iamax();
    let mut e = DVector::zeros(d);
    e[k] = 1.0;
    let sign = if n[k] >= 0.0 { 1.0 } else { -1.0 };
    let w = n * sign - &e;
    let wn = w.norm();
    let refl = if wn < 1e-300 {
        DMatrix::identity(d, d)
    } else {
        let w = w / wn;
        DMatrix::identity(d, d) - (&w * w.transpose()) * 2.0
    };
    // columns of refl form an orthonormal basis; column k is ±n
    let cols: Vec<DVector<f64>> = (0..d).filter(|&j| j != k).map(|j| refl.column(j).into_owned()).collect();
    DMatrix::from_columns(&cols)
}

/// True when `s` is symmetric to `tol` (relative to its norm) and its
/// smallest eigenvalue is strictly positive.
pub fn is_spd(s: &DMatrix<f64>, tol: f64) -> bool {
    let asym = (s - s.transpose()).norm();
    if asym > tol * s.norm().max(1.0) {
        return false;
    }
    symmetric_eigenvalues(s).first().is_some_and(|&l| l > 0.0)
}

pub fn max_abs(v: &[f64]) -> f64 {
    v.iter().fold(0.0_f64, |m, x| m.max(x.abs()))
}

/// Euclidean distance between two points given as slices.
pub fn distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// Pairwise (cascade) summation; order-insensitive up to rounding and
/// deterministic for a fixed input order.
pub fn pairwise_sum(v: &[f64]) -> f64 {
    match v.len() {
        0 => 0.0,
        1 => v[0],
        n if n <= 8 => v.iter().sum(),
        n => {
            let (a, b) = v.split_at(n / 2);
            pairwise_sum(a) + pairwise_sum(b)
        }
    }
}
