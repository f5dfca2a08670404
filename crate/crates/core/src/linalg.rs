//! Dense linear-algebra helpers shared by the spectral, synthesis and sde
//! modules: weighted inner products, a general eigensolver front end, small
//! matrix exponentials and a dense Lyapunov solver.

use nalgebra::{ComplexField, DMatrix, DVector};

use crate::error::{Error, Result};

pub type C64 = nalgebra::Complex<f64>;

/// Scalar field used by the simulation layer: either `f64` or `C64`.
pub trait Scalar: ComplexField<RealField = f64> + Copy + Send + Sync {
    fn from_c64(z: C64) -> Self;
    fn to_c64(self) -> C64;
}

impl Scalar for f64 {
    fn from_c64(z: C64) -> Self {
        z.re
    }
    fn to_c64(self) -> C64 {
        C64::new(self, 0.0)
    }
}

impl Scalar for C64 {
    fn from_c64(z: C64) -> Self {
        z
    }
    fn to_c64(self) -> C64 {
        self
    }
}

/// Weighted inner product `<x, y> = sum_i w_i x_i conj(y_i)`.
pub fn inner<T: Scalar>(w: &DVector<f64>, x: &DVector<T>, y: &DVector<T>) -> T {
    let mut acc = T::zero();
    for i in 0..w.len() {
        acc += x[i] * y[i].conjugate() * T::from_real(w[i]);
    }
    acc
}

pub fn norm<T: Scalar>(w: &DVector<f64>, x: &DVector<T>) -> f64 {
    let mut acc = 0.0;
    for i in 0..w.len() {
        acc += w[i] * x[i].modulus_squared();
    }
    acc.sqrt()
}

/// Row operator `L` with `(L x)_j = <x, v_j>` for the columns `v_j` of `vecs`,
/// i.e. `L = V^H W`.
pub fn pairing_rows<T: Scalar>(w: &DVector<f64>, vecs: &DMatrix<T>) -> DMatrix<T> {
    let (n, m) = vecs.shape();
    DMatrix::from_fn(m, n, |j, i| vecs[(i, j)].conjugate() * T::from_real(w[i]))
}

pub fn to_complex(m: &DMatrix<f64>) -> DMatrix<C64> {
    m.map(|x| C64::new(x, 0.0))
}

pub fn max_abs<T: Scalar>(m: &DMatrix<T>) -> f64 {
    m.iter().fold(0.0, |acc, z| acc.max(z.modulus()))
}

/// Eigenvalues with right and left eigenvectors of a dense complex matrix.
///
/// Columns of `right` satisfy `A v = λ v`; columns of `left` satisfy
/// `A^H u = conj(λ) u` (standard, unweighted adjoint).
pub struct DenseEigen {
    pub values: Vec<C64>,
    pub right: DMatrix<C64>,
    pub left: DMatrix<C64>,
}

pub fn eigen_dense(a: &DMatrix<C64>) -> Result<DenseEigen> {
    use faer::dyn_stack::{MemBuffer, MemStack};
    use faer::linalg::evd;
    use faer::diag::Diag;
    use faer::{Mat, Par};

    let n = a.nrows();
    let fa: Mat<faer::c64> = Mat::from_fn(n, n, |i, j| {
        let z = a[(i, j)];
        faer::c64::new(z.re, z.im)
    });
    let mut s = Diag::<faer::c64>::zeros(n);
    let mut ul = Mat::<faer::c64>::zeros(n, n);
    let mut ur = Mat::<faer::c64>::zeros(n, n);
    let par = Par::Seq;
    let req = evd::evd_scratch::<faer::c64>(
        n,
        evd::ComputeEigenvectors::Yes,
        evd::ComputeEigenvectors::Yes,
        par,
        Default::default(),
    );
    let mut buf = MemBuffer::new(req);
    evd::evd_cplx(
        fa.as_ref(),
        s.as_mut(),
        Some(ul.as_mut()),
        Some(ur.as_mut()),
        par,
        MemStack::new(&mut buf),
        Default::default(),
    )
    .map_err(|_| Error::EigenNoConvergence)?;

    let conv = |z: &faer::c64| C64::new(z.re, z.im);
    let values = (0..n).map(|i| conv(&s[i])).collect();
    let right = DMatrix::from_fn(n, n, |i, j| conv(&ur[(i, j)]));
    let left = DMatrix::from_fn(n, n, |i, j| conv(&ul[(i, j)]));
    Ok(DenseEigen { values, right, left })
}

/// Matrix exponential by scaling and squaring with a degree-12 Taylor
/// polynomial. Intended for the small modal blocks exponentiated once per step.
pub fn expm<T: Scalar>(a: &DMatrix<T>) -> DMatrix<T> {
    let n = a.nrows();
    let norm1 = (0..n)
        .map(|j| a.column(j).iter().map(|z| z.modulus()).sum::<f64>())
        .fold(0.0, f64::max);
    let mut squarings = 0u32;
    if norm1 > 0.5 {
        squarings = (norm1 / 0.5).log2().ceil() as u32;
    }
    let scale = T::from_real(0.5f64.powi(squarings as i32));
    let scaled = a * scale;
    let mut result = DMatrix::<T>::identity(n, n);
    let mut term = DMatrix::<T>::identity(n, n);
    for k in 1..=12 {
        term = &term * &scaled * T::from_real(1.0 / k as f64);
        result += &term;
    }
    for _ in 0..squarings {
        result = &result * &result;
    }
    result
}

/// Solves `A Q + Q A^H = C` through the Kronecker form
/// `(I ⊗ A + conj(A) ⊗ I) vec(Q) = vec(C)` with a pivoted LU factorization.
/// Sized for the truncated blocks it is used on (a few dozen rows at most).
pub fn solve_lyapunov_dense(a: &DMatrix<C64>, c: &DMatrix<C64>) -> Result<DMatrix<C64>> {
    let n = a.nrows();
    let m = n * n;
    let mut k = DMatrix::<C64>::zeros(m, m);
    // vec is column-major: entry (i, j) of Q sits at j * n + i
    for j in 0..n {
        for i in 0..n {
            let row = j * n + i;
            for p in 0..n {
                // (A Q)_{ij} = sum_p A_{ip} Q_{pj}
                k[(row, j * n + p)] += a[(i, p)];
                // (Q A^H)_{ij} = sum_p Q_{ip} conj(A_{jp})
                k[(row, p * n + i)] += a[(j, p)].conj();
            }
        }
    }
    let rhs = DVector::from_fn(m, |r, _| c[(r % n, r / n)]);
    let lu = k.lu();
    let u = lu.u();
    let pivots = (0..m).map(|i| u[(i, i)].norm());
    let (pmin, pmax) = pivots.fold((f64::INFINITY, 0.0f64), |(lo, hi), p| (lo.min(p), hi.max(p)));
    if m > 0 && pmin <= 1e-13 * pmax {
        return Err(Error::SingularSylvester);
    }
    let sol = lu.solve(&rhs).ok_or(Error::SingularSylvester)?;
    if sol.iter().any(|z| !z.re.is_finite() || !z.im.is_finite()) {
        return Err(Error::SingularSylvester);
    }
    Ok(DMatrix::from_fn(n, n, |i, j| sol[j * n + i]))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn faer_left_vectors_follow_adjoint_convention() {
        let a = DMatrix::from_row_slice(
            3,
            3,
            &[
                C64::new(1.0, 0.0),
                C64::new(2.0, 0.5),
                C64::new(0.0, 0.0),
                C64::new(0.0, 0.0),
                C64::new(3.0, 0.0),
                C64::new(1.0, -1.0),
                C64::new(0.5, 0.0),
                C64::new(0.0, 0.0),
                C64::new(-1.0, 0.2),
            ],
        );
        let eig = eigen_dense(&a).unwrap();
        for k in 0..3 {
            let lam = eig.values[k];
            let v = eig.right.column(k).into_owned();
            let u = eig.left.column(k).into_owned();
            let rr = (&a * &v - &v * lam).norm();
            let rl = (a.adjoint() * &u - &u * lam.conj()).norm();
            assert!(rr < 1e-12, "right residual {rr}");
            assert!(rl < 1e-12, "left residual {rl}");
        }
    }

    #[test]
    fn expm_matches_rotation() {
        let th = 1.3;
        let a = DMatrix::from_row_slice(2, 2, &[0.0, -th, th, 0.0]);
        let e = expm(&a);
        assert!((e[(0, 0)] - th.cos()).abs() < 1e-14);
        assert!((e[(1, 0)] - th.sin()).abs() < 1e-14);
    }

    #[test]
    fn lyapunov_dense_residual() {
        let a = DMatrix::from_row_slice(
            3,
            3,
            &[2.0, 1.0, 0.3, 0.0, 1.5, -0.7, 0.0, 0.0, 0.8],
        );
        let a = to_complex(&a);
        let c = DMatrix::<C64>::identity(3, 3);
        let q = solve_lyapunov_dense(&a, &c).unwrap();
        let res = &a * &q + &q * a.adjoint() - c;
        assert!(max_abs(&res) < 1e-12);
    }
}
