//! Finite-dimensional operator models `dX/dt + A X = 0`.
//!
//! Two constructors are provided: a 1D advection–diffusion–reaction operator
//! on the unit interval with homogeneous Dirichlet boundary, and a wrapper for
//! an arbitrary dense matrix. Every model carries positive quadrature weights
//! that define the inner product used throughout the crate, and a binary
//! mask marking the control subdomain.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{self, Scalar, C64};

#[derive(Debug, Clone)]
pub struct OperatorModel {
    generator: DMatrix<C64>,
    weights: DVector<f64>,
    mask: DVector<f64>,
    /// Grid abscissae for grid-based models; `None` for matrix models.
    grid: Option<Vec<f64>>,
    pub label: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdvectionDiffusionSpec {
    pub n: usize,
    pub nu: f64,
    /// Constant advection speed.
    pub f: f64,
    /// Constant reaction coefficient.
    pub c: f64,
}

impl AdvectionDiffusionSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n < 8 {
            return Err(Error::InvalidModel(format!("grid size {} < 8", self.n)));
        }
        if !(self.nu > 0.0) || !self.nu.is_finite() {
            return Err(Error::InvalidModel(format!("viscosity {} must be positive", self.nu)));
        }
        if !self.f.is_finite() || !self.c.is_finite() {
            return Err(Error::InvalidModel("non-finite coefficient".into()));
        }
        Ok(())
    }
}

/// Central-difference discretization of `-nu u'' + f u' + c u` on (0, 1).
pub fn build_advection_diffusion(spec: &AdvectionDiffusionSpec) -> Result<OperatorModel> {
    spec.validate()?;
    let n = spec.n;
    let h = 1.0 / (n as f64 + 1.0);
    let diff = spec.nu / (h * h);
    let adv = spec.f / (2.0 * h);
    let mut a = DMatrix::<f64>::zeros(n, n);
    for i in 0..n {
        a[(i, i)] = 2.0 * diff + spec.c;
        if i > 0 {
            a[(i, i - 1)] = -diff - adv;
        }
        if i + 1 < n {
            a[(i, i + 1)] = -diff + adv;
        }
    }
    let grid = (1..=n).map(|i| i as f64 * h).collect();
    Ok(OperatorModel {
        generator: linalg::to_complex(&a),
        weights: DVector::from_element(n, h),
        mask: DVector::from_element(n, 1.0),
        grid: Some(grid),
        label: format!(
            "advection-diffusion n={} nu={} f={} c={}",
            spec.n, spec.nu, spec.f, spec.c
        ),
    })
}

/// Wraps a dense generator after validating dimensions, weights and mask.
pub fn build_from_matrix(
    entries: DMatrix<C64>,
    weights: DVector<f64>,
    mask: DVector<f64>,
) -> Result<OperatorModel> {
    let (r, c) = entries.shape();
    if r != c {
        return Err(Error::DimensionMismatch(format!("generator is {r}x{c}, expected square")));
    }
    if weights.len() != r || mask.len() != r {
        return Err(Error::DimensionMismatch(format!(
            "generator dimension {r}, weights {}, mask {}",
            weights.len(),
            mask.len()
        )));
    }
    if r == 0 {
        return Err(Error::InvalidModel("empty generator".into()));
    }
    validate_weights_mask(&weights, &mask)?;
    if entries.iter().any(|z| !z.re.is_finite() || !z.im.is_finite()) {
        return Err(Error::InvalidModel("non-finite generator entry".into()));
    }
    Ok(OperatorModel {
        generator: entries,
        weights,
        mask,
        grid: None,
        label: format!("matrix n={r}"),
    })
}

pub fn build_from_real_matrix(
    entries: DMatrix<f64>,
    weights: DVector<f64>,
    mask: DVector<f64>,
) -> Result<OperatorModel> {
    build_from_matrix(linalg::to_complex(&entries), weights, mask)
}

fn validate_weights_mask(weights: &DVector<f64>, mask: &DVector<f64>) -> Result<()> {
    if let Some(i) = weights.iter().position(|&w| !(w > 0.0) || !w.is_finite()) {
        return Err(Error::InvalidModel(format!("weight {} at index {i} is not positive", weights[i])));
    }
    if let Some(i) = mask.iter().position(|&m| m != 0.0 && m != 1.0) {
        return Err(Error::InvalidModel(format!("mask entry {} at index {i} is not 0 or 1", mask[i])));
    }
    if mask.iter().all(|&m| m == 0.0) {
        return Err(Error::InvalidModel("mask is identically zero".into()));
    }
    Ok(())
}

/// Returns a copy of `model` whose mask is 1 exactly on grid points in `(lo, hi)`.
///
/// Matrix models use the uniform abscissae `(i + 1) / (n + 1)`.
pub fn subdomain_mask(model: &OperatorModel, lo: f64, hi: f64) -> Result<OperatorModel> {
    if !(0.0..1.0).contains(&lo) || !(hi > lo && hi <= 1.0) {
        return Err(Error::InvalidArgument(format!(
            "mask interval requires 0 <= lo < hi <= 1, got ({lo}, {hi})"
        )));
    }
    let xs = model.abscissae();
    let mask = DVector::from_iterator(
        xs.len(),
        xs.iter().map(|&x| if x > lo && x < hi { 1.0 } else { 0.0 }),
    );
    if mask.iter().all(|&m| m == 0.0) {
        return Err(Error::EmptyMask { lo, hi });
    }
    let mut out = model.clone();
    out.mask = mask;
    Ok(out)
}

impl OperatorModel {
    pub fn dim(&self) -> usize {
        self.generator.nrows()
    }

    pub fn generator(&self) -> &DMatrix<C64> {
        &self.generator
    }

    pub fn weights(&self) -> &DVector<f64> {
        &self.weights
    }

    pub fn mask(&self) -> &DVector<f64> {
        &self.mask
    }

    pub fn with_mask(&self, mask: DVector<f64>) -> Result<OperatorModel> {
        if mask.len() != self.dim() {
            return Err(Error::DimensionMismatch(format!(
                "mask length {} for dimension {}",
                mask.len(),
                self.dim()
            )));
        }
        validate_weights_mask(&self.weights, &mask)?;
        let mut out = self.clone();
        out.mask = mask;
        Ok(out)
    }

    pub fn abscissae(&self) -> Vec<f64> {
        match &self.grid {
            Some(g) => g.clone(),
            None => {
                let n = self.dim();
                (1..=n).map(|i| i as f64 / (n as f64 + 1.0)).collect()
            }
        }
    }

    /// True when every generator entry has zero imaginary part.
    pub fn is_real(&self) -> bool {
        self.generator.iter().all(|z| z.im == 0.0)
    }

    pub fn real_generator(&self) -> Option<DMatrix<f64>> {
        self.is_real().then(|| self.generator.map(|z| z.re))
    }

    pub fn inner<T: Scalar>(&self, x: &DVector<T>, y: &DVector<T>) -> T {
        linalg::inner(&self.weights, x, y)
    }

    pub fn norm<T: Scalar>(&self, x: &DVector<T>) -> f64 {
        linalg::norm(&self.weights, x)
    }

    pub fn apply_mask<T: Scalar>(&self, x: &DVector<T>) -> DVector<T> {
        x.zip_map(&self.mask, |xi, m| xi * T::from_real(m))
    }

    /// Adjoint of the generator in the weighted inner product: `W^{-1} A^H W`.
    pub fn weighted_adjoint(&self) -> DMatrix<C64> {
        let n = self.dim();
        let ah = self.generator.adjoint();
        DMatrix::from_fn(n, n, |i, j| ah[(i, j)] * (self.weights[j] / self.weights[i]))
    }

    pub fn generator_norm(&self) -> f64 {
        self.generator.norm()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::C64;
    use proptest::prelude::*;

    fn sym_eigs(m: &DMatrix<f64>) -> Vec<f64> {
        let mut v: Vec<f64> = m.clone().symmetric_eigenvalues().iter().copied().collect();
        v.sort_by(f64::total_cmp);
        v
    }

    #[test]
    fn pure_diffusion_smallest_eigenvalue_matches_continuum() {
        let m = build_advection_diffusion(&AdvectionDiffusionSpec { n: 200, nu: 0.01, f: 0.0, c: 0.0 }).unwrap();
        let a = m.real_generator().unwrap();
        let eigs = sym_eigs(&a);
        let pi2 = std::f64::consts::PI.powi(2);
        for k in 1..=4 {
            let cont = 0.01 * pi2 * (k * k) as f64;
            assert!((eigs[k - 1] - cont).abs() / cont < 0.01, "k={k}: {} vs {cont}", eigs[k - 1]);
        }
        assert!((eigs[0] - 0.0987).abs() < 1e-3);
    }

    #[test]
    fn reaction_shift_moves_spectrum() {
        let m = build_advection_diffusion(&AdvectionDiffusionSpec { n: 200, nu: 0.01, f: 0.0, c: -0.5 }).unwrap();
        let eigs = sym_eigs(&m.real_generator().unwrap());
        assert!((eigs[0] + 0.401).abs() < 2e-3);
        assert!((eigs[1] + 0.105).abs() < 2e-3);
        assert!((eigs[2] - 0.388).abs() < 2e-3);
    }

    #[test]
    fn small_diffusion_is_spd_tridiagonal() {
        let m = build_advection_diffusion(&AdvectionDiffusionSpec { n: 8, nu: 1.0, f: 0.0, c: 0.0 }).unwrap();
        let a = m.real_generator().unwrap();
        assert_eq!(a, a.transpose());
        for i in 0..8usize {
            for j in 0..8usize {
                if i.abs_diff(j) > 1 {
                    assert_eq!(a[(i, j)], 0.0);
                }
            }
        }
        assert!(sym_eigs(&a)[0] > 0.0);
    }

    #[test]
    fn rejects_bad_specs() {
        assert!(build_advection_diffusion(&AdvectionDiffusionSpec { n: 7, nu: 1.0, f: 0.0, c: 0.0 }).is_err());
        assert!(build_advection_diffusion(&AdvectionDiffusionSpec { n: 10, nu: 0.0, f: 0.0, c: 0.0 }).is_err());
    }

    #[test]
    fn matrix_models() {
        let one = DVector::from_element(2, 1.0);
        let id = DMatrix::<f64>::identity(2, 2);
        assert!(build_from_real_matrix(id, one.clone(), one.clone()).is_ok());
        let nn = DMatrix::from_row_slice(2, 2, &[1.0, 1.0, 0.0, 2.0]);
        let m = build_from_real_matrix(nn, one.clone(), one.clone()).unwrap();
        assert!(m.is_real());
        let rect = DMatrix::<f64>::zeros(2, 3);
        assert!(matches!(
            build_from_real_matrix(rect, one.clone(), one.clone()),
            Err(Error::DimensionMismatch(_))
        ));
        let id = DMatrix::<f64>::identity(2, 2);
        assert!(build_from_real_matrix(id.clone(), DVector::from_vec(vec![1.0, 0.0]), one.clone()).is_err());
        assert!(build_from_real_matrix(id.clone(), one.clone(), DVector::from_vec(vec![1.0, 0.5])).is_err());
        assert!(build_from_real_matrix(id, one, DVector::from_vec(vec![0.0, 0.0])).is_err());
    }

    #[test]
    fn masks() {
        let m = build_advection_diffusion(&AdvectionDiffusionSpec { n: 200, nu: 0.01, f: 0.0, c: 0.0 }).unwrap();
        let full = subdomain_mask(&m, 0.0, 1.0).unwrap();
        assert!(full.mask().iter().all(|&v| v == 1.0));
        let part = subdomain_mask(&m, 0.3, 0.5).unwrap();
        for (x, v) in m.abscissae().iter().zip(part.mask().iter()) {
            assert_eq!(*v == 1.0, *x > 0.3 && *x < 0.5);
        }
        let small = build_advection_diffusion(&AdvectionDiffusionSpec { n: 10, nu: 1.0, f: 0.0, c: 0.0 }).unwrap();
        assert!(matches!(subdomain_mask(&small, 0.5, 0.5001), Err(Error::EmptyMask { .. })));
    }

    #[test]
    fn weighted_adjoint_is_adjoint() {
        let a = DMatrix::from_fn(4, 4, |i, j| C64::new((i * 3 + j) as f64 * 0.1, (i as f64 - j as f64) * 0.2));
        let w = DVector::from_vec(vec![0.5, 1.0, 2.0, 0.25]);
        let m = build_from_matrix(a, w, DVector::from_element(4, 1.0)).unwrap();
        let x = DVector::from_fn(4, |i, _| C64::new(i as f64, 1.0));
        let y = DVector::from_fn(4, |i, _| C64::new(1.0, -(i as f64)));
        let lhs = m.inner(&(m.generator() * &x), &y);
        let rhs = m.inner(&x, &(m.weighted_adjoint() * &y));
        assert!((lhs - rhs).norm() < 1e-12);
    }

    proptest! {
        #[test]
        fn inner_product_properties(
            w in prop::collection::vec(0.1f64..3.0, 5),
            xs in prop::collection::vec(-2.0f64..2.0, 10),
            ys in prop::collection::vec(-2.0f64..2.0, 10),
            mask in prop::collection::vec(prop::bool::ANY, 5),
        ) {
            let w = DVector::from_vec(w);
            let x = DVector::from_fn(5, |i, _| C64::new(xs[i], xs[i + 5]));
            let y = DVector::from_fn(5, |i, _| C64::new(ys[i], ys[i + 5]));
            let xy = linalg::inner(&w, &x, &y);
            let yx = linalg::inner(&w, &y, &x);
            prop_assert!((xy - yx.conj()).norm() < 1e-12);
            prop_assert!(linalg::inner(&w, &x, &x).re >= 0.0);
            let mut mvec: Vec<f64> = mask.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect();
            mvec[0] = 1.0;
            let model = build_from_matrix(DMatrix::identity(5, 5), w.clone(), DVector::from_vec(mvec)).unwrap();
            let lhs = model.inner(&model.apply_mask(&x), &y);
            let rhs = model.inner(&x, &model.apply_mask(&y));
            prop_assert!((lhs - rhs).norm() < 1e-12);
        }
    }
}
