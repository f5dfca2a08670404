//! Spectral decomposition of the generator.
//!
//! Right eigenvectors `φ_j` and eigenvectors `φ*_j` of the weighted adjoint
//! are computed together, sorted by ascending real part, and biorthonormalized
//! on the leading block so that `<φ_i, φ*_j> = δ_ij`. The unstable block is the
//! shortest conjugate-closed prefix whose removal leaves a strictly stable
//! remainder and whose real parts sum to a positive number.

use std::cmp::Ordering;

use nalgebra::{DMatrix, DVector};
use serde::Serialize;

use crate::error::{Error, Result};
use crate::linalg::{self, C64};
use crate::model::OperatorModel;

/// Relative tolerance under which two computed eigenvalues are treated as one.
pub const CLUSTER_TOL: f64 = 1e-6;
/// Relative numerical-rank threshold used by the semisimplicity check.
pub const RANK_TOL: f64 = 1e-8;
/// Imaginary parts below this (relative to the generator scale) are snapped to
/// zero for real generators.
const REAL_SNAP: f64 = 1e-9;

#[derive(Debug, Clone)]
pub struct SpectralData {
    /// Sorted by ascending real part; conjugate pairs adjacent, negative
    /// imaginary part first.
    pub eigenvalues: Vec<C64>,
    /// Columns are right eigenvectors, unit weighted norm.
    pub right: DMatrix<C64>,
    /// Columns are eigenvectors of the weighted adjoint for `conj(λ_j)`.
    pub left: DMatrix<C64>,
    /// Index of the conjugate partner of each eigenvalue (real generators only).
    pub pair_index: Vec<Option<usize>>,
    pub real_generator: bool,
    pub right_residuals: Vec<f64>,
    pub left_residuals: Vec<f64>,
    generator: DMatrix<C64>,
    weights: DVector<f64>,
}

#[derive(Debug, Clone)]
pub struct UnstableDecomposition {
    pub n_unstable: usize,
    /// `diag(λ_1, .., λ_N)`.
    pub a_u: DMatrix<C64>,
    pub right: DMatrix<C64>,
    pub left: DMatrix<C64>,
    /// `Re λ_{N+1}`, infinite when the whole spectrum is unstable.
    pub stable_rate: f64,
    pub sum_re: f64,
    pub biorth_residual: f64,
    weights: DVector<f64>,
}

#[derive(Debug, Clone)]
pub struct LyapunovWeight {
    pub q: DMatrix<C64>,
    pub gamma: f64,
    /// The stable block `A_s` the equation was solved for.
    pub a_s: DMatrix<C64>,
    pub residual: f64,
    /// `min_x Re<A_s x, x>_Q / |x|_Q^2` with `<x, y>_Q = y^H Q x`.
    pub coercivity: f64,
    /// Raised when the coercivity falls below `gamma / 2`.
    pub flag_gamma_too_large: bool,
}

#[derive(Debug, Clone, Serialize)]
pub struct DefectiveEigenvalue {
    pub re: f64,
    pub im: f64,
    pub algebraic: usize,
    pub geometric: usize,
}

#[derive(Debug, Clone, Serialize)]
pub struct SemisimpleReport {
    pub semisimple: bool,
    pub defective: Vec<DefectiveEigenvalue>,
}

fn sort_key_cmp(a: &C64, b: &C64, real: bool) -> Ordering {
    let primary = a.re.total_cmp(&b.re);
    if primary != Ordering::Equal {
        return primary;
    }
    if real {
        a.im.abs().total_cmp(&b.im.abs()).then(a.im.total_cmp(&b.im))
    } else {
        a.im.total_cmp(&b.im)
    }
}

/// Rotates `v` so its largest entry is real and positive.
fn fix_phase(v: &mut DVector<C64>) {
    let (k, _) = v
        .iter()
        .enumerate()
        .fold((0, 0.0), |(bk, bm), (i, z)| if z.norm() > bm { (i, z.norm()) } else { (bk, bm) });
    let z = v[k];
    if z.norm() > 0.0 {
        let phase = z.conj() / z.norm();
        *v *= phase;
    }
}

fn weighted_normalize(w: &DVector<f64>, v: &mut DVector<C64>) {
    let nrm = linalg::norm(w, v);
    if nrm > 0.0 {
        *v /= C64::new(nrm, 0.0);
    }
}

/// Full eigensystem of the generator and its weighted adjoint.
pub fn eigendecompose(model: &OperatorModel, tol: f64) -> Result<SpectralData> {
    if !(tol > 0.0) {
        return Err(Error::InvalidArgument(format!("tolerance {tol} must be positive")));
    }
    let a = model.generator().clone();
    let w = model.weights().clone();
    let n = model.dim();
    let real_generator = model.is_real();
    let eig = linalg::eigen_dense(&a)?;

    let mut values = eig.values.clone();
    let mut right: Vec<DVector<C64>> = (0..n).map(|j| eig.right.column(j).into_owned()).collect();
    // weighted-adjoint eigenvectors are W^{-1} u for standard left vectors u
    let mut left: Vec<DVector<C64>> = (0..n)
        .map(|j| {
            let u = eig.left.column(j);
            DVector::from_fn(n, |i, _| u[i] / w[i])
        })
        .collect();

    let mut pair_index = vec![None; n];
    if real_generator {
        let scale = a.norm().max(1.0);
        let snap = REAL_SNAP * scale;
        let mut taken = vec![false; n];
        for j in 0..n {
            if values[j].im.abs() <= snap {
                values[j].im = 0.0;
                for v in [&mut right[j], &mut left[j]] {
                    fix_phase(v);
                    v.iter_mut().for_each(|z| z.im = 0.0);
                }
                taken[j] = true;
            }
        }
        for j in 0..n {
            if taken[j] || values[j].im < 0.0 {
                continue;
            }
            let target = values[j].conj();
            let partner = (0..n)
                .filter(|&k| !taken[k] && k != j && values[k].im < 0.0)
                .min_by(|&p, &q| (values[p] - target).norm().total_cmp(&(values[q] - target).norm()));
            let Some(k) = partner else {
                return Err(Error::EigenResidual { index: j, residual: values[j].im, tol: snap });
            };
            taken[j] = true;
            taken[k] = true;
            values[k] = values[j].conj();
            right[k] = right[j].map(|z| z.conj());
            left[k] = left[j].map(|z| z.conj());
            pair_index[j] = Some(k);
            pair_index[k] = Some(j);
        }
    }

    for j in 0..n {
        weighted_normalize(&w, &mut right[j]);
        weighted_normalize(&w, &mut left[j]);
    }

    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&p, &q| sort_key_cmp(&values[p], &values[q], real_generator));
    let mut position = vec![0; n];
    for (new, &old) in order.iter().enumerate() {
        position[old] = new;
    }
    let eigenvalues: Vec<C64> = order.iter().map(|&o| values[o]).collect();
    let right_m = DMatrix::from_columns(&order.iter().map(|&o| right[o].clone()).collect::<Vec<_>>());
    let left_m = DMatrix::from_columns(&order.iter().map(|&o| left[o].clone()).collect::<Vec<_>>());
    let pair_index = order.iter().map(|&o| pair_index[o].map(|p| position[p])).collect();

    let adj = model.weighted_adjoint();
    let mut right_residuals = Vec::with_capacity(n);
    let mut left_residuals = Vec::with_capacity(n);
    for j in 0..n {
        let v = right_m.column(j).into_owned();
        let u = left_m.column(j).into_owned();
        let lam = eigenvalues[j];
        let rr = linalg::norm(&w, &(&a * &v - &v * lam)) / linalg::norm(&w, &v);
        let rl = linalg::norm(&w, &(&adj * &u - &u * lam.conj())) / linalg::norm(&w, &u);
        if rr > tol || !rr.is_finite() {
            return Err(Error::EigenResidual { index: j, residual: rr, tol });
        }
        if rl > tol || !rl.is_finite() {
            return Err(Error::EigenResidual { index: j, residual: rl, tol });
        }
        right_residuals.push(rr);
        left_residuals.push(rl);
    }

    Ok(SpectralData {
        eigenvalues,
        right: right_m,
        left: left_m,
        pair_index,
        real_generator,
        right_residuals,
        left_residuals,
        generator: a,
        weights: w,
    })
}

impl SpectralData {
    pub fn dim(&self) -> usize {
        self.eigenvalues.len()
    }

    pub fn weights(&self) -> &DVector<f64> {
        &self.weights
    }

    pub fn generator(&self) -> &DMatrix<C64> {
        &self.generator
    }

    /// Indices whose eigenvalues lie within the cluster tolerance of `λ_i`.
    pub fn cluster_of(&self, i: usize) -> Vec<usize> {
        let lam = self.eigenvalues[i];
        let ctol = CLUSTER_TOL * lam.norm().max(1.0);
        (0..self.dim()).filter(|&j| (self.eigenvalues[j] - lam).norm() <= ctol).collect()
    }

    /// Cross-Gram `G_ij = <φ_i, φ*_j>` for the first `k` modes.
    pub fn cross_gram(&self, k: usize) -> DMatrix<C64> {
        let l = linalg::pairing_rows(&self.weights, &self.left.columns(0, k).into_owned());
        (l * self.right.columns(0, k)).transpose()
    }

    /// `max |<φ_i, φ*_j> - δ_ij|` over the first `k` modes.
    pub fn biorth_residual(&self, k: usize) -> f64 {
        let g = self.cross_gram(k);
        let id = DMatrix::<C64>::identity(k, k);
        linalg::max_abs(&(g - id))
    }
}

/// Rescales (and, inside degenerate eigenspaces, recombines) the left vectors
/// of the leading block so that `<φ_i, φ*_j> = δ_ij`.
pub fn biorthonormalize(spec: &SpectralData, leading: usize) -> Result<SpectralData> {
    let n = spec.dim();
    if leading > n {
        return Err(Error::InvalidArgument(format!("leading block {leading} exceeds dimension {n}")));
    }
    let mut out = spec.clone();
    let mut done = vec![false; n];
    for i in 0..leading {
        if done[i] {
            continue;
        }
        let cluster = spec.cluster_of(i);
        let m = cluster.len();
        // G_ab = <φ_a, φ*_b>
        let g = DMatrix::from_fn(m, m, |a, b| {
            let va = spec.right.column(cluster[a]).into_owned();
            let ub = spec.left.column(cluster[b]).into_owned();
            linalg::inner(&spec.weights, &va, &ub)
        });
        let sv = g.clone().singular_values();
        let smax = sv.max();
        let smin = sv.min();
        if !(smin > 1e-12 * smax.max(1e-300)) {
            return Err(Error::SingularCrossGram { index: i });
        }
        let ginv = g.try_inverse().ok_or(Error::SingularCrossGram { index: i })?;
        // new φ*_b = Σ_c φ*_c M_cb with G conj(M) = I
        let mmat = ginv.map(|z| z.conj());
        let old: Vec<DVector<C64>> = cluster.iter().map(|&c| spec.left.column(c).into_owned()).collect();
        for (b, &cb) in cluster.iter().enumerate() {
            let mut acc = DVector::<C64>::zeros(n);
            for (c, oc) in old.iter().enumerate() {
                acc += oc * mmat[(c, b)];
            }
            out.left.set_column(cb, &acc);
            done[cb] = true;
        }
    }
    // keep conjugate pairs exact
    for j in 0..n {
        if let Some(p) = out.pair_index[j] {
            if out.eigenvalues[j].im > 0.0 && done[j] {
                let conj = out.left.column(j).map(|z| z.conj());
                out.left.set_column(p, &conj);
            }
        }
    }
    Ok(out)
}

/// Minimal conjugate-closed prefix length with strictly stable remainder and
/// positive real-part sum.
pub fn unstable_index(eigenvalues: &[C64], pair_index: &[Option<usize>]) -> Result<usize> {
    let n = eigenvalues.len();
    let nonpos = eigenvalues.iter().filter(|z| z.re <= 0.0).count();
    if nonpos == 0 {
        return Ok(0);
    }
    if eigenvalues[..nonpos].iter().any(|z| z.re > 0.0) {
        return Err(Error::InvalidArgument("eigenvalues are not sorted by real part".into()));
    }
    let splits_pair = |k: usize| k > 0 && k < n && pair_index.get(k - 1).copied().flatten() == Some(k);
    let mut k = nonpos;
    while k <= n {
        if splits_pair(k) {
            k += 1;
            continue;
        }
        let sum: f64 = eigenvalues[..k].iter().map(|z| z.re).sum();
        if sum > 0.0 {
            return Ok(k);
        }
        k += 1;
    }
    Err(Error::UnstableIndexUnattainable)
}

/// Selects the unstable block and biorthonormalizes it.
pub fn select_unstable_index(spec: &SpectralData) -> Result<UnstableDecomposition> {
    let n_unstable = unstable_index(&spec.eigenvalues, &spec.pair_index)?;
    let spec = if n_unstable > 0 { biorthonormalize(spec, n_unstable)? } else { spec.clone() };
    let n = spec.dim();
    let a_u = DMatrix::from_diagonal(&DVector::from_iterator(
        n_unstable,
        spec.eigenvalues[..n_unstable].iter().copied(),
    ));
    let stable_rate = if n_unstable < n { spec.eigenvalues[n_unstable].re } else { f64::INFINITY };
    let sum_re = spec.eigenvalues[..n_unstable].iter().map(|z| z.re).sum();
    Ok(UnstableDecomposition {
        n_unstable,
        a_u,
        right: spec.right.columns(0, n_unstable).into_owned(),
        left: spec.left.columns(0, n_unstable).into_owned(),
        stable_rate,
        sum_re,
        biorth_residual: spec.biorth_residual(n_unstable),
        weights: spec.weights.clone(),
    })
}

/// Checks that every distinct eigenvalue among the leading `n_lead` has as many
/// independent eigenvectors as its algebraic multiplicity.
pub fn check_semisimple(spec: &SpectralData, n_lead: usize, tol: f64) -> SemisimpleReport {
    let n = spec.dim();
    let n_lead = n_lead.min(n);
    let mut seen = vec![false; n];
    let mut defective = Vec::new();
    for i in 0..n_lead {
        if seen[i] {
            continue;
        }
        let cluster = spec.cluster_of(i);
        for &c in &cluster {
            seen[c] = true;
        }
        let algebraic = cluster.len();
        if algebraic == 1 {
            continue;
        }
        let lam = cluster.iter().map(|&c| spec.eigenvalues[c]).sum::<C64>() / C64::new(algebraic as f64, 0.0);
        let shifted = &spec.generator - DMatrix::<C64>::identity(n, n) * lam;
        let sv = shifted.singular_values();
        let smax = sv.max();
        let thresh = tol * smax.max(f64::MIN_POSITIVE);
        let rank = sv.iter().filter(|&&s| s > thresh).count();
        let geometric = n - rank;
        if geometric < algebraic {
            defective.push(DefectiveEigenvalue { re: lam.re, im: lam.im, algebraic, geometric });
        }
    }
    SemisimpleReport { semisimple: defective.is_empty(), defective }
}

impl UnstableDecomposition {
    pub fn dim(&self) -> usize {
        self.weights.len()
    }

    pub fn weights(&self) -> &DVector<f64> {
        &self.weights
    }

    /// `L` with `L x = (<x, φ*_j>)_j`.
    pub fn sensor_rows(&self) -> DMatrix<C64> {
        linalg::pairing_rows(&self.weights, &self.left)
    }

    /// Modal coordinates `y_j = <x, φ*_j>` and stable component `x - Σ y_j φ_j`.
    pub fn project(&self, x: &DVector<C64>) -> (DVector<C64>, DVector<C64>) {
        let y = DVector::from_fn(self.n_unstable, |j, _| {
            linalg::inner(&self.weights, x, &self.left.column(j).into_owned())
        });
        let xs = x - &self.right * &y;
        (y, xs)
    }

    pub fn apply_projector(&self, x: &DVector<C64>) -> DVector<C64> {
        let (y, _) = self.project(x);
        &self.right * y
    }
}

/// Solves `A_s Q + Q A_s^H = γ I` for a given stable block.
pub fn solve_lyapunov_block(a_s: &DMatrix<C64>, gamma: f64) -> Result<LyapunovWeight> {
    if !(gamma > 0.0) {
        return Err(Error::InvalidArgument(format!("gamma {gamma} must be positive")));
    }
    let m = a_s.nrows();
    if m == 0 || a_s.ncols() != m {
        return Err(Error::DimensionMismatch("stable block must be square and nonempty".into()));
    }
    let rhs = DMatrix::<C64>::identity(m, m) * C64::new(gamma, 0.0);
    let q = linalg::solve_lyapunov_dense(a_s, &rhs)?;
    let residual = linalg::max_abs(&(a_s * &q + &q * a_s.adjoint() - &rhs));
    let herm_err = linalg::max_abs(&(&q - q.adjoint()));
    if herm_err > 1e-8 * linalg::max_abs(&q).max(1.0) {
        return Err(Error::LyapunovNotPositive);
    }
    let q = (&q + q.adjoint()) * C64::new(0.5, 0.0);
    let chol = q.clone().cholesky().ok_or(Error::LyapunovNotPositive)?;
    let l = chol.l();
    let linv = l.clone().try_inverse().ok_or(Error::LyapunovNotPositive)?;
    let sym = (&q * a_s + a_s.adjoint() * &q) * C64::new(0.5, 0.0);
    let pencil = &linv * sym * linv.adjoint();
    let pencil = (&pencil + pencil.adjoint()) * C64::new(0.5, 0.0);
    let coercivity = pencil.symmetric_eigenvalues().iter().copied().fold(f64::INFINITY, f64::min);
    let flag_gamma_too_large = coercivity < 0.5 * gamma * (1.0 - 1e-12);
    Ok(LyapunovWeight { q, gamma, a_s: a_s.clone(), residual, coercivity, flag_gamma_too_large })
}

/// Default number of stable modes retained: `min(2N, dim - N)`.
pub fn default_trunc(dec: &UnstableDecomposition) -> usize {
    (2 * dec.n_unstable).max(1).min(dec.dim() - dec.n_unstable)
}

/// Re-norming weight on the span of the first `trunc` stable eigenvectors.
///
/// The block `A_s` is the generator written in a weighted-orthonormal basis of
/// that invariant subspace, so the resulting `Q`-norm is comparable to the
/// model norm.
pub fn solve_lyapunov(
    dec: &UnstableDecomposition,
    spec: &SpectralData,
    gamma: f64,
    trunc: usize,
) -> Result<LyapunovWeight> {
    let n = spec.dim();
    let start = dec.n_unstable;
    if trunc == 0 || start + trunc > n {
        return Err(Error::InvalidArgument(format!(
            "truncation {trunc} invalid for {} stable modes",
            n - start
        )));
    }
    let w = spec.weights();
    let sqrt_w = w.map(f64::sqrt);
    // orthonormalize in the weighted space via QR of W^{1/2} V
    let v = spec.right.columns(start, trunc).into_owned();
    let scaled = DMatrix::from_fn(n, trunc, |i, j| v[(i, j)] * sqrt_w[i]);
    let q = scaled.qr().q();
    let z = DMatrix::from_fn(n, trunc, |i, j| q[(i, j)] / sqrt_w[i]);
    let a_s = linalg::pairing_rows(w, &z) * (spec.generator() * &z);
    solve_lyapunov_block(&a_s, gamma)
}
