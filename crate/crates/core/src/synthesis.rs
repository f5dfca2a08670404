//! Noise matrices, actuators and feedback laws.
//!
//! The modal core `dy = −A_u y dt + Σ_k C^k y ∘ dβ_k` is stabilized by skew
//! rotation generators `C^k`. Actuators supported on the mask are chosen so
//! that their masked pairing with the dual eigenvectors is the identity, which
//! makes the feedback `R_k(X) = Σ_ij C^k_ij <X, φ*_j> φ_i` act on the modal
//! coordinates exactly as `C^k`.

use nalgebra::{DMatrix, DVector};
use serde::Serialize;

use crate::error::{Error, Result};
use crate::linalg::{self, Scalar, C64};
use crate::model::OperatorModel;
use crate::sde::{self, Diffusion, Interpretation, LyapunovParams, SdeSystem};
use crate::spectral::{self, SpectralData, UnstableDecomposition};

/// Refuse actuator Gram matrices above this condition number.
pub const MAX_GRAM_CONDITION: f64 = 1e12;
/// Tolerance on the masked pairing identity `<mask φ_i, φ*_j> = δ_ij`.
pub const ACTUATOR_TOL: f64 = 1e-8;
/// Gram–Schmidt drops candidates whose remaining norm falls below this
/// fraction of their original norm.
const GS_DROP: f64 = 1e-8;

#[derive(Debug, Clone, Serialize)]
pub struct NoiseDesign {
    pub m: usize,
    pub n_modes: usize,
    #[serde(skip)]
    pub matrices: Vec<DMatrix<f64>>,
    pub sigma: f64,
    pub achieved_rate: Option<f64>,
    pub rate_stderr: Option<f64>,
    pub certified: bool,
    /// False for a single mode: there is no rotation to mix with.
    pub noise_can_stabilize: bool,
}

impl NoiseDesign {
    pub fn complex_matrices(&self) -> Vec<DMatrix<C64>> {
        self.matrices.iter().map(linalg::to_complex).collect()
    }

    fn matrices_as<T: Scalar>(&self) -> Vec<DMatrix<T>> {
        self.matrices.iter().map(|c| c.map(|v| T::from_real(v))).collect()
    }
}

/// `C^k = σ (E_{k,k+1} − E_{k+1,k})`, `k = 1..N−1`.
pub fn synthesize_noise_matrices(lambda_u: &[C64], sigma: f64) -> Result<NoiseDesign> {
    let n = lambda_u.len();
    if n == 0 {
        return Err(Error::NothingToStabilize);
    }
    if !(sigma >= 0.0) || !sigma.is_finite() {
        return Err(Error::InvalidArgument(format!("sigma must be finite and non-negative, got {sigma}")));
    }
    let sum: f64 = lambda_u.iter().map(|z| z.re).sum();
    if n == 1 && lambda_u[0].re <= 0.0 {
        return Err(Error::SingleModeUnstabilizable(lambda_u[0].re));
    }
    if sum <= 0.0 {
        return Err(Error::InvalidArgument(format!("real parts sum to {sum}, need a positive trace")));
    }
    let matrices = (0..n.saturating_sub(1))
        .map(|k| {
            let mut c = DMatrix::zeros(n, n);
            c[(k, k + 1)] = -sigma;
            c[(k + 1, k)] = sigma;
            c
        })
        .collect::<Vec<_>>();
    Ok(NoiseDesign {
        m: matrices.len(),
        n_modes: n,
        matrices,
        sigma,
        achieved_rate: None,
        rate_stderr: None,
        certified: false,
        noise_can_stabilize: n > 1,
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct TuneParams {
    pub estimator: LyapunovParams,
    /// Number of doublings after the starting intensity.
    pub max_doublings: usize,
    /// Standard errors added to the estimate before comparing with the target.
    pub confidence: f64,
}

impl Default for TuneParams {
    fn default() -> Self {
        Self { estimator: LyapunovParams::default(), max_doublings: 8, confidence: 2.0 }
    }
}

/// Top Lyapunov exponent of the modal system `dy = −A_u y dt + Σ C^k y ∘ dβ_k`.
pub fn estimate_modal_rate<T: Scalar>(
    a_u: &DMatrix<T>,
    design: &NoiseDesign,
    params: &LyapunovParams,
) -> Result<sde::LyapunovEstimate> {
    let sys = SdeSystem::new(
        -a_u.clone(),
        Diffusion::Dense(design.matrices_as::<T>()),
        Interpretation::Stratonovich,
    )?;
    sde::estimate_lyapunov(&sys, params)
}

/// Doubling search on σ from `2·max|λ_j|` until the estimated exponent plus
/// `confidence` standard errors is at most `target_rate`. σ = 0 is tried first.
pub fn tune_noise_intensity<T: Scalar>(
    a_u: &DMatrix<T>,
    target_rate: f64,
    params: &TuneParams,
) -> Result<NoiseDesign> {
    let n = a_u.nrows();
    if n == 0 {
        return Err(Error::NothingToStabilize);
    }
    if a_u.ncols() != n {
        return Err(Error::DimensionMismatch(format!("A_u is {}x{}", n, a_u.ncols())));
    }
    let lambdas = linalg::eigen_dense(&a_u.map(|z| z.to_c64()))?.values;
    let sum: f64 = lambdas.iter().map(|z| z.re).sum();
    if !(target_rate < 0.0) {
        return Err(Error::InvalidArgument(format!("target rate {target_rate} must be negative")));
    }
    let bound = -sum / n as f64;
    if target_rate <= bound {
        return Err(Error::TargetUnreachable { target: target_rate, bound });
    }
    let passes = |e: &sde::LyapunovEstimate| e.value + params.confidence * e.stderr <= target_rate;
    let certify = |mut d: NoiseDesign, e: &sde::LyapunovEstimate| {
        d.achieved_rate = Some(e.value);
        d.rate_stderr = Some(e.stderr);
        d.certified = true;
        d
    };

    let zero = synthesize_noise_matrices(&lambdas, 0.0)?;
    let est0 = estimate_modal_rate(a_u, &zero, &params.estimator)?;
    if passes(&est0) {
        return Ok(certify(zero, &est0));
    }
    if n == 1 {
        return Err(Error::TuningFailed { sigma: 0.0, best_rate: est0.value, target: target_rate });
    }
    let sigma0 = 2.0 * lambdas.iter().map(|z| z.norm()).fold(0.0, f64::max);
    let mut best = (0.0, est0.value);
    for i in 0..=params.max_doublings {
        let sigma = sigma0 * 2f64.powi(i as i32);
        let design = synthesize_noise_matrices(&lambdas, sigma)?;
        let est = estimate_modal_rate(a_u, &design, &params.estimator)?;
        if est.value < best.1 {
            best = (sigma, est.value);
        }
        if passes(&est) {
            return Ok(certify(design, &est));
        }
    }
    Err(Error::TuningFailed { sigma: best.0, best_rate: best.1, target: target_rate })
}

#[derive(Debug, Clone, Serialize)]
pub struct ActuatorSet {
    #[serde(skip)]
    pub gram: DMatrix<C64>,
    #[serde(skip)]
    pub alpha: DMatrix<C64>,
    /// Columns are the (unmasked) actuator shapes.
    #[serde(skip)]
    pub actuators: DMatrix<C64>,
    /// Columns are `mask · φ_i`, the shapes the feedback actually applies.
    #[serde(skip)]
    pub masked: DMatrix<C64>,
    pub condition_number: f64,
    pub eq18_residual: f64,
}

/// Solves the masked Gram system for actuators built from `duals` (columns)
/// and verifies the pairing identity.
///
/// With `B = diag(sqrt(w·mask)) Φ*` the Gram matrix is `conj(B^H B)`, so
/// `α^T = (B^H B)^{-1}` and `diag(sqrt(w·mask)) · mask·φ = Q R^{-H}` for
/// `B = QR`. Working from the QR factors keeps the error of the masked
/// actuators at `eps·cond(B)` instead of `eps·cond(γ) = eps·cond(B)^2`.
fn actuator_system(model: &OperatorModel, duals: &DMatrix<C64>) -> Result<ActuatorSet> {
    let w = model.weights();
    let m = model.mask();
    let (n, k) = duals.shape();
    if n != model.dim() {
        return Err(Error::DimensionMismatch(format!("vectors of length {n} for model dimension {}", model.dim())));
    }
    let s = DVector::from_fn(n, |i, _| (w[i] * m[i]).sqrt());
    let b = DMatrix::from_fn(n, k, |i, j| duals[(i, j)] * s[i]);
    // γ_lj = <mask φ*_l, φ*_j>
    let gram = DMatrix::from_fn(k, k, |l, j| {
        (0..n).map(|i| b[(i, l)] * b[(i, j)].conj()).sum::<C64>()
    });
    let gram = (&gram + gram.adjoint()) * C64::new(0.5, 0.0);
    let sv = b.clone().singular_values();
    let (lo, hi) = sv.iter().fold((f64::INFINITY, 0.0f64), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    let condition_number = if lo > 0.0 { (hi / lo).powi(2) } else { f64::INFINITY };
    if !(condition_number <= MAX_GRAM_CONDITION) {
        return Err(Error::SingularGram { condition: condition_number });
    }
    let qr = b.qr();
    let (q, r) = (qr.q(), qr.r());
    let singular = Error::SingularGram { condition: condition_number };
    let r_inv_h = r.adjoint().solve_lower_triangular(&DMatrix::identity(k, k)).ok_or(singular)?;
    let alpha_t = r.solve_upper_triangular(&r_inv_h).ok_or(Error::SingularGram { condition: condition_number })?;
    let scaled = q * r_inv_h;
    let masked = DMatrix::from_fn(n, k, |i, j| if s[i] > 0.0 { scaled[(i, j)] / s[i] } else { C64::new(0.0, 0.0) });
    // φ_i = Σ_l α_il φ*_l
    let actuators = duals * &alpha_t;
    let pairing = linalg::pairing_rows(w, duals) * &masked;
    let eq18_residual = linalg::max_abs(&(pairing - DMatrix::<C64>::identity(k, k)));
    if !(eq18_residual <= ACTUATOR_TOL) {
        return Err(Error::ActuatorIdentity(eq18_residual));
    }
    Ok(ActuatorSet { gram, alpha: alpha_t.transpose(), actuators, masked, condition_number, eq18_residual })
}

/// Actuators `φ_i = Σ_l α_il φ*_l` with `α = γ⁻¹` for the leading `n_modes`
/// dual eigenvectors. The leading block is biorthonormalized first if needed.
pub fn build_actuators(spec: &SpectralData, n_modes: usize, model: &OperatorModel) -> Result<ActuatorSet> {
    if n_modes == 0 {
        return Err(Error::NothingToStabilize);
    }
    if spec.dim() != model.dim() {
        return Err(Error::DimensionMismatch(format!("spectrum of dimension {} for model {}", spec.dim(), model.dim())));
    }
    let owned;
    let spec = if spec.biorth_residual(n_modes) > ACTUATOR_TOL {
        owned = spectral::biorthonormalize(spec, n_modes)?;
        &owned
    } else {
        spec
    };
    actuator_system(model, &spec.left.columns(0, n_modes).into_owned())
}

/// Same as [`build_actuators`] from an already selected decomposition.
pub fn build_actuators_for(dec: &UnstableDecomposition, model: &OperatorModel) -> Result<ActuatorSet> {
    if dec.n_unstable == 0 {
        return Err(Error::NothingToStabilize);
    }
    actuator_system(model, &dec.left)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ControllerKind {
    Complex,
    Real,
}

/// State-space realization of a feedback law in scalar type `T`.
#[derive(Debug, Clone)]
pub struct LawMaps<T: Scalar> {
    /// n×N, columns `mask·φ_i`.
    pub actuators: DMatrix<T>,
    /// N×n, rows reading the modal coordinates.
    pub sensors: DMatrix<T>,
    /// n×N, columns spanning the unstable subspace in the same coordinates.
    pub basis: DMatrix<T>,
    /// N×N, modal system `dy = −modal_drift·y dt + ...`.
    pub modal_drift: DMatrix<T>,
    pub coefficients: Vec<DMatrix<T>>,
}

impl<T: Scalar> LawMaps<T> {
    pub fn realized(&self, k: usize) -> DMatrix<T> {
        &self.actuators * &self.coefficients[k] * &self.sensors
    }
}

#[derive(Debug, Clone)]
pub enum RealizedMaps {
    Complex(LawMaps<C64>),
    Real(LawMaps<f64>),
}

#[derive(Debug, Clone)]
pub struct FeedbackLaw {
    pub kind: ControllerKind,
    pub noise: NoiseDesign,
    pub actuators: ActuatorSet,
    pub mask: DVector<f64>,
    pub maps: RealizedMaps,
}

impl FeedbackLaw {
    pub fn n_modes(&self) -> usize {
        self.noise.n_modes
    }

    pub fn channels(&self) -> usize {
        self.noise.m
    }

    /// The n×n map `X ↦ mask·R_k(X)`.
    pub fn realized_map(&self, k: usize) -> DMatrix<C64> {
        match &self.maps {
            RealizedMaps::Complex(m) => m.realized(k),
            RealizedMaps::Real(m) => linalg::to_complex(&m.realized(k)),
        }
    }

    pub fn sensors(&self) -> DMatrix<C64> {
        match &self.maps {
            RealizedMaps::Complex(m) => m.sensors.clone(),
            RealizedMaps::Real(m) => linalg::to_complex(&m.sensors),
        }
    }
}

/// Complex feedback law `R_k(X) = Σ_ij C^k_ij <X, φ*_j> φ_i`.
pub fn build_feedback(
    noise: &NoiseDesign,
    dec: &UnstableDecomposition,
    actuators: &ActuatorSet,
    model: &OperatorModel,
) -> Result<FeedbackLaw> {
    let n = dec.n_unstable;
    if noise.n_modes != n || actuators.masked.ncols() != n || actuators.masked.nrows() != model.dim() {
        return Err(Error::DimensionMismatch(format!(
            "noise for {} modes, actuators {:?}, decomposition {} modes of dimension {}",
            noise.n_modes,
            actuators.masked.shape(),
            n,
            model.dim()
        )));
    }
    if dec.dim() != model.dim() {
        return Err(Error::DimensionMismatch("decomposition and model differ in dimension".into()));
    }
    let maps = LawMaps {
        actuators: actuators.masked.clone(),
        sensors: dec.sensor_rows(),
        basis: dec.right.clone(),
        modal_drift: dec.a_u.clone(),
        coefficients: noise.complex_matrices(),
    };
    Ok(FeedbackLaw {
        kind: ControllerKind::Complex,
        noise: noise.clone(),
        actuators: actuators.clone(),
        mask: model.mask().clone(),
        maps: RealizedMaps::Complex(maps),
    })
}

#[derive(Debug, Clone)]
pub struct RealBasis {
    /// n×N, orthonormal in the weighted inner product.
    pub psi: DMatrix<f64>,
    /// n×N, `<ψ_i, ψ*_j> = δ_ij` with `ψ*_j` in the span of the dual eigenvectors.
    pub duals: DMatrix<f64>,
    /// N×N with entries `<A ψ_i, ψ_j>` at `(j, i)`, so that the coordinates
    /// `y_j = <X, ψ*_j>` of the free dynamics obey `dy/dt = −A_u_re y`.
    pub a_u_re: DMatrix<f64>,
}

/// Weighted Gram–Schmidt over `{Re φ_j, Im φ_j}`.
pub fn build_real_basis(dec: &UnstableDecomposition, model: &OperatorModel) -> Result<RealBasis> {
    let n_modes = dec.n_unstable;
    if n_modes == 0 {
        return Err(Error::NothingToStabilize);
    }
    let a = model
        .real_generator()
        .ok_or_else(|| Error::InvalidModel("real basis requires a real generator".into()))?;
    let w = model.weights();
    let n = model.dim();
    let mut kept: Vec<DVector<f64>> = Vec::new();
    for j in 0..n_modes {
        let phi = dec.right.column(j);
        for cand in [phi.map(|z| z.re), phi.map(|z| z.im)] {
            let orig = linalg::norm(w, &cand);
            if orig <= f64::MIN_POSITIVE {
                continue;
            }
            let mut v = cand;
            // two passes of modified Gram–Schmidt
            for _ in 0..2 {
                for q in &kept {
                    let c = linalg::inner(w, &v, q);
                    v -= q * c;
                }
            }
            let rest = linalg::norm(w, &v);
            if rest > GS_DROP * orig {
                kept.push(v / rest);
            }
        }
    }
    if kept.len() != n_modes {
        return Err(Error::RealBasisSize { expected: n_modes, found: kept.len() });
    }
    let psi = DMatrix::from_columns(&kept);
    // coordinates of ψ_i in the eigenbasis: c_mi = <ψ_i, φ*_m>
    let coords = dec.sensor_rows() * linalg::to_complex(&psi);
    let inv_t = coords
        .transpose()
        .try_inverse()
        .ok_or(Error::RealBasisSize { expected: n_modes, found: 0 })?;
    let duals_c = &dec.left * inv_t.map(|z| z.conj());
    let duals = duals_c.map(|z| z.re);
    let wpsi = DMatrix::from_fn(n, n_modes, |i, j| psi[(i, j)] * w[i]);
    let a_u_re = wpsi.transpose() * a * &psi;
    Ok(RealBasis { psi, duals, a_u_re })
}

#[derive(Debug, Clone)]
pub enum NoiseChoice {
    Sigma(f64),
    Target { rate: f64, tune: TuneParams },
}

fn design_for<T: Scalar>(a_u: &DMatrix<T>, choice: &NoiseChoice) -> Result<NoiseDesign> {
    match choice {
        NoiseChoice::Sigma(s) => {
            let lambdas = linalg::eigen_dense(&a_u.map(|z| z.to_c64()))?.values;
            synthesize_noise_matrices(&lambdas, *s)
        }
        NoiseChoice::Target { rate, tune } => tune_noise_intensity(a_u, *rate, tune),
    }
}

/// Complex controller end to end: actuators, noise design (fixed σ or tuned),
/// feedback law.
pub fn build_complex_controller(
    dec: &UnstableDecomposition,
    model: &OperatorModel,
    choice: &NoiseChoice,
) -> Result<FeedbackLaw> {
    let actuators = build_actuators_for(dec, model)?;
    let noise = design_for(&dec.a_u, choice)?;
    build_feedback(&noise, dec, &actuators, model)
}

/// Real feedback law `R̃_k(X) = Σ_ij C̃^k_ij <X, ψ*_j> φ̃_i` with actuators
/// `φ̃_i = Σ_l α̃_il ψ*_l`, `α̃ = γ̃⁻¹`, `γ̃_lj = <mask ψ*_l, ψ*_j>`.
pub fn build_real_feedback(basis: &RealBasis, model: &OperatorModel, choice: &NoiseChoice) -> Result<FeedbackLaw> {
    let n_modes = basis.psi.ncols();
    if basis.psi.nrows() != model.dim() {
        return Err(Error::DimensionMismatch("real basis and model differ in dimension".into()));
    }
    let actuators = actuator_system(model, &linalg::to_complex(&basis.duals))?;
    let noise = design_for(&basis.a_u_re, choice)?;
    if noise.n_modes != n_modes {
        return Err(Error::DimensionMismatch("noise design size".into()));
    }
    let maps = LawMaps {
        actuators: actuators.masked.map(|z| z.re),
        sensors: linalg::pairing_rows(model.weights(), &basis.duals),
        basis: basis.psi.clone(),
        modal_drift: basis.a_u_re.clone(),
        coefficients: noise.matrices.clone(),
    };
    Ok(FeedbackLaw {
        kind: ControllerKind::Real,
        noise,
        actuators,
        mask: model.mask().clone(),
        maps: RealizedMaps::Real(maps),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{build_advection_diffusion, build_from_real_matrix, subdomain_mask, AdvectionDiffusionSpec};
    use crate::spectral::{eigendecompose, select_unstable_index};

    fn advdiff() -> OperatorModel {
        build_advection_diffusion(&AdvectionDiffusionSpec { n: 200, nu: 0.01, f: 0.0, c: -0.5 }).unwrap()
    }

    fn c(re: f64) -> C64 {
        C64::new(re, 0.0)
    }

    #[test]
    fn two_mode_matrix() {
        let d = synthesize_noise_matrices(&[c(-0.5), c(1.5)], 3.0).unwrap();
        assert_eq!(d.m, 1);
        assert_eq!(d.matrices[0], DMatrix::from_row_slice(2, 2, &[0.0, -3.0, 3.0, 0.0]));
    }

    #[test]
    fn four_mode_matrices_are_skew_with_two_entries() {
        let d = synthesize_noise_matrices(&[c(-1.0), c(0.5), c(1.0), c(2.0)], 1.3).unwrap();
        assert_eq!(d.m, 3);
        for m in &d.matrices {
            assert_eq!(m.transpose(), -m.clone());
            assert_eq!(m.iter().filter(|v| **v != 0.0).count(), 2);
        }
    }

    #[test]
    fn degenerate_mode_counts() {
        assert!(matches!(synthesize_noise_matrices(&[], 1.0), Err(Error::NothingToStabilize)));
        let one = synthesize_noise_matrices(&[c(0.7)], 1.0).unwrap();
        assert_eq!(one.m, 0);
        assert!(!one.noise_can_stabilize);
        assert!(matches!(synthesize_noise_matrices(&[c(-0.7)], 1.0), Err(Error::SingleModeUnstabilizable(_))));
    }

    #[test]
    fn unreachable_target_rejected() {
        let a = DMatrix::from_diagonal(&DVector::from_vec(vec![-0.5, 1.5]));
        match tune_noise_intensity(&a, -10.0, &TuneParams::default()) {
            Err(Error::TargetUnreachable { bound, .. }) => assert!((bound + 0.5).abs() < 1e-12),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn stable_drift_certifies_without_noise() {
        let a = DMatrix::from_diagonal(&DVector::from_vec(vec![1.0, 2.0]));
        let tune = TuneParams {
            estimator: LyapunovParams { paths: 8, t_end: 20.0, dt: 1e-2, ..Default::default() },
            ..Default::default()
        };
        let d = tune_noise_intensity(&a, -0.5, &tune).unwrap();
        assert_eq!(d.sigma, 0.0);
        assert!((d.achieved_rate.unwrap() + 1.0).abs() < 0.05);
    }

    #[test]
    fn full_mask_on_symmetric_model_gives_identity_gram() {
        let m = build_advection_diffusion(&AdvectionDiffusionSpec { n: 40, nu: 0.01, f: 0.0, c: -0.3 }).unwrap();
        let dec = select_unstable_index(&eigendecompose(&m, 1e-8).unwrap()).unwrap();
        let act = build_actuators_for(&dec, &m).unwrap();
        let k = dec.n_unstable;
        assert!(linalg::max_abs(&(&act.gram - DMatrix::<C64>::identity(k, k))) < 1e-10);
        assert!(linalg::max_abs(&(&act.actuators - &dec.left)) < 1e-10);
    }

    #[test]
    fn subdomain_actuators_satisfy_identity() {
        let m = subdomain_mask(&advdiff(), 0.3, 0.5).unwrap();
        let spec = eigendecompose(&m, 1e-8).unwrap();
        let dec = select_unstable_index(&spec).unwrap();
        assert_eq!(dec.n_unstable, 4);
        let act = build_actuators(&spec, 4, &m).unwrap();
        assert!(act.eq18_residual <= 1e-8);
        assert!(linalg::max_abs(&(&act.gram - act.gram.adjoint())) == 0.0);
    }

    #[test]
    fn single_point_mask_is_singular() {
        let base = advdiff();
        let h = 1.0 / 201.0;
        let m = subdomain_mask(&base, 100.0 * h - 0.5 * h, 100.0 * h + 0.5 * h).unwrap();
        assert_eq!(m.mask().iter().filter(|v| **v > 0.0).count(), 1);
        let dec = select_unstable_index(&eigendecompose(&m, 1e-8).unwrap()).unwrap();
        assert!(matches!(build_actuators_for(&dec, &m), Err(Error::SingularGram { .. })));
    }

    #[test]
    fn modal_closure_and_low_rank() {
        let m = subdomain_mask(&advdiff(), 0.3, 0.5).unwrap();
        let dec = select_unstable_index(&eigendecompose(&m, 1e-8).unwrap()).unwrap();
        let law = build_complex_controller(&dec, &m, &NoiseChoice::Sigma(2.5)).unwrap();
        let l = dec.sensor_rows();
        let cs = law.noise.complex_matrices();
        for k in 0..law.channels() {
            let b = law.realized_map(k);
            for mm in 0..4 {
                let phi = dec.right.column(mm).into_owned();
                let coords = &l * (&b * phi);
                let col = cs[k].column(mm).into_owned();
                assert!((coords - col).iter().all(|z| z.norm() < 1e-8));
            }
            let rank = b.clone().svd(false, false).rank(1e-10 * b.norm());
            assert!(rank <= 4);
        }
        // stable-subspace input is annihilated
        let x = DVector::from_fn(m.dim(), |i, _| C64::new((i as f64 * 0.37).sin(), 0.0));
        let (_, xs) = dec.project(&x);
        let out = law.realized_map(0) * xs;
        assert!(out.iter().all(|z| z.norm() < 1e-8));
    }

    #[test]
    fn real_basis_trace_identity() {
        let m = subdomain_mask(&advdiff(), 0.3, 0.5).unwrap();
        let dec = select_unstable_index(&eigendecompose(&m, 1e-8).unwrap()).unwrap();
        let rb = build_real_basis(&dec, &m).unwrap();
        assert!((rb.a_u_re.trace() - dec.sum_re).abs() < 1e-8);
        let gram = rb.psi.transpose() * DMatrix::from_diagonal(m.weights()) * &rb.psi;
        assert!((gram - DMatrix::<f64>::identity(4, 4)).amax() < 1e-10);
        let pair = rb.psi.transpose() * DMatrix::from_diagonal(m.weights()) * &rb.duals;
        assert!((pair - DMatrix::<f64>::identity(4, 4)).amax() < 1e-8);
    }

    #[test]
    fn conjugate_pair_basis_spans_real_and_imaginary_parts() {
        // rotation block with eigenvalues -0.2 ± i; the pair alone has a
        // negative real-part sum, so the mode at 3 joins the unstable block
        let a = DMatrix::from_row_slice(3, 3, &[-0.2, -1.0, 0.0, 1.0, -0.2, 0.0, 0.0, 0.0, 3.0]);
        let m = build_from_real_matrix(a, DVector::from_element(3, 1.0), DVector::from_element(3, 1.0)).unwrap();
        let dec = select_unstable_index(&eigendecompose(&m, 1e-8).unwrap()).unwrap();
        assert_eq!(dec.n_unstable, 3);
        let rb = build_real_basis(&dec, &m).unwrap();
        let phi = dec.right.column(0);
        for part in [phi.map(|z| z.re), phi.map(|z| z.im)] {
            let proj = &rb.psi * (rb.psi.transpose() * &part);
            assert!((proj - &part).amax() < 1e-10);
        }
        assert!((rb.a_u_re.trace() - 2.6).abs() < 1e-10);
    }

    #[test]
    fn real_law_matches_complex_on_symmetric_model() {
        let m = subdomain_mask(&advdiff(), 0.3, 0.5).unwrap();
        let dec = select_unstable_index(&eigendecompose(&m, 1e-8).unwrap()).unwrap();
        let complex = build_complex_controller(&dec, &m, &NoiseChoice::Sigma(3.0)).unwrap();
        let rb = build_real_basis(&dec, &m).unwrap();
        let real = build_real_feedback(&rb, &m, &NoiseChoice::Sigma(3.0)).unwrap();
        for k in 0..3 {
            let diff = complex.realized_map(k) - real.realized_map(k);
            assert!(linalg::max_abs(&diff) < 1e-8);
            assert!(real.realized_map(k).iter().all(|z| z.im == 0.0));
        }
    }
}
