//! Time integration of linear Stratonovich/Ito systems
//! `dX = D X dt + sum_k B_k X ∘ dβ_k`, Lyapunov-exponent estimation and the
//! closed-loop simulations built on them.

pub mod noise;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::linalg::{expm, Scalar, C64};
use crate::model::OperatorModel;
use crate::spectral::UnstableDecomposition;
use crate::synthesis::{FeedbackLaw, LawMaps, RealizedMaps};

pub use noise::BrownianPath;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum Interpretation {
    Stratonovich,
    Ito,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum Scheme {
    /// Stochastic trapezoidal predictor-corrector (Stratonovich).
    Heun,
    /// Euler–Maruyama (Ito).
    EulerMaruyama,
    /// Strang splitting: half drift flow, exact noise flow, half drift flow
    /// (Stratonovich). Both flows are matrix exponentials.
    Splitting,
}

impl Scheme {
    pub fn default_for(interp: Interpretation) -> Scheme {
        match interp {
            Interpretation::Stratonovich => Scheme::Heun,
            Interpretation::Ito => Scheme::EulerMaruyama,
        }
    }

    fn accepts(self, interp: Interpretation) -> bool {
        matches!(
            (self, interp),
            (Scheme::EulerMaruyama, Interpretation::Ito)
                | (Scheme::Heun, Interpretation::Stratonovich)
                | (Scheme::Splitting, Interpretation::Stratonovich)
        )
    }
}

/// Diffusion maps of the form `B_k = U C^k L` with `U` n×r, `L` r×n.
#[derive(Debug, Clone)]
pub struct LowRankDiffusion<T: Scalar> {
    pub actuators: DMatrix<T>,
    pub sensors: DMatrix<T>,
    pub coefficients: Vec<DMatrix<T>>,
}

impl<T: Scalar> LowRankDiffusion<T> {
    pub fn dense(&self, k: usize) -> DMatrix<T> {
        &self.actuators * &self.coefficients[k] * &self.sensors
    }
}

#[derive(Debug, Clone)]
pub enum Diffusion<T: Scalar> {
    Dense(Vec<DMatrix<T>>),
    LowRank(LowRankDiffusion<T>),
}

impl<T: Scalar> Diffusion<T> {
    pub fn channels(&self) -> usize {
        match self {
            Diffusion::Dense(b) => b.len(),
            Diffusion::LowRank(l) => l.coefficients.len(),
        }
    }

    pub fn dense(&self, k: usize) -> DMatrix<T> {
        match self {
            Diffusion::Dense(b) => b[k].clone(),
            Diffusion::LowRank(l) => l.dense(k),
        }
    }

    fn squares_sum(&self, n: usize) -> DMatrix<T> {
        let mut acc = DMatrix::<T>::zeros(n, n);
        match self {
            Diffusion::Dense(b) => {
                for bk in b {
                    acc += bk * bk;
                }
            }
            Diffusion::LowRank(l) => {
                let g = &l.sensors * &l.actuators;
                let mut inner = DMatrix::<T>::zeros(g.nrows(), g.ncols());
                for c in &l.coefficients {
                    inner += c * &g * c;
                }
                acc = &l.actuators * inner * &l.sensors;
            }
        }
        acc
    }
}

#[derive(Debug, Clone)]
pub struct SdeSystem<T: Scalar> {
    pub drift: DMatrix<T>,
    pub diffusion: Diffusion<T>,
    pub interpretation: Interpretation,
}

impl<T: Scalar> SdeSystem<T> {
    pub fn new(drift: DMatrix<T>, diffusion: Diffusion<T>, interpretation: Interpretation) -> Result<Self> {
        let n = drift.nrows();
        if drift.ncols() != n {
            return Err(Error::DimensionMismatch(format!("drift is {}x{}", n, drift.ncols())));
        }
        match &diffusion {
            Diffusion::Dense(b) => {
                if let Some(k) = b.iter().position(|m| m.shape() != (n, n)) {
                    return Err(Error::DimensionMismatch(format!(
                        "diffusion {k} is {:?}, drift is {n}x{n}",
                        b[k].shape()
                    )));
                }
            }
            Diffusion::LowRank(l) => {
                let r = l.actuators.ncols();
                if l.actuators.nrows() != n || l.sensors.shape() != (r, n) {
                    return Err(Error::DimensionMismatch(format!(
                        "low-rank factors {:?} and {:?} for dimension {n}",
                        l.actuators.shape(),
                        l.sensors.shape()
                    )));
                }
                if l.coefficients.iter().any(|c| c.shape() != (r, r)) {
                    return Err(Error::DimensionMismatch(format!("coefficients must be {r}x{r}")));
                }
            }
        }
        Ok(Self { drift, diffusion, interpretation })
    }

    pub fn dim(&self) -> usize {
        self.drift.nrows()
    }

    pub fn channels(&self) -> usize {
        self.diffusion.channels()
    }

    /// Ito form of a Stratonovich system: drift `D + ½ Σ B_k²`.
    pub fn ito_correction(&self) -> Result<Self> {
        if self.interpretation == Interpretation::Ito {
            return Err(Error::AlreadyIto);
        }
        let corr = self.diffusion.squares_sum(self.dim()) * T::from_real(0.5);
        Ok(Self {
            drift: &self.drift + corr,
            diffusion: self.diffusion.clone(),
            interpretation: Interpretation::Ito,
        })
    }

    /// Inverse of [`ito_correction`](Self::ito_correction).
    pub fn stratonovich_form(&self) -> Result<Self> {
        if self.interpretation == Interpretation::Stratonovich {
            return Err(Error::InvalidArgument("system is already Stratonovich".into()));
        }
        let corr = self.diffusion.squares_sum(self.dim()) * T::from_real(0.5);
        Ok(Self {
            drift: &self.drift - corr,
            diffusion: self.diffusion.clone(),
            interpretation: Interpretation::Stratonovich,
        })
    }

    /// Step size: `base` reduced until `‖D‖·dt ≤ 0.1` and `Σ‖B_k‖²·dt ≤ 0.1`.
    /// The splitting scheme takes both flows exactly and keeps `base`.
    pub fn suggest_dt(&self, base: f64, scheme: Scheme) -> f64 {
        let mut dt = base;
        let dnorm = self.drift.norm();
        if scheme != Scheme::Splitting && dnorm * dt > 0.1 {
            dt = 0.1 / dnorm;
        }
        let bsq: f64 = (0..self.channels()).map(|k| self.diffusion.dense(k).norm().powi(2)).sum();
        if scheme != Scheme::Splitting && bsq * dt > 0.1 {
            dt = 0.1 / bsq;
        }
        dt
    }
}

/// Splits the state into unstable and stable parts for norm recording.
#[derive(Debug, Clone)]
pub struct Observer<T: Scalar> {
    pub weights: DVector<f64>,
    /// `(basis, sensors)` with `X_u = basis · (sensors · X)`.
    pub split: Option<(DMatrix<T>, DMatrix<T>)>,
}

impl<T: Scalar> Observer<T> {
    pub fn euclidean(n: usize) -> Self {
        Self { weights: DVector::from_element(n, 1.0), split: None }
    }

    fn norms(&self, x: &DVector<T>) -> (f64, Option<(f64, f64)>) {
        let nx = crate::linalg::norm(&self.weights, x);
        let parts = self.split.as_ref().map(|(basis, sensors)| {
            let xu = basis * (sensors * x);
            let xs = x - &xu;
            (crate::linalg::norm(&self.weights, &xu), crate::linalg::norm(&self.weights, &xs))
        });
        (nx, parts)
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct Trajectory {
    pub times: Vec<f64>,
    #[serde(skip)]
    pub states: Vec<DVector<C64>>,
    pub norm_x: Vec<f64>,
    /// Empty when the run had no unstable/stable split.
    pub norm_xu: Vec<f64>,
    pub norm_xs: Vec<f64>,
    /// Modal coordinates read off the full state (closed-loop runs only).
    #[serde(skip)]
    pub modal: Vec<DVector<C64>>,
    /// Modal coordinates of the directly integrated reduced system.
    #[serde(skip)]
    pub modal_reduced: Vec<DVector<C64>>,
    pub seed: u64,
    pub path: u64,
    pub dt: f64,
}

impl Trajectory {
    fn empty(seed: u64, path: u64, dt: f64) -> Self {
        Self {
            times: Vec::new(),
            states: Vec::new(),
            norm_x: Vec::new(),
            norm_xu: Vec::new(),
            norm_xs: Vec::new(),
            modal: Vec::new(),
            modal_reduced: Vec::new(),
            seed,
            path,
            dt,
        }
    }

    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    pub fn final_state(&self) -> Option<&DVector<C64>> {
        self.states.last()
    }
}

#[derive(Debug, Clone)]
pub struct IntegrateParams {
    pub dt: f64,
    pub t_end: f64,
    pub seed: u64,
    pub path: u64,
    /// `None` picks the scheme matching the system's interpretation.
    pub scheme: Option<Scheme>,
    /// Fine Brownian increments summed into each step.
    pub substeps: usize,
    pub record_every: usize,
    pub store_states: bool,
}

impl IntegrateParams {
    pub fn new(dt: f64, t_end: f64, seed: u64) -> Self {
        Self { dt, t_end, seed, path: 0, scheme: None, substeps: 1, record_every: 1, store_states: true }
    }
}

pub fn step_count(dt: f64, t_end: f64) -> Result<usize> {
    if !(dt > 0.0) || !dt.is_finite() {
        return Err(Error::InvalidArgument(format!("dt must be positive, got {dt}")));
    }
    if !(t_end >= dt) {
        return Err(Error::InvalidArgument(format!("horizon {t_end} shorter than dt {dt}")));
    }
    Ok(((t_end / dt) - 1e-9).ceil() as usize)
}

struct Stepper<'a, T: Scalar> {
    sys: &'a SdeSystem<T>,
    scheme: Scheme,
    dt: f64,
    half: Option<DMatrix<T>>,
    full: Option<DMatrix<T>>,
    gram: Option<DMatrix<T>>,
}

impl<'a, T: Scalar> Stepper<'a, T> {
    fn new(sys: &'a SdeSystem<T>, scheme: Scheme, dt: f64) -> Result<Self> {
        if !scheme.accepts(sys.interpretation) {
            return Err(Error::InvalidArgument(format!(
                "scheme {scheme:?} does not integrate {:?} systems",
                sys.interpretation
            )));
        }
        let (half, full) = if scheme == Scheme::Splitting {
            let h = expm(&(&sys.drift * T::from_real(0.5 * dt)));
            let f = &h * &h;
            (Some(h), Some(f))
        } else {
            (None, None)
        };
        let gram = match &sys.diffusion {
            Diffusion::LowRank(l) => Some(&l.sensors * &l.actuators),
            Diffusion::Dense(_) => None,
        };
        Ok(Self { sys, scheme, dt, half, full, gram })
    }

    fn combined(coeffs: &[DMatrix<T>], dw: &[f64]) -> DMatrix<T> {
        let mut s = DMatrix::<T>::zeros(coeffs[0].nrows(), coeffs[0].ncols());
        for (c, &w) in coeffs.iter().zip(dw) {
            s += c * T::from_real(w);
        }
        s
    }

    /// `Σ_k B_k x ΔW_k`
    fn noise_apply(&self, dw: &[f64], x: &DVector<T>) -> DVector<T> {
        match &self.sys.diffusion {
            Diffusion::Dense(b) => {
                let mut acc = DVector::<T>::zeros(x.len());
                for (bk, &w) in b.iter().zip(dw) {
                    acc += bk * x * T::from_real(w);
                }
                acc
            }
            Diffusion::LowRank(l) => {
                if l.coefficients.is_empty() {
                    return DVector::zeros(x.len());
                }
                let s = Self::combined(&l.coefficients, dw);
                &l.actuators * (s * (&l.sensors * x))
            }
        }
    }

    /// `exp(Σ_k B_k ΔW_k) x`
    fn noise_flow(&self, dw: &[f64], x: &DVector<T>) -> DVector<T> {
        match &self.sys.diffusion {
            Diffusion::Dense(b) => {
                if b.is_empty() {
                    return x.clone();
                }
                let s = Self::combined(b, dw);
                expm(&s) * x
            }
            Diffusion::LowRank(l) => {
                if l.coefficients.is_empty() {
                    return x.clone();
                }
                // exp(U S L) = I + U φ₁(S G) S L with G = L U, φ₁(z) = (e^z − 1)/z
                let s = Self::combined(&l.coefficients, dw);
                let g = self.gram.as_ref().expect("low-rank gram");
                let r = s.nrows();
                let z = &s * g;
                let mut aug = DMatrix::<T>::zeros(2 * r, 2 * r);
                aug.view_mut((0, 0), (r, r)).copy_from(&z);
                aug.view_mut((0, r), (r, r)).fill_with_identity();
                let e = expm(&aug);
                let phi1 = e.view((0, r), (r, r)).into_owned();
                x + &l.actuators * (phi1 * (s * (&l.sensors * x)))
            }
        }
    }

    fn increment(&self, dw: &[f64], x: &DVector<T>) -> DVector<T> {
        &self.sys.drift * x * T::from_real(self.dt) + self.noise_apply(dw, x)
    }

    fn explicit_step(&self, dw: &[f64], x: &DVector<T>) -> DVector<T> {
        let f0 = self.increment(dw, x);
        match self.scheme {
            Scheme::EulerMaruyama => x + f0,
            Scheme::Heun => {
                let pred = x + &f0;
                let f1 = self.increment(dw, &pred);
                x + (f0 + f1) * T::from_real(0.5)
            }
            Scheme::Splitting => unreachable!(),
        }
    }

    /// Runs all steps of `path`. `visit(s, x)` is called at step 0, after
    /// every `sync_every` steps and after the last step; it may rescale `x`.
    fn run<F>(&self, x0: &DVector<T>, path: &BrownianPath, sync_every: usize, mut visit: F) -> Result<DVector<T>>
    where
        F: FnMut(usize, &mut DVector<T>) -> Result<()>,
    {
        let sync_every = sync_every.max(1);
        let steps = path.steps;
        let mut x = x0.clone();
        visit(0, &mut x)?;
        let finite = |v: &DVector<T>| v.iter().all(|z| z.modulus().is_finite());
        match self.scheme {
            Scheme::Heun | Scheme::EulerMaruyama => {
                for s in 0..steps {
                    x = self.explicit_step(path.step(s), &x);
                    if !finite(&x) {
                        return Err(Error::BlowUp { step: s + 1 });
                    }
                    if (s + 1) % sync_every == 0 || s + 1 == steps {
                        visit(s + 1, &mut x)?;
                    }
                }
                Ok(x)
            }
            Scheme::Splitting => {
                let half = self.half.as_ref().unwrap();
                let full = self.full.as_ref().unwrap();
                // z lags the state by half a drift step between sync points
                let mut z = half * &x;
                for s in 0..steps {
                    z = self.noise_flow(path.step(s), &z);
                    let sync = (s + 1) % sync_every == 0 || s + 1 == steps;
                    if sync {
                        x = half * &z;
                        if !finite(&x) {
                            return Err(Error::BlowUp { step: s + 1 });
                        }
                        visit(s + 1, &mut x)?;
                        if s + 1 < steps {
                            z = half * &x;
                        }
                    } else {
                        z = full * &z;
                        if !finite(&z) {
                            return Err(Error::BlowUp { step: s + 1 });
                        }
                    }
                }
                Ok(x)
            }
        }
    }
}

fn record<T: Scalar>(
    traj: &mut Trajectory,
    t: f64,
    x: &DVector<T>,
    observer: &Observer<T>,
    store: bool,
) {
    let (nx, parts) = observer.norms(x);
    traj.times.push(t);
    traj.norm_x.push(nx);
    if let Some((nu, ns)) = parts {
        traj.norm_xu.push(nu);
        traj.norm_xs.push(ns);
    }
    if store {
        traj.states.push(x.map(|z| z.to_c64()));
    }
}

/// Integrates on a uniform grid with default scheme for the interpretation
/// (Heun for Stratonovich, Euler–Maruyama for Ito), path 0.
pub fn integrate<T: Scalar>(
    system: &SdeSystem<T>,
    x0: &DVector<T>,
    dt: f64,
    t_end: f64,
    seed: u64,
) -> Result<Trajectory> {
    integrate_with(system, x0, &IntegrateParams::new(dt, t_end, seed), None)
}

pub fn integrate_with<T: Scalar>(
    system: &SdeSystem<T>,
    x0: &DVector<T>,
    params: &IntegrateParams,
    observer: Option<&Observer<T>>,
) -> Result<Trajectory> {
    let steps = step_count(params.dt, params.t_end)?;
    let path = BrownianPath::generate(params.seed, params.path, system.channels(), steps, params.dt, params.substeps);
    let scheme = params.scheme.unwrap_or(Scheme::default_for(system.interpretation));
    let mut traj = integrate_on_path(system, x0, &path, scheme, params.record_every, observer, params.store_states)?;
    traj.seed = params.seed;
    traj.path = params.path;
    Ok(traj)
}

/// Integrates along a given set of Brownian increments.
pub fn integrate_on_path<T: Scalar>(
    system: &SdeSystem<T>,
    x0: &DVector<T>,
    path: &BrownianPath,
    scheme: Scheme,
    record_every: usize,
    observer: Option<&Observer<T>>,
    store_states: bool,
) -> Result<Trajectory> {
    if x0.len() != system.dim() {
        return Err(Error::DimensionMismatch(format!(
            "initial state has length {}, system dimension {}",
            x0.len(),
            system.dim()
        )));
    }
    if path.channels != system.channels() {
        return Err(Error::DimensionMismatch(format!(
            "{} noise channels supplied for {} diffusion maps",
            path.channels,
            system.channels()
        )));
    }
    let default_obs;
    let observer = match observer {
        Some(o) => o,
        None => {
            default_obs = Observer::euclidean(system.dim());
            &default_obs
        }
    };
    let stepper = Stepper::new(system, scheme, path.dt)?;
    let mut traj = Trajectory::empty(0, 0, path.dt);
    stepper.run(x0, path, record_every, |s, x| {
        record(&mut traj, s as f64 * path.dt, x, observer, store_states);
        Ok(())
    })?;
    Ok(traj)
}

#[derive(Debug, Clone, Serialize)]
pub struct LyapunovParams {
    pub paths: usize,
    pub t_end: f64,
    pub dt: f64,
    pub renorm_every: usize,
    pub seed: u64,
    /// Defaults to [`Scheme::Splitting`] for Stratonovich systems.
    pub scheme: Option<Scheme>,
    /// Leading fraction of the horizon excluded from the average, so the
    /// alignment transient of the initial condition does not bias the rate.
    pub burn_in: f64,
}

impl Default for LyapunovParams {
    fn default() -> Self {
        Self { paths: 64, t_end: 50.0, dt: 1e-3, renorm_every: 100, seed: 0, scheme: None, burn_in: 0.1 }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct LyapunovEstimate {
    pub value: f64,
    pub stderr: f64,
    pub paths: usize,
    pub horizon: f64,
    pub renorm_interval: usize,
    pub per_path: Vec<f64>,
}

const INIT_STREAM_SALT: u64 = 0x5eed_1a9c_0ffe_e000;

/// Random unit initial condition for path `path`, independent of the noise.
fn random_unit<T: Scalar>(n: usize, seed: u64, path: u64) -> DVector<T> {
    let mut s = noise::NormalStream::new(seed ^ INIT_STREAM_SALT, path);
    let v = DVector::<T>::from_fn(n, |_, _| T::from_c64(C64::new(s.next_normal(), s.next_normal())));
    let nv = v.norm();
    v / T::from_real(nv)
}

/// Top Lyapunov exponent by per-path renormalized integration.
pub fn estimate_lyapunov<T: Scalar>(system: &SdeSystem<T>, params: &LyapunovParams) -> Result<LyapunovEstimate> {
    if params.paths < 8 {
        return Err(Error::InvalidArgument(format!("need at least 8 paths, got {}", params.paths)));
    }
    if !(0.0..1.0).contains(&params.burn_in) {
        return Err(Error::InvalidArgument(format!("burn-in fraction {} outside [0, 1)", params.burn_in)));
    }
    let steps = step_count(params.dt, params.t_end)?;
    let horizon = steps as f64 * params.dt;
    let renorm = params.renorm_every.max(1);
    // first sync point at or after the burn-in time
    let burn_steps = ((params.burn_in * steps as f64) / renorm as f64).ceil() as usize * renorm;
    let burn_steps = burn_steps.min(steps.saturating_sub(1) / renorm * renorm);
    let span = (steps - burn_steps) as f64 * params.dt;
    let scheme = params.scheme.unwrap_or(match system.interpretation {
        Interpretation::Stratonovich => Scheme::Splitting,
        Interpretation::Ito => Scheme::EulerMaruyama,
    });
    let stepper = Stepper::new(system, scheme, params.dt)?;
    let per_path: Vec<f64> = (0..params.paths as u64)
        .into_par_iter()
        .map(|p| -> Result<f64> {
            let x0 = random_unit::<T>(system.dim(), params.seed, p);
            let path = BrownianPath::generate(params.seed, p, system.channels(), steps, params.dt, 1);
            let mut log_sum = 0.0;
            stepper.run(&x0, &path, renorm, |s, x| {
                if s == 0 {
                    return Ok(());
                }
                let r = x.norm();
                if !(r > 0.0) || !r.is_finite() {
                    return Err(Error::BlowUp { step: s });
                }
                if s > burn_steps {
                    log_sum += r.ln();
                }
                *x /= T::from_real(r);
                Ok(())
            })?;
            Ok(log_sum / span)
        })
        .collect::<Result<_>>()?;
    let k = per_path.len() as f64;
    let value = per_path.iter().sum::<f64>() / k;
    let var = per_path.iter().map(|v| (v - value).powi(2)).sum::<f64>() / (k - 1.0);
    Ok(LyapunovEstimate {
        value,
        stderr: (var / k).sqrt(),
        paths: params.paths,
        horizon,
        renorm_interval: renorm,
        per_path,
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct ClosedLoopParams {
    pub dt: f64,
    pub t_end: f64,
    pub seed: u64,
    pub path: u64,
    /// Scheme for the full state.
    pub scheme: Scheme,
    /// Scheme for the reduced modal system.
    pub modal_scheme: Scheme,
    pub record_every: usize,
    pub store_states: bool,
}

impl ClosedLoopParams {
    pub fn new(dt: f64, t_end: f64, seed: u64) -> Self {
        Self {
            dt,
            t_end,
            seed,
            path: 0,
            scheme: Scheme::Splitting,
            modal_scheme: Scheme::Splitting,
            record_every: 1,
            store_states: false,
        }
    }
}

fn closed_loop_systems<T: Scalar>(
    generator: DMatrix<T>,
    maps: &LawMaps<T>,
) -> Result<(SdeSystem<T>, SdeSystem<T>)> {
    let full = SdeSystem::new(
        -generator,
        Diffusion::LowRank(LowRankDiffusion {
            actuators: maps.actuators.clone(),
            sensors: maps.sensors.clone(),
            coefficients: maps.coefficients.clone(),
        }),
        Interpretation::Stratonovich,
    )?;
    let reduced = SdeSystem::new(
        -maps.modal_drift.clone(),
        Diffusion::Dense(maps.coefficients.clone()),
        Interpretation::Stratonovich,
    )?;
    Ok((full, reduced))
}

fn run_closed_loop<T: Scalar>(
    generator: DMatrix<T>,
    model: &OperatorModel,
    maps: &LawMaps<T>,
    x0: &DVector<T>,
    params: &ClosedLoopParams,
    smoothing: Option<usize>,
) -> Result<Trajectory> {
    let (full, reduced) = closed_loop_systems(generator, maps)?;
    let steps = step_count(params.dt, params.t_end)?;
    let mut path = BrownianPath::generate(params.seed, params.path, full.channels(), steps, params.dt, 1);
    if let Some(k) = smoothing {
        path = path.smoothed(k);
    }
    let observer = Observer {
        weights: model.weights().clone(),
        split: Some((maps.basis.clone(), maps.sensors.clone())),
    };
    let (scheme, modal_scheme) = match smoothing {
        // the smoothed equation is a random ODE, integrated by deterministic Heun
        Some(_) => (Scheme::Heun, Scheme::Heun),
        None => (params.scheme, params.modal_scheme),
    };
    let stepper = Stepper::new(&full, scheme, params.dt)?;
    let mut traj = Trajectory::empty(params.seed, params.path, params.dt);
    stepper.run(x0, &path, params.record_every, |s, x| {
        record(&mut traj, s as f64 * params.dt, x, &observer, params.store_states);
        traj.modal.push((&maps.sensors * &*x).map(|z| z.to_c64()));
        Ok(())
    })?;
    let y0 = &maps.sensors * x0;
    let red = integrate_on_path(&reduced, &y0, &path, modal_scheme, params.record_every, None, true)?;
    traj.modal_reduced = red.states;
    Ok(traj)
}

fn real_generator(model: &OperatorModel) -> Result<DMatrix<f64>> {
    model
        .real_generator()
        .ok_or_else(|| Error::InvalidModel("real controller requires a real generator".into()))
}

/// Closed-loop Stratonovich simulation of `dX = −A X dt + Σ_k B_k X ∘ dβ_k`
/// with the realized feedback maps, plus the reduced modal system driven by
/// the same increments.
pub fn simulate_closed_loop(
    model: &OperatorModel,
    dec: &UnstableDecomposition,
    law: &FeedbackLaw,
    x0: &DVector<C64>,
    params: &ClosedLoopParams,
) -> Result<Trajectory> {
    simulate_inner(model, dec, law, x0, params, None)
}

/// Smooth-noise counterpart: each β_k is replaced by its piecewise-linear
/// interpolation on a grid of spacing `smoothing_dt` (a multiple of `dt`).
pub fn simulate_wong_zakai(
    model: &OperatorModel,
    dec: &UnstableDecomposition,
    law: &FeedbackLaw,
    x0: &DVector<C64>,
    params: &ClosedLoopParams,
    smoothing_dt: f64,
) -> Result<Trajectory> {
    if smoothing_dt < params.dt * (1.0 - 1e-9) {
        return Err(Error::InvalidArgument(format!(
            "smoothing_dt {smoothing_dt} below dt {}",
            params.dt
        )));
    }
    let factor = (smoothing_dt / params.dt).round() as usize;
    if ((factor as f64) * params.dt - smoothing_dt).abs() > 1e-9 * smoothing_dt {
        return Err(Error::InvalidArgument("smoothing_dt must be an integer multiple of dt".into()));
    }
    simulate_inner(model, dec, law, x0, params, Some(factor))
}

fn simulate_inner(
    model: &OperatorModel,
    dec: &UnstableDecomposition,
    law: &FeedbackLaw,
    x0: &DVector<C64>,
    params: &ClosedLoopParams,
    smoothing: Option<usize>,
) -> Result<Trajectory> {
    if dec.dim() != model.dim() || x0.len() != model.dim() {
        return Err(Error::DimensionMismatch(format!(
            "model {}, decomposition {}, initial state {}",
            model.dim(),
            dec.dim(),
            x0.len()
        )));
    }
    if law.n_modes() != dec.n_unstable {
        return Err(Error::DimensionMismatch(format!(
            "law built for {} modes, decomposition has {}",
            law.n_modes(),
            dec.n_unstable
        )));
    }
    match &law.maps {
        RealizedMaps::Complex(maps) => {
            run_closed_loop(model.generator().clone(), model, maps, x0, params, smoothing)
        }
        RealizedMaps::Real(maps) => {
            let x0r = x0.map(|z| z.re);
            run_closed_loop(real_generator(model)?, model, maps, &x0r, params, smoothing)
        }
    }
}

/// Runs `paths` independent closed-loop paths (path indices `first..first+paths`).
pub fn simulate_ensemble(
    model: &OperatorModel,
    dec: &UnstableDecomposition,
    law: &FeedbackLaw,
    x0: &DVector<C64>,
    params: &ClosedLoopParams,
    first: u64,
    paths: usize,
) -> Result<Vec<Trajectory>> {
    (first..first + paths as u64)
        .into_par_iter()
        .map(|p| {
            let mut pp = params.clone();
            pp.path = p;
            simulate_closed_loop(model, dec, law, x0, &pp)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar(v: f64) -> DMatrix<f64> {
        DMatrix::from_element(1, 1, v)
    }

    fn rot(s: f64) -> DMatrix<f64> {
        DMatrix::from_row_slice(2, 2, &[0.0, -s, s, 0.0])
    }

    #[test]
    fn ito_correction_of_rotation() {
        let s = 1.7;
        let sys = SdeSystem::new(
            DMatrix::from_row_slice(2, 2, &[0.3, 1.0, -2.0, 0.1]),
            Diffusion::Dense(vec![rot(s)]),
            Interpretation::Stratonovich,
        )
        .unwrap();
        let ito = sys.ito_correction().unwrap();
        let expect = &sys.drift - DMatrix::identity(2, 2) * (s * s / 2.0);
        assert!((ito.drift - expect).norm() < 1e-14);
        assert!(matches!(sys.ito_correction().unwrap().ito_correction(), Err(Error::AlreadyIto)));
    }

    #[test]
    fn ito_correction_without_noise_is_identity() {
        let sys = SdeSystem::new(scalar(-2.0), Diffusion::Dense(vec![]), Interpretation::Stratonovich).unwrap();
        assert_eq!(sys.ito_correction().unwrap().drift, sys.drift);
    }

    #[test]
    fn low_rank_correction_matches_dense() {
        let u = DMatrix::from_fn(5, 2, |i, j| (i as f64 + 1.0) * 0.3 - j as f64 * 0.7);
        let l = DMatrix::from_fn(2, 5, |i, j| ((i * 5 + j) as f64).sin());
        let c = rot(0.9);
        let lr = LowRankDiffusion { actuators: u, sensors: l, coefficients: vec![c] };
        let dense = Diffusion::Dense(vec![lr.dense(0)]);
        let d = DMatrix::from_fn(5, 5, |i, j| ((i + 2 * j) as f64).cos());
        let a = SdeSystem::new(d.clone(), Diffusion::LowRank(lr), Interpretation::Stratonovich).unwrap();
        let b = SdeSystem::new(d, dense, Interpretation::Stratonovich).unwrap();
        let diff = a.ito_correction().unwrap().drift - b.ito_correction().unwrap().drift;
        assert!(diff.norm() < 1e-12);
    }

    #[test]
    fn low_rank_noise_flow_is_exact_exponential() {
        let u = DMatrix::from_fn(4, 2, |i, j| 0.2 * (i as f64) + 0.5 * j as f64 + 0.1);
        let l = DMatrix::from_fn(2, 4, |i, j| ((2 * i + j) as f64).cos());
        let lr = LowRankDiffusion { actuators: u, sensors: l, coefficients: vec![rot(1.0), DMatrix::identity(2, 2) * 0.3] };
        let dense = lr.dense(0) * 0.4 + lr.dense(1) * -0.25;
        let sys = SdeSystem::new(DMatrix::zeros(4, 4), Diffusion::LowRank(lr), Interpretation::Stratonovich).unwrap();
        let st = Stepper::new(&sys, Scheme::Splitting, 0.1).unwrap();
        let x = DVector::from_vec(vec![1.0, -0.5, 0.25, 2.0]);
        let got = st.noise_flow(&[0.4, -0.25], &x);
        let want = expm(&dense) * &x;
        assert!((got - want).norm() < 1e-12);
    }

    #[test]
    fn deterministic_limit() {
        let sys = SdeSystem::new(scalar(-1.0), Diffusion::Dense(vec![]), Interpretation::Stratonovich).unwrap();
        let tr = integrate(&sys, &DVector::from_element(1, 1.0), 1e-3, 1.0, 0).unwrap();
        let x1 = tr.final_state().unwrap()[0].re;
        assert!((x1 - (-1.0f64).exp()).abs() < 1e-6);
        assert!((tr.times.last().unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn geometric_noise_follows_chain_rule() {
        let sys = SdeSystem::new(scalar(0.0), Diffusion::Dense(vec![scalar(1.0)]), Interpretation::Stratonovich).unwrap();
        let mut gaps = Vec::new();
        for dt in [1e-2, 1e-3] {
            let steps = step_count(dt, 1.0).unwrap();
            let path = BrownianPath::generate(3, 0, 1, steps, dt, 1);
            let tr = integrate_on_path(&sys, &DVector::from_element(1, 1.0), &path, Scheme::Heun, steps, None, true).unwrap();
            let beta = *path.cumulative(0).last().unwrap();
            gaps.push((tr.final_state().unwrap()[0].re.ln() - beta).abs());
        }
        assert!(gaps[1] < gaps[0]);
        assert!(gaps[1] < 1e-3);
    }

    #[test]
    fn splitting_is_exact_for_geometric_noise() {
        let sys = SdeSystem::new(scalar(-0.3), Diffusion::Dense(vec![scalar(0.8)]), Interpretation::Stratonovich).unwrap();
        let path = BrownianPath::generate(9, 0, 1, 500, 2e-3, 1);
        let tr = integrate_on_path(&sys, &DVector::from_element(1, 1.0), &path, Scheme::Splitting, 7, None, true).unwrap();
        let beta = path.cumulative(0);
        for (i, t) in tr.times.iter().enumerate() {
            let s = (t / 2e-3).round() as usize;
            let exact = (-0.3 * t + 0.8 * beta[s]).exp();
            assert!((tr.states[i][0].re - exact).abs() < 1e-12 * exact.max(1.0));
        }
    }

    #[test]
    fn skew_noise_conserves_norm() {
        let x0 = DVector::from_vec(vec![1.0, 0.0]);
        let heun = SdeSystem::new(DMatrix::zeros(2, 2), Diffusion::Dense(vec![rot(0.5)]), Interpretation::Stratonovich).unwrap();
        let tr = integrate(&heun, &x0, 1e-3, 10.0, 1).unwrap();
        let drift = tr.norm_x.iter().map(|n| (n - 1.0).abs()).fold(0.0, f64::max);
        assert!(drift <= 1e-3, "norm drift {drift}");

        let strong = SdeSystem::new(DMatrix::zeros(2, 2), Diffusion::Dense(vec![rot(20.0)]), Interpretation::Stratonovich).unwrap();
        let mut p = IntegrateParams::new(1e-3, 10.0, 1);
        p.scheme = Some(Scheme::Splitting);
        let tr = integrate_with(&strong, &x0, &p, None).unwrap();
        let drift = tr.norm_x.iter().map(|n| (n - 1.0).abs()).fold(0.0, f64::max);
        assert!(drift <= 1e-10, "norm drift {drift}");
    }

    #[test]
    fn scheme_interpretation_mismatch_rejected() {
        let sys = SdeSystem::new(scalar(-1.0), Diffusion::Dense(vec![]), Interpretation::Ito).unwrap();
        let mut p = IntegrateParams::new(1e-2, 1.0, 0);
        p.scheme = Some(Scheme::Heun);
        assert!(integrate_with(&sys, &DVector::from_element(1, 1.0), &p, None).is_err());
    }

    #[test]
    fn blow_up_reports_step() {
        let sys = SdeSystem::new(scalar(2000.0), Diffusion::Dense(vec![]), Interpretation::Ito).unwrap();
        match integrate(&sys, &DVector::from_element(1, 1.0), 1.0, 200.0, 0) {
            Err(Error::BlowUp { step }) => assert!(step > 1 && step < 200),
            other => panic!("expected blow-up, got {other:?}"),
        }
    }

    #[test]
    fn reproducible_bitwise() {
        let sys = SdeSystem::new(
            DMatrix::from_row_slice(2, 2, &[0.5, 0.0, 0.0, -1.5]),
            Diffusion::Dense(vec![rot(3.0)]),
            Interpretation::Stratonovich,
        )
        .unwrap();
        let x0 = DVector::from_vec(vec![0.3, 0.7]);
        let a = integrate(&sys, &x0, 1e-3, 2.0, 42).unwrap();
        let b = integrate(&sys, &x0, 1e-3, 2.0, 42).unwrap();
        assert_eq!(a.norm_x, b.norm_x);
        let c = integrate(&sys, &x0, 1e-3, 2.0, 43).unwrap();
        assert_ne!(a.norm_x, c.norm_x);
    }

    #[test]
    fn lyapunov_deterministic_top_eigenvalue() {
        let sys = SdeSystem::new(
            DMatrix::from_row_slice(2, 2, &[0.5, 0.0, 0.0, -1.5]),
            Diffusion::Dense(vec![]),
            Interpretation::Stratonovich,
        )
        .unwrap();
        let p = LyapunovParams { paths: 8, t_end: 50.0, dt: 1e-2, ..Default::default() };
        let est = estimate_lyapunov(&sys, &p).unwrap();
        assert!((est.value - 0.5).abs() < 0.02, "{}", est.value);
    }

    #[test]
    fn lyapunov_skew_noise_keeps_drift_rate() {
        let sys = SdeSystem::new(
            -DMatrix::<f64>::identity(2, 2),
            Diffusion::Dense(vec![rot(5.0)]),
            Interpretation::Stratonovich,
        )
        .unwrap();
        let p = LyapunovParams { paths: 8, t_end: 10.0, dt: 1e-3, ..Default::default() };
        let est = estimate_lyapunov(&sys, &p).unwrap();
        assert!((est.value + 1.0).abs() < 1e-6, "{}", est.value);
    }

    #[test]
    fn lyapunov_needs_paths() {
        let sys = SdeSystem::new(scalar(-1.0), Diffusion::Dense(vec![]), Interpretation::Stratonovich).unwrap();
        let p = LyapunovParams { paths: 4, ..Default::default() };
        assert!(estimate_lyapunov(&sys, &p).is_err());
    }
}
