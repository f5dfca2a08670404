//! Decay-rate fitting and envelope certificates over trajectory ensembles.

use nalgebra::DVector;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::linalg::{expm, C64};
use crate::model::OperatorModel;
use crate::sde::Trajectory;

pub const DEFAULT_WINDOW: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum Verdict {
    Pass,
    Fail,
}

#[derive(Debug, Clone, Serialize)]
pub struct DecayCertificate {
    pub gamma: f64,
    /// Minimum over paths of the fitted tail rate.
    pub gamma_hat: f64,
    /// Maximum over paths of `sup_t |X(t)| e^{γt} / |X(0)|`.
    pub c_hat: f64,
    pub paths: usize,
    pub fraction_satisfying: f64,
    pub window: f64,
    pub verdict: Verdict,
    pub per_path_rates: Vec<f64>,
    pub per_path_constants: Vec<f64>,
}

/// Least-squares slope of `ys` against `xs`.
fn slope(xs: &[f64], ys: &[f64]) -> f64 {
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let sxy: f64 = xs.iter().zip(ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
    sxy / sxx
}

fn tail_start(times: &[f64], window: f64) -> Result<usize> {
    if !(window > 0.0 && window <= 1.0) {
        return Err(Error::InvalidArgument(format!("window {window} outside (0, 1]")));
    }
    let (t0, t1) = match (times.first(), times.last()) {
        (Some(a), Some(b)) => (*a, *b),
        _ => return Err(Error::InsufficientData("empty trajectory".into())),
    };
    let cut = t1 - window * (t1 - t0);
    let start = times.iter().position(|&t| t >= cut - 1e-12).unwrap_or(times.len());
    let count = times.len() - start;
    if count < 10 {
        return Err(Error::InsufficientData(format!("{count} samples in the fitting window, need 10")));
    }
    Ok(start)
}

/// Exponential rate fitted to `norms` over the trailing `window` fraction of
/// `times`; positive means decay.
pub fn fit_rate(times: &[f64], norms: &[f64], window: f64) -> Result<f64> {
    let start = tail_start(times, window)?;
    let tail = &norms[start..];
    if tail.iter().any(|&v| v == 0.0) {
        return Ok(f64::INFINITY);
    }
    if tail.iter().any(|v| !(v.is_finite() && *v > 0.0)) {
        return Err(Error::InvalidArgument("norms must be positive and finite".into()));
    }
    let logs: Vec<f64> = tail.iter().map(|v| v.ln()).collect();
    Ok(-slope(&times[start..], &logs))
}

pub fn fit_decay_rate(traj: &Trajectory, window: f64) -> Result<f64> {
    fit_rate(&traj.times, &traj.norm_x, window)
}

/// `sup_t |X(t)| e^{γ t} / |X(0)|`.
pub fn envelope_constant(traj: &Trajectory, gamma: f64) -> f64 {
    let x0 = traj.norm_x.first().copied().unwrap_or(f64::NAN);
    traj.times
        .iter()
        .zip(&traj.norm_x)
        .map(|(t, v)| v * (gamma * t).exp() / x0)
        .fold(0.0, |acc: f64, v| if v.is_nan() { f64::INFINITY } else { acc.max(v) })
}

/// Envelope certificate at rate `gamma`.
///
/// A path satisfies the envelope when its constant is finite and its fitted
/// tail rate is at least `gamma`, i.e. `|X(t)| e^{γt}` is not growing at the
/// end of the horizon. PASS needs every path to satisfy it and `gamma > 0`.
pub fn certify_decay(ensemble: &[Trajectory], gamma: f64, window: f64) -> Result<DecayCertificate> {
    if ensemble.is_empty() {
        return Err(Error::InsufficientData("empty ensemble".into()));
    }
    let per_path_rates = ensemble.iter().map(|t| fit_decay_rate(t, window)).collect::<Result<Vec<_>>>()?;
    let per_path_constants: Vec<f64> = ensemble.iter().map(|t| envelope_constant(t, gamma)).collect();
    let ok = per_path_rates
        .iter()
        .zip(&per_path_constants)
        .filter(|(r, c)| c.is_finite() && **r >= gamma)
        .count();
    let fraction_satisfying = ok as f64 / ensemble.len() as f64;
    let gamma_hat = per_path_rates.iter().copied().fold(f64::INFINITY, f64::min);
    let c_hat = per_path_constants.iter().copied().fold(0.0, f64::max);
    let verdict = if gamma > 0.0 && ok == ensemble.len() { Verdict::Pass } else { Verdict::Fail };
    Ok(DecayCertificate {
        gamma,
        gamma_hat,
        c_hat,
        paths: ensemble.len(),
        fraction_satisfying,
        window,
        verdict,
        per_path_rates,
        per_path_constants,
    })
}

/// Half of the ensemble-minimum fitted rate.
pub fn default_gamma(ensemble: &[Trajectory], window: f64) -> Result<f64> {
    let mut min = f64::INFINITY;
    for t in ensemble {
        min = min.min(fit_decay_rate(t, window)?);
    }
    Ok(0.5 * min)
}

#[derive(Debug, Clone, Serialize)]
pub struct MeanSquareDecay {
    pub rate: f64,
    pub times: Vec<f64>,
    pub mean_square: Vec<f64>,
}

/// Rate fitted to the ensemble mean of `|X_s(t)|²`.
pub fn mean_square_decay(ensemble: &[Trajectory], window: f64) -> Result<MeanSquareDecay> {
    if ensemble.len() < 8 {
        return Err(Error::InsufficientData(format!("{} paths, need at least 8", ensemble.len())));
    }
    let times = ensemble[0].times.clone();
    if ensemble.iter().any(|t| t.norm_xs.len() != times.len() || t.times != times) {
        return Err(Error::InsufficientData("paths lack a common grid with stable-part norms".into()));
    }
    let k = ensemble.len() as f64;
    let mean_square: Vec<f64> = (0..times.len())
        .map(|i| ensemble.iter().map(|t| t.norm_xs[i].powi(2)).sum::<f64>() / k)
        .collect();
    let rate = fit_rate(&times, &mean_square, window)?;
    Ok(MeanSquareDecay { rate, times, mean_square })
}

/// Growth rate of the uncontrolled system `dX/dt = −A X` from `x0`, fitted
/// over the trailing half of `[0, t_end]`. Positive means growth.
pub fn baseline_growth(model: &OperatorModel, x0: &DVector<C64>, t_end: f64) -> Result<f64> {
    let samples = 200usize;
    if !(t_end > 0.0) {
        return Err(Error::InvalidArgument(format!("horizon {t_end} must be positive")));
    }
    let h = t_end / samples as f64;
    let step = expm(&(model.generator() * C64::new(-h, 0.0)));
    let n0 = model.norm(x0);
    if !(n0 > 0.0) {
        return Err(Error::InvalidArgument("initial state is zero".into()));
    }
    let mut x = x0 / C64::new(n0, 0.0);
    let mut times = vec![0.0];
    let mut logs = vec![n0.ln()];
    for s in 1..=samples {
        x = &step * x;
        // renormalize each sample; only the log increments are kept
        let nx = model.norm(&x);
        logs.push(logs[s - 1] + nx.ln());
        x /= C64::new(nx, 0.0);
        times.push(s as f64 * h);
    }
    let start = tail_start(&times, DEFAULT_WINDOW)?;
    Ok(slope(&times[start..], &logs[start..]))
}

/// Compares two batches of per-path rates: returns `(difference of means,
/// standard error of the difference)`.
pub fn compare_batches(a: &[f64], b: &[f64]) -> (f64, f64) {
    let stats = |v: &[f64]| {
        let n = v.len() as f64;
        let m = v.iter().sum::<f64>() / n;
        let var = v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0);
        (m, var / n)
    };
    let (ma, va) = stats(a);
    let (mb, vb) = stats(b);
    (ma - mb, (va + vb).sqrt())
}
