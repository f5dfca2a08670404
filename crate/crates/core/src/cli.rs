//! Config-driven experiment runner: spectrum, synthesis, simulation,
//! certification and report files.

use std::fmt;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::certify::{self, DecayCertificate, Verdict};
use crate::error::{Error, Result};
use crate::linalg::C64;
use crate::model::{self, AdvectionDiffusionSpec, OperatorModel};
use crate::sde::{self, ClosedLoopParams, LyapunovParams, Trajectory};
use crate::spectral::{self, SpectralData, UnstableDecomposition};
use crate::synthesis::{self, ControllerKind, FeedbackLaw, NoiseChoice, TuneParams};

#[derive(Debug, Clone, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub model: ModelSection,
    pub mask: Option<MaskSection>,
    pub controller: ControllerSection,
    #[serde(default)]
    pub sde: SdeSection,
    #[serde(default)]
    pub certify: CertifySection,
    #[serde(default)]
    pub output: OutputSection,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    AdvectionDiffusion,
    Matrix,
}

#[derive(Debug, Clone, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    pub kind: ModelKind,
    pub n: Option<usize>,
    pub nu: Option<f64>,
    #[serde(default)]
    pub f: f64,
    #[serde(default)]
    pub c: f64,
    /// Matrix file, relative paths resolved against the config file.
    pub path: Option<PathBuf>,
}

#[derive(Debug, Clone, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct MaskSection {
    pub lo: f64,
    pub hi: f64,
}

#[derive(Debug, Clone, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct ControllerSection {
    pub kind: ControllerKind,
    pub target_rate: Option<f64>,
    /// Fixed intensity; skips tuning when present.
    pub sigma: Option<f64>,
    #[serde(default)]
    pub tuning: TuningSection,
}

#[derive(Debug, Clone, Deserialize, Serialize)]
#[serde(deny_unknown_fields, default)]
pub struct TuningSection {
    pub paths: usize,
    pub t_end: f64,
    pub dt: f64,
    pub max_doublings: usize,
    pub confidence: f64,
}

impl Default for TuningSection {
    fn default() -> Self {
        Self { paths: 32, t_end: 40.0, dt: 2e-3, max_doublings: 8, confidence: 2.0 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum InitialState {
    /// Standard normal entries keyed by the seed, unit norm.
    Random,
    /// All ones, unit norm.
    Ones,
}

#[derive(Debug, Clone, Deserialize, Serialize)]
#[serde(deny_unknown_fields, default)]
pub struct SdeSection {
    pub dt: f64,
    pub t_end: f64,
    pub paths: usize,
    pub seed: u64,
    /// Steps between recorded samples; defaults to a spacing of about 0.05.
    pub record_every: Option<usize>,
    pub x0: InitialState,
}

impl Default for SdeSection {
    fn default() -> Self {
        Self { dt: 1e-3, t_end: 60.0, paths: 64, seed: 0, record_every: None, x0: InitialState::Random }
    }
}

#[derive(Debug, Clone, Deserialize, Serialize)]
#[serde(deny_unknown_fields, default)]
pub struct CertifySection {
    /// Defaults to half the ensemble-minimum fitted rate.
    pub gamma: Option<f64>,
    pub window: f64,
}

impl Default for CertifySection {
    fn default() -> Self {
        Self { gamma: None, window: certify::DEFAULT_WINDOW }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Format {
    Csv,
    Json,
}

#[derive(Debug, Clone, Deserialize, Serialize)]
#[serde(deny_unknown_fields, default)]
pub struct OutputSection {
    pub directory: PathBuf,
    pub formats: Vec<Format>,
}

impl Default for OutputSection {
    fn default() -> Self {
        Self { directory: PathBuf::from("out"), formats: vec![Format::Csv, Format::Json] }
    }
}

impl OutputSection {
    fn wants(&self, f: Format) -> bool {
        self.formats.contains(&f)
    }
}

fn config_err(msg: impl Into<String>) -> Error {
    Error::Config(msg.into())
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| config_err(e.to_string()))
    }

    /// Reads a config file; relative matrix paths are resolved against its directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| config_err(format!("{}: {e}", path.display())))?;
        let mut cfg = Self::from_toml(&text)?;
        if let Some(p) = cfg.model.path.as_mut() {
            if p.is_relative() {
                if let Some(dir) = path.parent() {
                    *p = dir.join(&*p);
                }
            }
        }
        Ok(cfg)
    }

    /// Range checks performed before any computation starts.
    pub fn validate(&self) -> Result<()> {
        match self.model.kind {
            ModelKind::AdvectionDiffusion => {
                self.advection_spec()?.validate().map_err(|e| config_err(e.to_string()))?;
            }
            ModelKind::Matrix => {
                let p = self.model.path.as_ref().ok_or_else(|| config_err("model.path is required for kind = \"matrix\""))?;
                if !p.is_file() {
                    return Err(config_err(format!("matrix file {} does not exist", p.display())));
                }
            }
        }
        if let Some(m) = &self.mask {
            if !(m.lo < m.hi) {
                return Err(config_err(format!("mask.lo {} must be below mask.hi {}", m.lo, m.hi)));
            }
        }
        let c = &self.controller;
        match (c.sigma, c.target_rate) {
            (None, None) => return Err(config_err("controller needs sigma or target_rate")),
            (Some(s), _) if !(s >= 0.0 && s.is_finite()) => {
                return Err(config_err(format!("controller.sigma {s} must be non-negative")))
            }
            (None, Some(t)) if !(t < 0.0) => {
                return Err(config_err(format!("controller.target_rate {t} must be negative")))
            }
            _ => {}
        }
        let t = &c.tuning;
        if t.paths < 8 || !(t.dt > 0.0) || !(t.t_end >= t.dt) || !(t.confidence >= 0.0) {
            return Err(config_err("controller.tuning needs paths >= 8, dt > 0, t_end >= dt, confidence >= 0"));
        }
        let s = &self.sde;
        if !(s.dt > 0.0) || !(s.t_end >= s.dt) {
            return Err(config_err(format!("sde.dt {} and sde.t_end {} must satisfy 0 < dt <= t_end", s.dt, s.t_end)));
        }
        if s.paths == 0 {
            return Err(config_err("sde.paths must be positive"));
        }
        if s.record_every == Some(0) {
            return Err(config_err("sde.record_every must be positive"));
        }
        let w = self.certify.window;
        if !(w > 0.0 && w <= 1.0) {
            return Err(config_err(format!("certify.window {w} outside (0, 1]")));
        }
        if let Some(g) = self.certify.gamma {
            if !(g > 0.0) {
                return Err(config_err(format!("certify.gamma {g} must be positive")));
            }
        }
        Ok(())
    }

    fn advection_spec(&self) -> Result<AdvectionDiffusionSpec> {
        let m = &self.model;
        Ok(AdvectionDiffusionSpec {
            n: m.n.ok_or_else(|| config_err("model.n is required"))?,
            nu: m.nu.ok_or_else(|| config_err("model.nu is required"))?,
            f: m.f,
            c: m.c,
        })
    }

    pub fn record_every(&self) -> usize {
        self.sde.record_every.unwrap_or_else(|| ((0.05 / self.sde.dt).round() as usize).max(1))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    Config,
    Model,
    Spectrum,
    Synthesize,
    Simulate,
    Certify,
    Output,
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Stage::Config => "config",
            Stage::Model => "model",
            Stage::Spectrum => "spectrum",
            Stage::Synthesize => "synthesize",
            Stage::Simulate => "simulate",
            Stage::Certify => "certify",
            Stage::Output => "output",
        };
        f.write_str(s)
    }
}

#[derive(Debug)]
pub struct StageError {
    pub stage: Stage,
    pub source: Error,
}

impl fmt::Display for StageError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "stage `{}`: {}", self.stage, self.source)
    }
}

impl std::error::Error for StageError {}

impl StageError {
    /// 2 for usage/config/input problems, 3 for numerical failures.
    pub fn exit_code(&self) -> i32 {
        match (&self.stage, &self.source) {
            (Stage::Config | Stage::Model, _) => 2,
            (_, Error::Config(_) | Error::MatrixFormat(_) | Error::Io(_) | Error::Csv(_) | Error::Json(_)) => 2,
            _ => 3,
        }
    }
}

pub type StageResult<T> = std::result::Result<T, StageError>;

trait AtStage<T> {
    fn at(self, stage: Stage) -> StageResult<T>;
}

impl<T> AtStage<T> for Result<T> {
    fn at(self, stage: Stage) -> StageResult<T> {
        self.map_err(|source| StageError { stage, source })
    }
}

// ---- matrix files ----

/// Reads `n m complex|real` followed by `n*m` row-major entries (pairs
/// `re im` for complex). Returns the matrix and whether it was stored as real.
pub fn read_matrix(path: &Path) -> Result<(DMatrix<C64>, bool)> {
    let text = fs::read_to_string(path)?;
    parse_matrix(&text)
}

pub fn parse_matrix(text: &str) -> Result<(DMatrix<C64>, bool)> {
    let mut tokens = text.split_whitespace();
    let mut header = || tokens.next().ok_or_else(|| Error::MatrixFormat("truncated header".into()));
    let rows: usize = header()?.parse().map_err(|_| Error::MatrixFormat("row count is not an integer".into()))?;
    let cols: usize = header()?.parse().map_err(|_| Error::MatrixFormat("column count is not an integer".into()))?;
    let real = match header()? {
        "real" => true,
        "complex" => false,
        other => return Err(Error::MatrixFormat(format!("field must be `real` or `complex`, got `{other}`"))),
    };
    let per = if real { 1 } else { 2 };
    let expected = rows * cols * per;
    let values = tokens
        .map(|t| t.parse::<f64>().map_err(|_| Error::MatrixFormat(format!("non-numeric token `{t}`"))))
        .collect::<Result<Vec<f64>>>()?;
    if values.len() != expected {
        return Err(Error::MatrixFormat(format!("expected {expected} numbers, found {}", values.len())));
    }
    let m = DMatrix::from_fn(rows, cols, |i, j| {
        let k = (i * cols + j) * per;
        if real {
            C64::new(values[k], 0.0)
        } else {
            C64::new(values[k], values[k + 1])
        }
    });
    Ok((m, real))
}

pub fn format_matrix(m: &DMatrix<C64>, real: bool) -> String {
    let mut s = format!("{} {} {}\n", m.nrows(), m.ncols(), if real { "real" } else { "complex" });
    for i in 0..m.nrows() {
        let row: Vec<String> = (0..m.ncols())
            .map(|j| {
                let z = m[(i, j)];
                if real {
                    format!("{:?}", z.re)
                } else {
                    format!("{:?} {:?}", z.re, z.im)
                }
            })
            .collect();
        s.push_str(&row.join(" "));
        s.push('\n');
    }
    s
}

pub fn write_matrix(path: &Path, m: &DMatrix<C64>, real: bool) -> Result<()> {
    fs::write(path, format_matrix(m, real))?;
    Ok(())
}

/// Model from a matrix file with unit weights and a full mask.
pub fn matrix_roundtrip(path: &Path) -> Result<OperatorModel> {
    let (m, _) = read_matrix(path)?;
    let n = m.nrows();
    model::build_from_matrix(m, DVector::from_element(n, 1.0), DVector::from_element(n, 1.0))
}

// ---- pipeline stages ----

pub fn build_model(cfg: &ExperimentConfig) -> Result<OperatorModel> {
    let base = match cfg.model.kind {
        ModelKind::AdvectionDiffusion => model::build_advection_diffusion(&cfg.advection_spec()?)?,
        ModelKind::Matrix => matrix_roundtrip(cfg.model.path.as_ref().expect("validated"))?,
    };
    match &cfg.mask {
        Some(m) => model::subdomain_mask(&base, m.lo, m.hi),
        None => Ok(base),
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct SpectrumSummary {
    #[serde(rename = "N")]
    pub n: usize,
    pub sum_re: f64,
    pub stable_rate: Option<f64>,
    pub semisimple: bool,
}

#[derive(Debug, Clone, Serialize)]
pub struct SpectrumRow {
    pub index: usize,
    pub re: f64,
    pub im: f64,
    pub residual: f64,
}

pub struct SpectrumStage {
    pub spec: SpectralData,
    pub dec: UnstableDecomposition,
    pub summary: SpectrumSummary,
}

pub fn spectrum_stage(model: &OperatorModel) -> Result<SpectrumStage> {
    let spec = spectral::eigendecompose(model, 1e-8)?;
    let dec = spectral::select_unstable_index(&spec)?;
    let report = spectral::check_semisimple(&spec, dec.n_unstable + 1, spectral::RANK_TOL);
    let summary = SpectrumSummary {
        n: dec.n_unstable,
        sum_re: dec.sum_re,
        stable_rate: dec.stable_rate.is_finite().then_some(dec.stable_rate),
        semisimple: report.semisimple,
    };
    Ok(SpectrumStage { spec, dec, summary })
}

pub fn spectrum_rows(spec: &SpectralData) -> Vec<SpectrumRow> {
    spec.eigenvalues
        .iter()
        .enumerate()
        .map(|(i, z)| SpectrumRow { index: i + 1, re: z.re, im: z.im, residual: spec.right_residuals[i] })
        .collect()
}

#[derive(Debug, Clone, Serialize)]
pub struct SynthesisSummary {
    #[serde(rename = "N")]
    pub n: usize,
    #[serde(rename = "M")]
    pub m: usize,
    pub sigma: f64,
    pub achieved_rate: Option<f64>,
    pub rate_stderr: Option<f64>,
    pub certified: bool,
    pub gram_condition: f64,
    pub eq18_residual: f64,
    pub kind: ControllerKind,
}

impl SynthesisSummary {
    pub fn of(law: &FeedbackLaw) -> Self {
        Self {
            n: law.n_modes(),
            m: law.channels(),
            sigma: law.noise.sigma,
            achieved_rate: law.noise.achieved_rate,
            rate_stderr: law.noise.rate_stderr,
            certified: law.noise.certified,
            gram_condition: law.actuators.condition_number,
            eq18_residual: law.actuators.eq18_residual,
            kind: law.kind,
        }
    }
}

fn tune_params(cfg: &ExperimentConfig) -> TuneParams {
    let t = &cfg.controller.tuning;
    TuneParams {
        estimator: LyapunovParams {
            paths: t.paths,
            t_end: t.t_end,
            dt: t.dt,
            seed: cfg.sde.seed,
            ..Default::default()
        },
        max_doublings: t.max_doublings,
        confidence: t.confidence,
    }
}

pub fn noise_choice(cfg: &ExperimentConfig) -> NoiseChoice {
    match (cfg.controller.sigma, cfg.controller.target_rate) {
        (Some(s), _) => NoiseChoice::Sigma(s),
        (None, Some(rate)) => NoiseChoice::Target { rate, tune: tune_params(cfg) },
        (None, None) => NoiseChoice::Sigma(0.0),
    }
}

pub fn synthesize_stage(
    cfg: &ExperimentConfig,
    model: &OperatorModel,
    dec: &UnstableDecomposition,
    choice: &NoiseChoice,
) -> Result<FeedbackLaw> {
    match cfg.controller.kind {
        ControllerKind::Complex => synthesis::build_complex_controller(dec, model, choice),
        ControllerKind::Real => {
            let basis = synthesis::build_real_basis(dec, model)?;
            synthesis::build_real_feedback(&basis, model, choice)
        }
    }
}

const X0_SALT: u64 = 0x0dd5_eed0_0000_0001;

pub fn initial_state(cfg: &ExperimentConfig, model: &OperatorModel) -> DVector<C64> {
    let n = model.dim();
    let v = match cfg.sde.x0 {
        InitialState::Ones => DVector::from_element(n, C64::new(1.0, 0.0)),
        InitialState::Random => {
            let mut s = sde::noise::NormalStream::new(cfg.sde.seed ^ X0_SALT, 0);
            DVector::from_fn(n, |_, _| C64::new(s.next_normal(), 0.0))
        }
    };
    let nv = model.norm(&v);
    v / C64::new(nv, 0.0)
}

pub fn closed_loop_params(cfg: &ExperimentConfig) -> ClosedLoopParams {
    let mut p = ClosedLoopParams::new(cfg.sde.dt, cfg.sde.t_end, cfg.sde.seed);
    p.record_every = cfg.record_every();
    p
}

pub fn simulate_stage(
    cfg: &ExperimentConfig,
    model: &OperatorModel,
    dec: &UnstableDecomposition,
    law: &FeedbackLaw,
) -> Result<Vec<Trajectory>> {
    let x0 = initial_state(cfg, model);
    sde::simulate_ensemble(model, dec, law, &x0, &closed_loop_params(cfg), 0, cfg.sde.paths)
}

#[derive(Debug, Clone, Serialize)]
pub struct CertificateSummary {
    pub gamma: f64,
    pub gamma_hat: f64,
    #[serde(rename = "C_hat")]
    pub c_hat: f64,
    pub paths: usize,
    pub fraction_satisfying: f64,
    pub window: f64,
    pub verdict: Verdict,
}

impl CertificateSummary {
    pub fn of(c: &DecayCertificate) -> Self {
        Self {
            gamma: c.gamma,
            gamma_hat: c.gamma_hat,
            c_hat: c.c_hat,
            paths: c.paths,
            fraction_satisfying: c.fraction_satisfying,
            window: c.window,
            verdict: c.verdict,
        }
    }
}

pub fn certify_stage(cfg: &ExperimentConfig, ensemble: &[Trajectory]) -> Result<DecayCertificate> {
    let window = cfg.certify.window;
    let gamma = match cfg.certify.gamma {
        Some(g) => g,
        None => certify::default_gamma(ensemble, window)?,
    };
    certify::certify_decay(ensemble, gamma, window)
}

// ---- output files ----

fn create(path: &Path) -> Result<BufWriter<fs::File>> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    Ok(BufWriter::new(fs::File::create(path)?))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut w = create(path)?;
    serde_json::to_writer_pretty(&mut w, value)?;
    w.write_all(b"\n")?;
    w.flush()?;
    Ok(())
}

pub fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut w = csv::Writer::from_writer(create(path)?);
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PathRow {
    pub t: f64,
    #[serde(rename = "norm_X")]
    pub norm_x: f64,
    #[serde(rename = "norm_Xu")]
    pub norm_xu: f64,
    #[serde(rename = "norm_Xs")]
    pub norm_xs: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct EnsembleRow {
    pub t: f64,
    pub mean_log_norm: f64,
    pub q10: f64,
    pub q90: f64,
}

pub fn path_rows(t: &Trajectory) -> Vec<PathRow> {
    (0..t.len())
        .map(|i| PathRow {
            t: t.times[i],
            norm_x: t.norm_x[i],
            norm_xu: t.norm_xu.get(i).copied().unwrap_or(f64::NAN),
            norm_xs: t.norm_xs.get(i).copied().unwrap_or(f64::NAN),
        })
        .collect()
}

fn quantile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

pub fn ensemble_rows(ensemble: &[Trajectory]) -> Vec<EnsembleRow> {
    let Some(first) = ensemble.first() else { return Vec::new() };
    (0..first.len())
        .map(|i| {
            let mut logs: Vec<f64> = ensemble.iter().map(|t| t.norm_x[i].ln()).collect();
            logs.sort_by(f64::total_cmp);
            EnsembleRow {
                t: first.times[i],
                mean_log_norm: logs.iter().sum::<f64>() / logs.len() as f64,
                q10: quantile(&logs, 0.1),
                q90: quantile(&logs, 0.9),
            }
        })
        .collect()
}

pub fn path_file(dir: &Path, path: u64) -> PathBuf {
    dir.join("paths").join(format!("path_{path:04}.csv"))
}

pub fn write_trajectories(dir: &Path, ensemble: &[Trajectory]) -> Result<()> {
    for t in ensemble {
        write_csv(&path_file(dir, t.path), &path_rows(t))?;
    }
    write_csv(&dir.join("ensemble.csv"), &ensemble_rows(ensemble))
}

/// Reads every `paths/path_*.csv` under `dir` back into norm-only trajectories.
pub fn read_trajectories(dir: &Path) -> Result<Vec<Trajectory>> {
    let pdir = dir.join("paths");
    let mut files: Vec<PathBuf> = fs::read_dir(&pdir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "csv"))
        .collect();
    files.sort();
    if files.is_empty() {
        return Err(Error::InsufficientData(format!("no trajectory CSVs in {}", pdir.display())));
    }
    files
        .iter()
        .enumerate()
        .map(|(k, f)| {
            let mut r = csv::Reader::from_path(f)?;
            let rows = r.deserialize().collect::<std::result::Result<Vec<PathRow>, _>>()?;
            let dt = if rows.len() > 1 { rows[1].t - rows[0].t } else { 0.0 };
            Ok(Trajectory {
                times: rows.iter().map(|r| r.t).collect(),
                states: Vec::new(),
                norm_x: rows.iter().map(|r| r.norm_x).collect(),
                norm_xu: rows.iter().map(|r| r.norm_xu).collect(),
                norm_xs: rows.iter().map(|r| r.norm_xs).collect(),
                modal: Vec::new(),
                modal_reduced: Vec::new(),
                seed: 0,
                path: k as u64,
                dt,
            })
        })
        .collect()
}

#[derive(Debug, Clone, Serialize)]
pub struct ExperimentReport {
    pub model: String,
    pub spectrum: SpectrumSummary,
    pub synthesis: SynthesisSummary,
    pub certificate: CertificateSummary,
    pub baseline_growth: f64,
    pub mean_square_rate: Option<f64>,
    /// Largest gap between modal coordinates of the full simulation and the
    /// directly integrated modal system, relative to the initial modal size.
    pub modal_gap: f64,
    pub output_directory: PathBuf,
}

impl ExperimentReport {
    pub fn verdict(&self) -> Verdict {
        self.certificate.verdict
    }

    pub fn summary_text(&self) -> String {
        let opt = |v: Option<f64>| v.map(|x| format!("{x:.6}")).unwrap_or_else(|| "n/a".into());
        let s = &self.synthesis;
        let c = &self.certificate;
        let mut out = String::new();
        out.push_str(&format!("model: {}\n", self.model));
        out.push_str(&format!(
            "spectrum: N={} sum_re={:.6} stable_rate={} semisimple={}\n",
            self.spectrum.n,
            self.spectrum.sum_re,
            opt(self.spectrum.stable_rate),
            self.spectrum.semisimple
        ));
        out.push_str(&format!(
            "controller: kind={:?} N={} M={} sigma={:.6} modal_rate={} gram_condition={:.3e} eq18_residual={:.3e}\n",
            s.kind,
            s.n,
            s.m,
            s.sigma,
            opt(s.achieved_rate),
            s.gram_condition,
            s.eq18_residual
        ));
        out.push_str(&format!("baseline growth (uncontrolled): {:.6}\n", self.baseline_growth));
        out.push_str(&format!("stable part mean-square rate: {}\n", opt(self.mean_square_rate)));
        out.push_str(&format!("modal cross-check gap: {:.3e}\n", self.modal_gap));
        out.push_str(&format!(
            "certificate: gamma={:.6} gamma_hat={:.6} C_hat={:.6} paths={} fraction={:.4}\n",
            c.gamma, c.gamma_hat, c.c_hat, c.paths, c.fraction_satisfying
        ));
        out.push_str(&format!("verdict: {:?}\n", c.verdict).to_uppercase().replace("VERDICT", "verdict"));
        out
    }
}

fn modal_gap(ensemble: &[Trajectory]) -> f64 {
    ensemble
        .iter()
        .map(|t| {
            let scale = t.modal.first().map(|y| y.norm()).unwrap_or(1.0).max(f64::MIN_POSITIVE);
            t.modal
                .iter()
                .zip(&t.modal_reduced)
                .map(|(a, b)| (a - b).norm() / scale)
                .fold(0.0, f64::max)
        })
        .fold(0.0, f64::max)
}

/// Full chain: model, spectrum, synthesis, closed-loop ensemble, certificate
/// and report files under the configured output directory.
pub fn run_pipeline(cfg: &ExperimentConfig) -> StageResult<ExperimentReport> {
    cfg.validate().at(Stage::Config)?;
    let out = &cfg.output.directory;
    let model = build_model(cfg).at(Stage::Model)?;

    let sp = spectrum_stage(&model).at(Stage::Spectrum)?;
    if cfg.output.wants(Format::Csv) {
        write_csv(&out.join("spectrum.csv"), &spectrum_rows(&sp.spec)).at(Stage::Output)?;
    }
    if cfg.output.wants(Format::Json) {
        write_json(&out.join("spectrum.json"), &sp.summary).at(Stage::Output)?;
    }

    let law = synthesize_stage(cfg, &model, &sp.dec, &noise_choice(cfg)).at(Stage::Synthesize)?;
    let synth = SynthesisSummary::of(&law);
    if cfg.output.wants(Format::Json) {
        write_json(&out.join("synthesis.json"), &synth).at(Stage::Output)?;
    }

    let ensemble = simulate_stage(cfg, &model, &sp.dec, &law).at(Stage::Simulate)?;
    if cfg.output.wants(Format::Csv) {
        write_trajectories(out, &ensemble).at(Stage::Output)?;
    }

    let cert = certify_stage(cfg, &ensemble).at(Stage::Certify)?;
    let mean_square_rate = certify::mean_square_decay(&ensemble, cfg.certify.window).ok().map(|m| m.rate);
    let x0 = initial_state(cfg, &model);
    let baseline = certify::baseline_growth(&model, &x0, cfg.sde.t_end).at(Stage::Certify)?;
    let report = ExperimentReport {
        model: model.label.clone(),
        spectrum: sp.summary.clone(),
        synthesis: synth,
        certificate: CertificateSummary::of(&cert),
        baseline_growth: baseline,
        mean_square_rate,
        modal_gap: modal_gap(&ensemble),
        output_directory: out.clone(),
    };
    if cfg.output.wants(Format::Json) {
        write_json(&out.join("certificate.json"), &report.certificate).at(Stage::Output)?;
    }
    fs::create_dir_all(out).map_err(Error::from).at(Stage::Output)?;
    fs::write(out.join("summary.txt"), report.summary_text()).map_err(Error::from).at(Stage::Output)?;
    Ok(report)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SweepAxis {
    Sigma,
    MaskWidth,
}

#[derive(Debug, Clone, Serialize)]
pub struct SweepRow {
    pub value: f64,
    /// Top Lyapunov exponent of the modal system.
    pub modal_rate: Option<f64>,
    pub modal_stderr: Option<f64>,
    pub gram_condition: Option<f64>,
    pub eq18_residual: Option<f64>,
    /// Mean fitted closed-loop decay rate (mask-width sweeps).
    pub closed_loop_rate: Option<f64>,
    pub error: Option<String>,
}

/// Tabulates achieved rates while varying σ or the mask width (the mask stays
/// centered on the configured interval).
pub fn sweep(cfg: &ExperimentConfig, axis: SweepAxis, values: &[f64]) -> StageResult<Vec<SweepRow>> {
    cfg.validate().at(Stage::Config)?;
    let base = build_model(cfg).at(Stage::Model)?;
    let sp = spectrum_stage(&base).at(Stage::Spectrum)?;
    let est = tune_params(cfg).estimator;
    let mut rows = Vec::new();
    for &v in values {
        let mut row = SweepRow {
            value: v,
            modal_rate: None,
            modal_stderr: None,
            gram_condition: None,
            eq18_residual: None,
            closed_loop_rate: None,
            error: None,
        };
        let result: Result<()> = (|| {
            match axis {
                SweepAxis::Sigma => {
                    let law = synthesize_stage(cfg, &base, &sp.dec, &NoiseChoice::Sigma(v))?;
                    let e = modal_rate(&law, &est)?;
                    row.modal_rate = Some(e.value);
                    row.modal_stderr = Some(e.stderr);
                    row.gram_condition = Some(law.actuators.condition_number);
                    row.eq18_residual = Some(law.actuators.eq18_residual);
                }
                SweepAxis::MaskWidth => {
                    let (lo, hi) = cfg.mask.as_ref().map(|m| (m.lo, m.hi)).unwrap_or((0.0, 1.0));
                    let mid = 0.5 * (lo + hi);
                    let masked = model::subdomain_mask(&base, mid - 0.5 * v, mid + 0.5 * v)?;
                    let law = synthesize_stage(cfg, &masked, &sp.dec, &noise_choice(cfg))?;
                    row.modal_rate = law.noise.achieved_rate;
                    row.modal_stderr = law.noise.rate_stderr;
                    row.gram_condition = Some(law.actuators.condition_number);
                    row.eq18_residual = Some(law.actuators.eq18_residual);
                    let ens = simulate_stage(cfg, &masked, &sp.dec, &law)?;
                    let rates = ens
                        .iter()
                        .map(|t| certify::fit_decay_rate(t, cfg.certify.window))
                        .collect::<Result<Vec<_>>>()?;
                    row.closed_loop_rate = Some(rates.iter().sum::<f64>() / rates.len() as f64);
                }
            }
            Ok(())
        })();
        if let Err(e) = result {
            row.error = Some(e.to_string());
        }
        rows.push(row);
    }
    Ok(rows)
}

fn modal_rate(law: &FeedbackLaw, est: &LyapunovParams) -> Result<sde::LyapunovEstimate> {
    match &law.maps {
        synthesis::RealizedMaps::Complex(m) => synthesis::estimate_modal_rate(&m.modal_drift, &law.noise, est),
        synthesis::RealizedMaps::Real(m) => synthesis::estimate_modal_rate(&m.modal_drift, &law.noise, est),
    }
}
