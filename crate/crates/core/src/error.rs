use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid model: {0}")]
    InvalidModel(String),
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("mask interval ({lo}, {hi}) contains no grid point")]
    EmptyMask { lo: f64, hi: f64 },

    #[error("eigensolver failed to converge")]
    EigenNoConvergence,
    #[error("eigen residual {residual:.3e} exceeds tolerance {tol:.3e} (index {index})")]
    EigenResidual { index: usize, residual: f64, tol: f64 },
    #[error("singular cross-Gram block for eigenvalue cluster starting at index {index} (defective or degenerate eigenvectors)")]
    SingularCrossGram { index: usize },
    #[error("no unstable index satisfies the selection rule: real-part partial sums never become positive")]
    UnstableIndexUnattainable,
    #[error("singular Sylvester system (spectra of A and -A^H overlap)")]
    SingularSylvester,
    #[error("Lyapunov solution is not Hermitian positive definite")]
    LyapunovNotPositive,
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("nothing to stabilize: unstable block is empty")]
    NothingToStabilize,
    #[error("a single mode with Re λ = {0} cannot be stabilized by skew-symmetric noise")]
    SingleModeUnstabilizable(f64),
    #[error("target rate {target} is unreachable: trace-average bound is {bound}")]
    TargetUnreachable { target: f64, bound: f64 },
    #[error("noise tuning hit the intensity cap at sigma = {sigma}; best rate {best_rate:.4} (target {target})")]
    TuningFailed { sigma: f64, best_rate: f64, target: f64 },
    #[error("singular actuator Gram matrix (condition number {condition:.3e})")]
    SingularGram { condition: f64 },
    #[error("actuator identity residual {0:.3e} exceeds tolerance")]
    ActuatorIdentity(f64),
    #[error("real basis has {found} independent vectors, expected {expected}")]
    RealBasisSize { expected: usize, found: usize },

    #[error("system is already in Ito form")]
    AlreadyIto,
    #[error("non-finite state at step {step}")]
    BlowUp { step: usize },
    #[error("not enough data: {0}")]
    InsufficientData(String),

    #[error("matrix file: {0}")]
    MatrixFormat(String),
    #[error("config: {0}")]
    Config(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
