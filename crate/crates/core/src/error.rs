use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch for {what}: expected {expected:?}, got {actual:?}")]
    ShapeMismatch {
        what: String,
        expected: (usize, usize),
        actual: (usize, usize),
    },

    #[error("phase {phase} outside [0, {tau})")]
    PhaseOutOfRange { phase: f64, tau: f64 },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("unknown scenario `{0}`")]
    UnknownScenario(String),

    #[error("scenario file: {0}")]
    ScenarioFormat(String),

    #[error("{matrix} is not symmetric (asymmetry {asymmetry:.3e})")]
    NotSymmetric { matrix: String, asymmetry: f64 },

    #[error("{matrix} is singular at phase {phase}")]
    Singular { matrix: String, phase: f64 },

    #[error("state overflow on path {path} at node {node}")]
    Overflow { path: usize, node: usize },

    #[error("ill-conditioned regression at node {node} (condition number {condition:.3e})")]
    IllConditioned { node: usize, condition: f64 },

    #[error("fixed point did not contract within {iterations} iterations (last update {last_update:.3e})")]
    NoContraction { iterations: usize, last_update: f64 },

    #[error("positivity violated: minimum eigenvalue {min_eigenvalue:.3e} below floor {floor:.3e}")]
    PositivityViolated { min_eigenvalue: f64, floor: f64 },

    #[error("feedback is not a stabilizer (decay rate {lambda_hat:.4}, standard error {stderr:.4})")]
    NotStabilizing { lambda_hat: f64, stderr: f64 },

    #[error("monotone descent violated at outer iteration {iteration}: min eigenvalue {min_eigenvalue:.3e} below -{allowance:.3e}")]
    MonotonicityViolated {
        iteration: usize,
        min_eigenvalue: f64,
        allowance: f64,
    },

    #[error("degenerate estimate: {0}")]
    Degenerate(String),

    #[error("state was burned in for feedback `{state}` but evaluated with `{feedback}`")]
    FeedbackMismatch { state: String, feedback: String },

    #[error("burn-in of {k_burn} periods is not stationary; try k_burn >= {suggested}")]
    NotStationary { k_burn: usize, suggested: usize },

    #[error("shooting iteration diverged after {iterations} sweeps (residual {residual:.3e})")]
    ShootingDiverged { iterations: usize, residual: f64 },

    #[error("no positive root: {0}")]
    NoPositiveRoot(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
