use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("parse error: {0}")]
    Parse(String),

    #[error("duplicate bus id {0}")]
    DuplicateBus(u32),

    #[error("expected exactly one substation bus, found {0}")]
    Substation(usize),

    #[error("unknown bus id {0}")]
    UnknownBus(u32),

    #[error("line {from}-{to} has zero or negative impedance")]
    BadImpedance { from: u32, to: u32 },

    #[error("feeder graph is disconnected: bus {0} is unreachable from the substation")]
    Disconnected(u32),

    #[error("invalid probing setup: {0}")]
    InvalidSetup(String),

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("dimension mismatch: expected {expected}, got {got}")]
    Dimension { expected: usize, got: usize },

    #[error("singular matrix: {0}")]
    Singular(String),

    #[error("power flow did not converge after {iterations} iterations (residual {residual:.3e})")]
    PowerFlowDiverged { iterations: usize, residual: f64 },

    #[error(
        "reduced library holds {kept} candidates but {needed} are required; \
         broaden the voltage band or tighten the load uncertainty"
    )]
    LibraryTooSmall { kept: usize, needed: usize },

    #[error("exhaustive search over {combinations} subsets exceeds the limit of {limit}")]
    SearchTooLarge { combinations: u128, limit: u128 },

    #[error("P2L Jacobian is singular or ill-conditioned (condition number {condition:.3e})")]
    Unobservable { condition: f64 },

    #[error("estimation diverged after {iterations} iterations (residual {residual:.3e})")]
    EstimationDiverged { iterations: usize, residual: f64 },

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}
