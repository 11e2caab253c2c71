use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    #[error("invalid parameters: {0}")]
    InvalidParams(String),

    #[error("finite-horizon field `{0}` is required but missing")]
    MissingField(&'static str),

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("concavity violated: 4*lam*phi - mu^2*(1-alpha2)^2 = {margin:e} <= 0")]
    ConcavityViolated { margin: f64 },

    #[error("alpha4 root complex: discriminant {discriminant:e} < 0")]
    Alpha4Complex { discriminant: f64 },

    #[error("alpha2 fixed point diverged; last iterates {trace:?}")]
    Alpha2Diverged { trace: Vec<f64> },

    #[error("linear-term system singular (determinant {determinant:e})")]
    LinearSystemSingular { determinant: f64 },

    #[error("infinite-horizon constant undefined at rho=0 (alpha6 undefined)")]
    Alpha6Undefined,

    #[error("Riccati blow-up at t={t}")]
    RiccatiBlowUp { t: f64 },

    #[error("time {t} outside [0, {horizon}]")]
    OutOfRange { t: f64, horizon: f64 },

    #[error("closed form valid only at mu=0 (mu={mu})")]
    RequiresZeroMu { mu: f64 },

    #[error("no stationary distribution: closed-loop eigenvalue real parts {eigen_real_parts:?}")]
    NoStationaryDistribution { eigen_real_parts: [f64; 2] },

    #[error("simulation diverged at step {step}")]
    SimulationDiverged { step: usize },

    #[error("at least {required} paths are needed, got {got}")]
    InsufficientPaths { required: usize, got: usize },
}
