use thiserror::Error;

/// Errors raised by the numerical core.
#[derive(Debug, Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("non-finite update at iteration {iteration} (particle {particle})")]
    NonFinite { iteration: u64, particle: usize },

    #[error("time step {dt:e} exceeds the stability bound {bound:e}")]
    Stability { dt: f64, bound: f64 },

    #[error("mass drift {drift:e} at step {step} exceeds tolerance")]
    MassDrift { drift: f64, step: usize },

    #[error("negative cell mass {value:e} at step {step}")]
    NegativeMass { value: f64, step: usize },

    #[error("density evaluates to zero on the whole grid")]
    ZeroDensity,

    #[error("rejection acceptance rate {0:e} is below 1e-4")]
    LowAcceptance(f64),

    #[error("empty input: {0}")]
    Empty(&'static str),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("output error: {0}")]
    Output(String),

    #[error("unsupported target for {what}: {name}")]
    UnsupportedTarget { what: &'static str, name: String },
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
