//! Command line tools and the HTTP scoring service.

pub mod commands;
pub mod config;
pub mod server;

pub use config::ServiceConfig;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),
    #[error("model load failed: {0}")]
    ModelLoad(String),
    #[error("bind failed: {0}")]
    Bind(String),
    #[error("{0}")]
    Runtime(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl CliError {
    /// 1 for configuration problems, 2 for everything else.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 1,
            _ => 2,
        }
    }
}

macro_rules! runtime_from {
    ($($t:ty),*) => {$(
        impl From<$t> for CliError {
            fn from(e: $t) -> Self {
                CliError::Runtime(e.to_string())
            }
        }
    )*};
}

runtime_from!(
    rankserve_core::experiments::ExperimentError,
    rankserve_core::workload::WorkloadError,
    rankserve_core::cube::CubeError,
    rankserve_core::shedding::SheddingError,
    rankserve_core::synth::SynthError,
    serde_json::Error
);

impl From<rankserve_core::serving::ServingError> for CliError {
    fn from(e: rankserve_core::serving::ServingError) -> Self {
        match e {
            rankserve_core::serving::ServingError::Config(m) => CliError::Config(m),
            rankserve_core::serving::ServingError::ModelLoad(m) => CliError::ModelLoad(m),
            other => CliError::Runtime(other.to_string()),
        }
    }
}
