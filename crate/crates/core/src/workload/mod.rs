//! Synthetic traffic: calibrated Zipf feature popularity, diurnal arrivals,
//! request recurrence and user feedback, plus trace replay.

mod generate;
mod replay;
mod spec;
mod trace;
mod zipf;

pub use generate::generate;
pub use replay::{replay, LatencySummary, ReplayCallback, ReplayMetrics, ReplayOptions, ReplayResponse, ReplayTarget};
pub use spec::{default_diurnal_profile, WorkloadSpec};
pub use trace::{read_trace, recurrence_fraction, write_trace, TraceRecord};
pub use zipf::{calibrate_zipf, top_mass, ZipfTable};

#[derive(Debug, thiserror::Error)]
pub enum WorkloadError {
    #[error("invalid workload spec: {0}")]
    InvalidSpec(String),
    #[error("cannot put {mass_fraction} of the mass on the top {top_fraction} of ranks")]
    Unachievable { top_fraction: f64, mass_fraction: f64 },
    #[error("trace line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("trace line {line}: timestamp goes backwards")]
    NonMonotonic { line: usize },
    #[error("replay target is not serving")]
    PipelineUnavailable,
    #[error(transparent)]
    Io(#[from] std::io::Error),
}
