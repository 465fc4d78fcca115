//! Staged event-driven serving for sparse recommendation models.
//!
//! The crate is organised around the serving path of a deep recommendation
//! service:
//!
//! * [`pipeline`] compiles a declarative DAG of stage processors into an
//!   asynchronous execution plan with shared bounded channels.
//! * [`cube`] is the read-only sparse parameter store (feature signature to
//!   embedding) with block placement and double-buffered hot reload.
//! * [`cache`] holds the two-level LFU cube cache and the LRU query cache.
//! * [`scorer`] assembles embeddings and runs the dense network.
//! * [`tuning`] fits latency/resource surrogates and searches the parameter
//!   space with a constrained (1+1)-CMA-ES.
//! * [`shedding`] decides per-request candidate cutoffs under overload.
//! * [`workload`] generates and replays calibrated synthetic traffic.
//! * [`serving`] wires everything into a [`serving::ServingStack`], and
//!   [`experiments`] holds the measurement harnesses used by `bench`.

pub mod cache;
pub mod cpu;
pub mod cube;
pub mod experiments;
pub mod pipeline;
pub mod request;
pub mod scorer;
pub mod serving;
pub mod shedding;
pub mod synth;
pub mod tensor_file;
pub mod tuning;
pub mod workload;

pub use cube::{sign, FeatureSignature, SparseParameter};
