//! Deterministic simulator and analysis toolkit for delayed/asynchronous
//! federated averaging.
//!
//! The crate is organized bottom-up:
//!
//! * [`numerics`] — keyed deterministic RNG streams, the [`Weights`] vector
//!   type, and finite-difference gradient checking.
//! * [`problems`] — synthetic quadratic objectives, multinomial logistic
//!   regression, and a one-hidden-layer MLP, plus dataset loading and
//!   client partitioning.
//! * [`fl_core`] — local SGD, buffered client/server state, aggregation,
//!   and the global model step shared by every algorithm.
//! * [`algorithms`] — participation policies (synchronous FedAvg, delayed
//!   federated averaging in sampled and first-arrivals forms, FedBuff,
//!   asynchronous SGD) and a compact-recursion replay oracle.
//! * [`simulator`] — the discrete-event engine with a wall-clock system
//!   model (compute speeds, up/down link transfer times).
//! * [`theory`] — learning-rate schedules, convergence-bound evaluation,
//!   staleness tail bounds, constant estimation, and Monte Carlo checks of
//!   the sampling identities the schedules rely on.
//! * [`harness`] — config parsing, metrics CSV output, multi-seed sweeps,
//!   and the command-line interface.
//!
//! Every random decision in the crate flows through a labelled
//! [`numerics::RngStream`], so any run is bit-reproducible from its config
//! and root seed alone.

pub mod algorithms;
pub mod fl_core;
pub mod harness;
pub mod numerics;
pub mod problems;
pub mod simulator;
pub mod theory;

pub use numerics::Weights;

use thiserror::Error;

/// Crate-wide error type; variants note which subsystem raised them.
#[derive(Debug, Error)]
pub enum Error {
    /// A numeric quantity that must be finite was NaN or infinite.
    #[error("non-finite value in {0}")]
    NonFinite(String),

    /// Two vectors that must share a dimension did not.
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    /// A problem could not be constructed from the given parameters.
    #[error("invalid problem: {0}")]
    InvalidProblem(String),

    /// Partitioning produced an unusable shard.
    #[error("partition error: {0}")]
    Partition(String),

    /// An IDX data file was malformed.
    #[error("idx file {path}: {reason}")]
    Idx { path: String, reason: String },

    /// A config file could not be parsed; `line` is 1-based.
    #[error("config line {line}: {reason}")]
    Config { line: usize, reason: String },

    /// A config parsed but described an inconsistent experiment.
    #[error("invalid config: {0}")]
    InvalidConfig(String),

    /// Local training or a global step produced a non-finite iterate.
    #[error("divergence: {0}")]
    Divergence(String),

    /// The event queue drained before the requested number of rounds.
    #[error("simulation deadlock: {0}")]
    Deadlock(String),

    /// Learning-rate planning was asked for unusable constants.
    #[error("rate plan: {0}")]
    RatePlan(String),

    /// A preset lookup failed.
    #[error("unknown preset key `{0}`")]
    UnknownPreset(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Crate-wide result alias.
pub type Result<T> = std::result::Result<T, Error>;
