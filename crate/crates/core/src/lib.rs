//! Predictive ASR prefetching simulator.
//!
//! The pipeline reveals token prefixes of each utterance at a fixed decode
//! cadence ([`stream`]), completes each prefix into full-utterance candidates
//! with a backoff n-gram model ([`predictor`]) and the user's own history
//! ([`personal`]), scores candidates with a confidence model
//! ([`confidence`]), runs a one-shot threshold policy ([`policy`]) and
//! aggregates outcomes into success/failure/latency tradeoff curves
//! ([`eval`]). [`experiment`] wires the stages together for the CLI.

pub mod confidence;
pub mod corpus;
pub mod error;
pub mod eval;
pub mod experiment;
pub mod personal;
pub mod policy;
pub mod predictor;
pub mod stream;

pub use error::{Error, Result};
