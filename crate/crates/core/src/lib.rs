//! Digital-twin engine for semiconductor lifecycle security.
//!
//! The crate bundles the probabilistic models (Bayesian networks, hidden
//! Markov models, Markov logic networks), a lifecycle data simulator with
//! attack injection, anomaly detectors, and the trust engine that ties them
//! into root-cause analysis.

pub mod bn;
pub mod hmm;
pub mod mln;
pub mod sim;
pub mod anomaly;
pub mod trust;

pub use anomaly::{EvidenceItem, EvidenceVector};
pub use sim::{Actor, AttackLabel, DeviceRecord, Fleet, StageId, TestRecordSet};
pub use trust::{Engine, ErrorClass, RankedCause, RootCauseReport, ThreatModel, TrustError};
