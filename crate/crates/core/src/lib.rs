//! Federated-learning robustness simulator.
//!
//! The crate wires together a small dense-network learner, non-IID
//! synthetic data, a set of robust aggregation rules, a family of model
//! poisoning attacks centered on a multi-round-consistent attack, and
//! detection-oriented countermeasures, all under deterministic
//! counter-based randomness.

pub mod aggregation;
pub mod attack;
pub mod config;
pub mod data;
pub mod learner;
pub mod param;
pub mod report;
pub mod rng;
pub mod simulator;
pub mod tailored;
