//! Online peer-to-peer ridesharing optimisation engine.
//!
//! Per-step candidate generation, weighted set packing and look-ahead
//! commitment over a stream of ride requests, with pluggable request
//! predictors (perfect, previous-day replay, LSTM) to study whether
//! forecasting demand improves the total reward.

pub mod city;
pub mod engine;
pub mod ingest;
pub mod lstm;
pub mod predictor;
pub mod rng;
pub mod solver;
pub mod model;
pub mod scalar;

pub use scalar::Scalar;

/// Concrete `f64` instantiations used by the binaries and most tests.
pub type ZoneMap64 = city::ZoneMap<f64>;
pub type RewardWeights64 = model::RewardWeights<f64>;
pub type SimConfig64 = engine::SimConfig<f64>;
pub type RunReport64 = engine::RunReport<f64>;
pub type LstmParams64 = lstm::LstmParams<f64>;
