//! Risk-aware parallel Bayesian optimization of crop management decisions.
//!
//! Decisions live on a discrete grid ([`domain::DecisionSpace`]). Each
//! candidate is simulated under a set of weather scenarios
//! ([`scenario::build_scenarios`]) and the per-scenario yields are reduced to
//! one objective with conditional value-at-risk ([`risk::cvar`]). Several
//! Gaussian-process models with different kernels and acquisition functions
//! share one dataset and propose points in turn ([`pbo::run`]).

pub mod acquisition;
pub mod domain;
pub mod error;
pub mod gp;
pub mod pbo;
pub mod risk;
pub mod scenario;
pub mod seed;
pub mod simulator;
pub mod weather;

pub use domain::{
    Dataset, DecisionSpace, DecisionVector, EvaluationRecord, Scenario, ScenarioSet, VariableSpec, WeatherDay,
};
pub use error::{Error, EvalError, Result};
pub use pbo::{PboConfig, PboResult, RunManifest, SharingMode};
pub use risk::{cvar, RiskLevel, RiskSpec};
pub use simulator::Evaluator;
