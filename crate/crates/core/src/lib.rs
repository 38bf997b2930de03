//! Adaptive testing-scenario library generation for black-box vehicle models.
//!
//! The crate covers a two-parameter cut-in scenario grid, a naturalistic
//! exposure model, a car-following simulator, offline library construction,
//! Gaussian-process learning of the gap between a surrogate driver and the
//! vehicle under test, and importance-sampling evaluation of the accident rate.

pub mod adaptive;
pub mod config;
pub mod error;
pub mod evaluator;
pub mod exposure;
pub mod gp;
pub mod library;
pub mod pipeline;
pub mod rng;
pub mod space;
pub mod vehicle;

pub use error::{Error, Result};
pub use space::{GridConfig, ScenarioField, ScenarioIndex, ScenarioSpace};
