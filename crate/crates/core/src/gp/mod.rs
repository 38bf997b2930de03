//! Gaussian-process regression and classification on the scenario grid.

pub mod classification;
pub mod gated;
pub mod kernel;
pub mod linalg;
pub mod optimize;
pub mod regression;

pub use classification::{gpc_fit, laplace_log_marginal, Gpc, GpcPosterior};
pub use gated::{blend, gated_fit, GatedHypers, GatedOptions, GatedPosterior};
pub use kernel::ArdSeKernel;
pub use optimize::{AscentOptions, Bounds};
pub use regression::{gpr_fit, log_marginal_likelihood, GpPosterior, Gpr};

use crate::space::ScenarioSpace;

/// How a fit chooses its kernel hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum HyperStart {
    /// Initial guess plus random restarts.
    Cold,
    /// A single short ascent from previously fitted values.
    Warm(ArdSeKernel),
    /// No fitting.
    Fixed(ArdSeKernel),
}

#[derive(Debug, Clone, PartialEq)]
pub struct FitOptions {
    /// Diagonal jitter added to the Gram matrix before factorization.
    pub jitter: f64,
    pub restarts: usize,
    pub ascent: AscentOptions,
    pub warm_ascent: AscentOptions,
    pub init: ArdSeKernel,
    /// Box in log-hyperparameter space.
    pub bounds: Bounds,
}

impl FitOptions {
    /// Length scales between half a grid step and ten grid extents per axis.
    pub fn with_sigma_bounds(space: &ScenarioSpace, sigma_lo: f64, sigma_hi: f64) -> Self {
        let steps = space.steps();
        let ext = space.extent();
        FitOptions {
            jitter: 1e-6,
            restarts: 5,
            ascent: AscentOptions::default(),
            warm_ascent: AscentOptions {
                max_iter: 15,
                tol: 1e-6,
            },
            init: ArdSeKernel::default(),
            bounds: Bounds {
                lo: [sigma_lo.ln(), (0.5 * steps[0]).ln(), (0.5 * steps[1]).ln()],
                hi: [sigma_hi.ln(), (10.0 * ext[0]).ln(), (10.0 * ext[1]).ln()],
            },
        }
    }

    pub fn for_space(space: &ScenarioSpace) -> Self {
        Self::with_sigma_bounds(space, 1e-3, 10.0)
    }

    pub fn gpc_for_space(space: &ScenarioSpace) -> Self {
        Self::with_sigma_bounds(space, 1e-2, 20.0)
    }
}
