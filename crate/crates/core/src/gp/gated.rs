//! Classification-gated regression: one GP per class, blended by the
//! classifier's class probability.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::classification::{gpc_fit, GpcPosterior};
use super::kernel::ArdSeKernel;
use super::regression::{gpr_fit, GpPosterior};
use super::{FitOptions, HyperStart};
use crate::error::{Error, Result};
use crate::space::{ScenarioField, ScenarioSpace};

#[derive(Debug, Clone, PartialEq)]
pub struct GatedOptions {
    pub gpr: FitOptions,
    pub gpc: FitOptions,
}

impl GatedOptions {
    pub fn for_space(space: &ScenarioSpace) -> Self {
        GatedOptions {
            gpr: FitOptions::for_space(space),
            gpc: FitOptions::gpc_for_space(space),
        }
    }
}

/// Hyperparameters of the three component models, used to warm-start the
/// next fit.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct GatedHypers {
    pub sub: Option<ArdSeKernel>,
    pub opt: Option<ArdSeKernel>,
    pub gpc: Option<ArdSeKernel>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GatedPosterior {
    pub gpc: GpcPosterior,
    /// Class-1 probability used for blending: the classifier's prediction,
    /// replaced by the observed class on tested cells.
    pub gate: ScenarioField,
    /// Regressor of the suboptimal class (`f != 0`).
    pub gp_sub: GpPosterior,
    /// Regressor of the optimal class (`f == 0`).
    pub gp_opt: GpPosterior,
    pub mean: ScenarioField,
}

impl GatedPosterior {
    pub fn hypers(&self) -> GatedHypers {
        GatedHypers {
            sub: (self.gp_sub.n_train > 0).then_some(self.gp_sub.kernel),
            opt: (self.gp_opt.n_train > 0).then_some(self.gp_opt.kernel),
            gpc: (!self.gpc.degenerate).then_some(self.gpc.kernel),
        }
    }

    pub fn p_class1(&self) -> &ScenarioField {
        &self.gate
    }
}

/// `p1 m_sub + (1 - p1) m_opt`, cell by cell.
pub fn blend(p1: &ScenarioField, m_sub: &ScenarioField, m_opt: &ScenarioField) -> Result<ScenarioField> {
    p1.ensure_same_space(m_sub)?;
    p1.ensure_same_space(m_opt)?;
    let values = p1
        .values()
        .iter()
        .zip(m_sub.values().iter().zip(m_opt.values()))
        .map(|(&p, (&a, &b))| p * a + (1.0 - p) * b)
        .collect();
    ScenarioField::new(*p1.space(), values)
}

fn start(warm: Option<ArdSeKernel>) -> HyperStart {
    match warm {
        Some(k) => HyperStart::Warm(k),
        None => HyperStart::Cold,
    }
}

/// Labels observations `+1` where `f != 0`, fits the classifier and one
/// regressor per class, and blends the class means.
pub fn gated_fit<R: Rng + ?Sized>(
    space: &ScenarioSpace,
    inputs: &[[f64; 2]],
    values: &[f64],
    opts: &GatedOptions,
    warm: Option<&GatedHypers>,
    rng: &mut R,
) -> Result<GatedPosterior> {
    if inputs.is_empty() {
        return Err(Error::EmptyData("gated fit needs at least one observation".into()));
    }
    if inputs.len() != values.len() {
        return Err(Error::Shape(format!(
            "{} inputs, {} values",
            inputs.len(),
            values.len()
        )));
    }
    let warm = warm.copied().unwrap_or_default();
    let labels: Vec<f64> = values.iter().map(|&f| if f != 0.0 { 1.0 } else { -1.0 }).collect();
    let gpc = gpc_fit(space, inputs, &labels, &opts.gpc, start(warm.gpc), rng)?;

    let split = |want_sub: bool| -> (Vec<[f64; 2]>, Vec<f64>) {
        inputs
            .iter()
            .zip(values)
            .filter(|(_, &f)| (f != 0.0) == want_sub)
            .map(|(x, &f)| (*x, f))
            .unzip()
    };
    let fit_class = |x: Vec<[f64; 2]>, y: Vec<f64>, warm: Option<ArdSeKernel>, rng: &mut R| {
        if x.is_empty() {
            Ok(GpPosterior::prior(*space, ArdSeKernel::default()))
        } else {
            gpr_fit(space, &x, &y, &opts.gpr, start(warm), rng)
        }
    };
    let (xs, ys) = split(true);
    let gp_sub = fit_class(xs, ys, warm.sub, rng)?;
    let (xo, yo) = split(false);
    let gp_opt = fit_class(xo, yo, warm.opt, rng)?;
    let mut gate = gpc.p_class1.clone();
    for (x, &f) in inputs.iter().zip(values) {
        if let Some(idx) = space.bin(x[0], x[1]) {
            gate.values_mut()[idx.flat] = if f != 0.0 { 1.0 } else { 0.0 };
        }
    }
    let mean = blend(&gate, &gp_sub.mean, &gp_opt.mean)?;
    Ok(GatedPosterior {
        gpc,
        gate,
        gp_sub,
        gp_opt,
        mean,
    })
}
