//! Accident-rate estimation by crude Monte Carlo and importance sampling with
//! a relative half-width stopping rule.

use std::io::Write;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::library::{check_support, cumulative, sample_cdf, Library};
use crate::rng;
use crate::space::{compensated_sum, ScenarioField, ScenarioIndex};

/// Standard normal quantile, Wichura's AS 241 (PPND16), relative error about 1e-16.
pub fn normal_quantile(p: f64) -> f64 {
    if !(p > 0.0 && p < 1.0) {
        return if p == 0.0 {
            f64::NEG_INFINITY
        } else if p == 1.0 {
            f64::INFINITY
        } else {
            f64::NAN
        };
    }
    let q = p - 0.5;
    if q.abs() <= 0.425 {
        let r = 0.180625 - q * q;
        return q
            * (((((((2509.0809287301226727 * r + 33430.575583588128105) * r
                + 67265.770927008700853)
                * r
                + 45921.953931549871457)
                * r
                + 13731.693765509461125)
                * r
                + 1971.5909503065514427)
                * r
                + 133.14166789178437745)
                * r
                + 3.387132872796366608)
            / (((((((5226.495278852545925 * r + 28729.085735721942674) * r
                + 39307.89580009271061)
                * r
                + 21213.794301586595867)
                * r
                + 5394.1960214247511077)
                * r
                + 687.1870074920579083)
                * r
                + 42.313330701600911252)
                * r
                + 1.0);
    }
    let mut r = if q < 0.0 { p } else { 1.0 - p };
    r = (-r.ln()).sqrt();
    let val = if r <= 5.0 {
        let r = r - 1.6;
        (((((((7.7454501427834140764e-4 * r + 0.0227238449892691845833) * r
            + 0.24178072517745061177)
            * r
            + 1.27045825245236838258)
            * r
            + 3.64784832476320460504)
            * r
            + 5.7694972214606914055)
            * r
            + 4.6303378461565452959)
            * r
            + 1.42343711074968357734)
            / (((((((1.05075007164441684324e-9 * r + 5.475938084995344946e-4) * r
                + 0.0151986665636164571966)
                * r
                + 0.14810397642748007459)
                * r
                + 0.68976733498510000455)
                * r
                + 1.6763848301838038494)
                * r
                + 2.05319162663775882187)
                * r
                + 1.0)
    } else {
        let r = r - 5.0;
        (((((((2.01033439929228813265e-7 * r + 2.71155556874348757815e-5) * r
            + 0.0012426609473880784386)
            * r
            + 0.026532189526576123093)
            * r
            + 0.29656057182850489123)
            * r
            + 1.7848265399172913358)
            * r
            + 5.4637849111641143699)
            * r
            + 6.6579046435011037772)
            / (((((((2.04426310338993978564e-15 * r + 1.4215117583164458887e-7) * r
                + 1.8463183175100546818e-5)
                * r
                + 7.868691311456132591e-4)
                * r
                + 0.0148753612908506148525)
                * r
                + 0.13692988092273580531)
                * r
                + 0.59983220655588793769)
                * r
                + 1.0)
    };
    if q < 0.0 {
        -val
    } else {
        val
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub alpha: f64,
    pub target_half_width: f64,
    pub max_tests: usize,
    /// Tests run before the stopping rule is checked.
    pub warmup: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            alpha: 0.05,
            target_half_width: 0.2,
            max_tests: 1_000_000,
            warmup: 10,
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return Err(Error::config("eval.alpha", "must lie in (0, 1)"));
        }
        if !(self.target_half_width > 0.0) {
            return Err(Error::config("eval.target_half_width", "must be positive"));
        }
        if self.max_tests == 0 {
            return Err(Error::config("eval.max_tests", "must be at least 1"));
        }
        Ok(())
    }

    pub fn z(&self) -> f64 {
        normal_quantile(1.0 - self.alpha / 2.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub n: usize,
    pub flat: usize,
    pub outcome: f64,
    pub weight: f64,
    pub mean: f64,
    /// Infinite while the half-width is undefined (mean zero or no tests).
    pub rel_half_width: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalTrace {
    pub records: Vec<EvalRecord>,
    pub mu_hat: f64,
    pub sample_variance: f64,
    pub n_used: usize,
    pub converged: bool,
    pub diagnostic: Option<String>,
}

impl EvalTrace {
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        let err = |e: csv::Error| Error::Numerical(format!("csv write failed: {e}"));
        w.write_record(["n", "flat", "outcome", "weight", "mean", "rel_half_width"])
            .map_err(err)?;
        for r in &self.records {
            w.write_record([
                r.n.to_string(),
                r.flat.to_string(),
                r.outcome.to_string(),
                r.weight.to_string(),
                r.mean.to_string(),
                r.rel_half_width.to_string(),
            ])
            .map_err(err)?;
        }
        w.flush()
            .map_err(|e| Error::Numerical(format!("csv flush failed: {e}")))?;
        Ok(())
    }
}

/// Single-pass mean and variance.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct Welford {
    n: usize,
    mean: f64,
    m2: f64,
}

impl Welford {
    pub fn push(&mut self, x: f64) {
        self.n += 1;
        let d = x - self.mean;
        self.mean += d / self.n as f64;
        self.m2 += d * (x - self.mean);
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn mean(&self) -> f64 {
        self.mean
    }

    /// Unbiased sample variance; zero below two samples.
    pub fn variance(&self) -> f64 {
        if self.n < 2 {
            0.0
        } else {
            (self.m2 / (self.n - 1) as f64).max(0.0)
        }
    }

    /// `z sqrt(s^2 / n) / mean`, or infinity when the mean is zero.
    pub fn rel_half_width(&self, z: f64) -> f64 {
        if self.n == 0 || self.mean == 0.0 {
            return f64::INFINITY;
        }
        z * (self.variance() / self.n as f64).sqrt() / self.mean.abs()
    }
}

/// Sequential importance-sampling estimate of `sum_x P(A|x) P(x)` with
/// samples from `q`. `outcome` returns the accident indicator of a cell.
pub fn evaluate_is<R, O>(
    q: &ScenarioField,
    p_x: &ScenarioField,
    mut outcome: O,
    cfg: &EvalConfig,
    record: bool,
    rng: &mut R,
) -> Result<EvalTrace>
where
    R: Rng + ?Sized,
    O: FnMut(ScenarioIndex) -> Result<f64>,
{
    cfg.validate()?;
    check_support(q, p_x)?;
    let cdf = cumulative(q.values());
    let space = *q.space();
    let z = cfg.z();
    let mut acc = Welford::default();
    let mut records = Vec::new();
    let mut converged = false;
    while acc.n() < cfg.max_tests {
        let flat = sample_cdf(&cdf, rng);
        let idx = space.from_flat(flat)?;
        let a = outcome(idx)?;
        let weight = if a == 0.0 { 0.0 } else { a * p_x.at(flat) / q.at(flat) };
        acc.push(weight);
        let rhw = acc.rel_half_width(z);
        if record {
            records.push(EvalRecord {
                n: acc.n(),
                flat,
                outcome: a,
                weight,
                mean: acc.mean(),
                rel_half_width: rhw,
            });
        }
        if acc.n() >= cfg.warmup.max(2) && acc.mean() > 0.0 && rhw <= cfg.target_half_width {
            converged = true;
            break;
        }
    }
    let diagnostic = if acc.mean() == 0.0 {
        Some(format!(
            "no accident observed in {} tests; relative half-width undefined",
            acc.n()
        ))
    } else if !converged {
        Some(format!("target half-width not reached within {} tests", cfg.max_tests))
    } else {
        None
    };
    Ok(EvalTrace {
        records,
        mu_hat: acc.mean(),
        sample_variance: acc.variance(),
        n_used: acc.n(),
        converged,
        diagnostic,
    })
}

/// Crude Monte Carlo: sampling from the exposure itself, every weight is the
/// raw indicator.
pub fn evaluate_crude<R, O>(
    p_x: &ScenarioField,
    outcome: O,
    cfg: &EvalConfig,
    record: bool,
    rng: &mut R,
) -> Result<EvalTrace>
where
    R: Rng + ?Sized,
    O: FnMut(ScenarioIndex) -> Result<f64>,
{
    evaluate_is(p_x, p_x, outcome, cfg, record, rng)
}

/// `sum (P(A|x) P(x))^2 / q(x) - mu^2`.
pub fn theoretical_variance(q: &ScenarioField, p_a: &ScenarioField, p_x: &ScenarioField) -> Result<f64> {
    q.ensure_same_space(p_a)?;
    q.ensure_same_space(p_x)?;
    let mut terms = Vec::with_capacity(q.len());
    let mut nums = Vec::with_capacity(q.len());
    for flat in 0..q.len() {
        let num = p_a.at(flat) * p_x.at(flat);
        if num == 0.0 {
            continue;
        }
        if !(q.at(flat) > 0.0) {
            return Err(Error::Support { flat });
        }
        terms.push(num * num / q.at(flat));
        nums.push(num);
    }
    let mu = compensated_sum(nums);
    Ok(compensated_sum(terms) - mu * mu)
}

/// Smallest `n` with `n >= (z / (mu beta))^2 sigma2`.
pub fn min_tests(sigma2: f64, mu: f64, cfg: &EvalConfig) -> Result<u64> {
    if !(mu > 0.0) {
        return Err(Error::Undefined("required tests need a positive accident rate".into()));
    }
    if !(sigma2 >= 0.0) {
        return Err(Error::Numerical("variance must be non-negative".into()));
    }
    let k = cfg.z() / (mu * cfg.target_half_width);
    Ok((k * k * sigma2).ceil() as u64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodSummary {
    pub mean: f64,
    pub std: f64,
    pub per_replication: Vec<f64>,
    pub unconverged: usize,
}

impl MethodSummary {
    pub fn from_values(values: Vec<f64>, unconverged: usize) -> Self {
        let mut w = Welford::default();
        for v in &values {
            w.push(*v);
        }
        MethodSummary {
            mean: w.mean(),
            std: w.variance().sqrt(),
            per_replication: values,
            unconverged,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompareReport {
    pub alpha: f64,
    pub target_half_width: f64,
    pub n_reps: usize,
    pub mu_true: f64,
    /// Required crude tests from the Bernoulli variance, not from simulation.
    pub crude_analytic: f64,
    pub crude_empirical: Option<MethodSummary>,
    pub offline: MethodSummary,
    pub offline_estimates: Vec<f64>,
    /// Adaptive-phase tests plus evaluation tests with the customized library.
    pub adaptive_total: MethodSummary,
    pub adaptive_estimates: Vec<f64>,
    pub adaptive_phase_tests: Vec<usize>,
    pub accel_crude_vs_offline: f64,
    pub accel_offline_vs_adaptive: f64,
    pub accel_crude_vs_adaptive: f64,
}

/// One customized library per replication, with the number of tests its
/// adaptive phase consumed.
#[derive(Debug, Clone)]
pub struct AdaptiveRun<'a> {
    pub library: &'a Library,
    pub tests: usize,
}

/// Replicates offline-library and customized-library evaluation `n_reps`
/// times against cached ground-truth outcomes `p_a`.
///
/// With a single adaptive run it is reused by every replication; otherwise
/// replication `k` uses run `k`.
#[allow(clippy::too_many_arguments)]
pub fn compare_methods(
    p_x: &ScenarioField,
    p_a: &ScenarioField,
    offline: &Library,
    adaptive: &[AdaptiveRun<'_>],
    cfg: &EvalConfig,
    n_reps: usize,
    crude_reps: usize,
    master_seed: u64,
) -> Result<CompareReport> {
    cfg.validate()?;
    if n_reps == 0 {
        return Err(Error::config("compare.reps", "must be at least 1"));
    }
    if adaptive.is_empty() || (adaptive.len() != 1 && adaptive.len() < n_reps) {
        return Err(Error::config(
            "compare.reps",
            "need one adaptive run or one per replication",
        ));
    }
    offline.check_support(p_x)?;
    for run in adaptive {
        run.library.check_support(p_x)?;
    }
    let mu_true = compensated_sum(p_a.values().iter().zip(p_x.values()).map(|(a, p)| a * p));
    let bern = mu_true * (1.0 - mu_true);
    let crude_analytic = min_tests(bern, mu_true, cfg)? as f64;
    let outcome = |idx: ScenarioIndex| Ok(p_a.get(idx));

    let offline_traces: Vec<EvalTrace> = (0..n_reps)
        .into_par_iter()
        .map(|k| {
            let mut r = rng::replication(master_seed, "eval.offline", k);
            evaluate_is(&offline.q, p_x, outcome, cfg, false, &mut r)
        })
        .collect::<Result<_>>()?;
    let adaptive_traces: Vec<(EvalTrace, usize)> = (0..n_reps)
        .into_par_iter()
        .map(|k| {
            let run = if adaptive.len() == 1 { &adaptive[0] } else { &adaptive[k] };
            let mut r = rng::replication(master_seed, "eval.adaptive", k);
            evaluate_is(&run.library.q, p_x, outcome, cfg, false, &mut r).map(|t| (t, run.tests))
        })
        .collect::<Result<_>>()?;
    let crude_empirical = if crude_reps > 0 {
        let traces: Vec<EvalTrace> = (0..crude_reps)
            .into_par_iter()
            .map(|k| {
                let mut r = rng::replication(master_seed, "eval.crude", k);
                evaluate_crude(p_x, outcome, cfg, false, &mut r)
            })
            .collect::<Result<_>>()?;
        Some(MethodSummary::from_values(
            traces.iter().map(|t| t.n_used as f64).collect(),
            traces.iter().filter(|t| !t.converged).count(),
        ))
    } else {
        None
    };

    let offline_sum = MethodSummary::from_values(
        offline_traces.iter().map(|t| t.n_used as f64).collect(),
        offline_traces.iter().filter(|t| !t.converged).count(),
    );
    let adaptive_sum = MethodSummary::from_values(
        adaptive_traces
            .iter()
            .map(|(t, a)| (t.n_used + a) as f64)
            .collect(),
        adaptive_traces.iter().filter(|(t, _)| !t.converged).count(),
    );
    let crude_n = crude_empirical.as_ref().map_or(crude_analytic, |c| c.mean);
    Ok(CompareReport {
        alpha: cfg.alpha,
        target_half_width: cfg.target_half_width,
        n_reps,
        mu_true,
        crude_analytic,
        crude_empirical,
        accel_crude_vs_offline: crude_n / offline_sum.mean,
        accel_offline_vs_adaptive: offline_sum.mean / adaptive_sum.mean,
        accel_crude_vs_adaptive: crude_n / adaptive_sum.mean,
        offline_estimates: offline_traces.iter().map(|t| t.mu_hat).collect(),
        adaptive_estimates: adaptive_traces.iter().map(|(t, _)| t.mu_hat).collect(),
        adaptive_phase_tests: adaptive_traces.iter().map(|(_, a)| *a).collect(),
        offline: offline_sum,
        adaptive_total: adaptive_sum,
    })
}
