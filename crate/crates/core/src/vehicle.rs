//! Cut-in episode simulation with pluggable car-following policies.
//!
//! Range rate follows `Rdot = v_lead - v_self`, so negative values close the gap.

use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::space::{ScenarioField, ScenarioSpace};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Limits {
    pub v_min: f64,
    pub v_max: f64,
    pub a_min: f64,
    pub a_max: f64,
}

impl Default for Limits {
    fn default() -> Self {
        Limits {
            v_min: 2.0,
            v_max: 40.0,
            a_min: -4.0,
            a_max: 2.0,
        }
    }
}

impl Limits {
    pub fn clamp_accel(&self, u: f64) -> f64 {
        u.clamp(self.a_min, self.a_max)
    }

    pub fn validate(&self, section: &str) -> Result<()> {
        if !(self.v_min < self.v_max) {
            return Err(Error::config(format!("{section}.v_max"), "must exceed v_min"));
        }
        if !(self.a_min < 0.0 && self.a_max > 0.0) {
            return Err(Error::config(
                format!("{section}.a_min"),
                "need a_min < 0 < a_max",
            ));
        }
        Ok(())
    }
}

pub trait CarFollowingPolicy: Send + Sync {
    /// Commanded acceleration, already clamped to the policy's limits.
    fn accel(&self, range: f64, range_rate: f64, v_self: f64) -> f64;

    fn limits(&self) -> Limits;
}

/// Which quantity enters the speed-difference term of the FVDM formula.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum SpeedDifference {
    /// `v_self - v_lead`, positive while closing in.
    #[default]
    Closing,
    /// The range rate as is.
    RangeRate,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FvdmParams {
    pub c0: f64,
    pub v1: f64,
    pub v2: f64,
    pub c1: f64,
    pub l: f64,
    pub c2: f64,
    #[serde(default)]
    pub speed_difference: SpeedDifference,
    #[serde(default)]
    pub limits: Limits,
}

impl Default for FvdmParams {
    fn default() -> Self {
        FvdmParams {
            c0: 0.85,
            v1: 6.75,
            v2: 7.91,
            c1: 0.13,
            l: 5.0,
            c2: 1.57,
            limits: Limits::default(),
            speed_difference: SpeedDifference::Closing,
        }
    }
}

impl FvdmParams {
    pub fn validate(&self) -> Result<()> {
        self.limits.validate("vehicle.fvdm")
    }
}

/// `C0 [V1 + V2 tanh(C1 (R - L) - C2) - dv]` before clamping.
pub fn fvdm_raw(p: &FvdmParams, range: f64, dv: f64) -> f64 {
    p.c0 * (p.v1 + p.v2 * (p.c1 * (range - p.l) - p.c2).tanh() - dv)
}

/// FVDM acceleration for gap `range` and speed-difference term `dv`, clamped
/// to the acceleration limits. `v_self` only matters through the limits
/// applied by the simulator.
pub fn fvdm_accel(p: &FvdmParams, range: f64, dv: f64, _v_self: f64) -> f64 {
    p.limits.clamp_accel(fvdm_raw(p, range, dv))
}

impl CarFollowingPolicy for FvdmParams {
    fn accel(&self, range: f64, range_rate: f64, v_self: f64) -> f64 {
        let dv = match self.speed_difference {
            SpeedDifference::Closing => -range_rate,
            SpeedDifference::RangeRate => range_rate,
        };
        fvdm_accel(self, range, dv, v_self)
    }

    fn limits(&self) -> Limits {
        self.limits
    }
}

/// Gap-keeping cruise control with a time-to-collision emergency brake.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AccAebParams {
    pub time_headway: f64,
    pub standstill_gap: f64,
    pub k_gap: f64,
    pub k_rate: f64,
    pub ttc_brake: f64,
    #[serde(default)]
    pub limits: Limits,
}

impl Default for AccAebParams {
    fn default() -> Self {
        AccAebParams {
            time_headway: 1.2,
            standstill_gap: 2.0,
            k_gap: 0.23,
            k_rate: 0.74,
            ttc_brake: 2.0,
            limits: Limits::default(),
        }
    }
}

const TTC_EPS: f64 = 1e-9;

impl AccAebParams {
    pub fn validate(&self) -> Result<()> {
        self.limits.validate("vehicle.acc_aeb")?;
        for (name, v) in [
            ("ttc_brake", self.ttc_brake),
            ("k_gap", self.k_gap),
            ("k_rate", self.k_rate),
        ] {
            if !(v > 0.0) {
                return Err(Error::config(format!("vehicle.acc_aeb.{name}"), "must be positive"));
            }
        }
        if !(self.time_headway >= 0.0 && self.standstill_gap >= 0.0) {
            return Err(Error::config(
                "vehicle.acc_aeb.time_headway",
                "headway and standstill gap must be non-negative",
            ));
        }
        Ok(())
    }
}

pub fn acc_aeb_accel(p: &AccAebParams, range: f64, range_rate: f64, v_self: f64) -> f64 {
    if v_self > 0.0 && range_rate < 0.0 && range / (-range_rate).max(TTC_EPS) < p.ttc_brake {
        return p.limits.a_min;
    }
    p.limits.clamp_accel(
        p.k_gap * (range - p.standstill_gap - p.time_headway * v_self) + p.k_rate * range_rate,
    )
}

impl CarFollowingPolicy for AccAebParams {
    fn accel(&self, range: f64, range_rate: f64, v_self: f64) -> f64 {
        acc_aeb_accel(self, range, range_rate, v_self)
    }

    fn limits(&self) -> Limits {
        self.limits
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EpisodeConfig {
    pub dt: f64,
    pub horizon: f64,
    pub v_cav0: f64,
    pub d_min: f64,
}

impl Default for EpisodeConfig {
    fn default() -> Self {
        EpisodeConfig {
            dt: 0.1,
            horizon: 10.0,
            v_cav0: 30.0,
            d_min: 1.0,
        }
    }
}

impl EpisodeConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.dt > 0.0) {
            return Err(Error::config("vehicle.episode.dt", "must be positive"));
        }
        if !(self.horizon >= self.dt) {
            return Err(Error::config("vehicle.episode.horizon", "must be at least dt"));
        }
        if !(self.d_min > 0.0) {
            return Err(Error::config("vehicle.episode.d_min", "must be positive"));
        }
        if !(self.v_cav0.is_finite() && self.v_cav0 >= 0.0) {
            return Err(Error::config("vehicle.episode.v_cav0", "must be non-negative"));
        }
        Ok(())
    }

    pub fn steps(&self) -> usize {
        (self.horizon / self.dt).round() as usize
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TraceSample {
    pub t: f64,
    pub range: f64,
    pub range_rate: f64,
    pub v_cav: f64,
    pub u: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpisodeResult {
    pub accident: bool,
    pub min_distance: f64,
    pub trajectory: Option<Vec<TraceSample>>,
}

/// Runs one cut-in from initial gap `r0` and range rate `rdot0`.
///
/// The lead vehicle keeps the speed `v_cav0 + rdot0`. Each step applies the
/// policy, advances the gap with the current range rate, then updates the
/// follower speed within its limits.
pub fn simulate_cutin(
    policy: &dyn CarFollowingPolicy,
    r0: f64,
    rdot0: f64,
    cfg: &EpisodeConfig,
    record: bool,
) -> Result<EpisodeResult> {
    if !(r0 > 0.0 && r0.is_finite()) {
        return Err(Error::config("range", format!("initial range must be positive, got {r0}")));
    }
    if !rdot0.is_finite() {
        return Err(Error::config("range_rate", "initial range rate must be finite"));
    }
    let lim = policy.limits();
    let v_bv = cfg.v_cav0 + rdot0;
    let mut r = r0;
    let mut v = cfg.v_cav0;
    let mut rdot = rdot0;
    let mut min_d = r0;
    let mut trace = record.then(Vec::new);
    for k in 0..cfg.steps() {
        let u = policy.accel(r, rdot, v);
        if let Some(tr) = trace.as_mut() {
            tr.push(TraceSample {
                t: k as f64 * cfg.dt,
                range: r,
                range_rate: rdot,
                v_cav: v,
                u,
            });
        }
        r += rdot * cfg.dt;
        v = (v + u * cfg.dt).clamp(lim.v_min, lim.v_max);
        rdot = v_bv - v;
        min_d = min_d.min(r);
    }
    if let Some(tr) = trace.as_mut() {
        tr.push(TraceSample {
            t: cfg.steps() as f64 * cfg.dt,
            range: r,
            range_rate: rdot,
            v_cav: v,
            u: policy.accel(r, rdot, v),
        });
    }
    Ok(EpisodeResult {
        accident: min_d < cfg.d_min,
        min_distance: min_d,
        trajectory: trace,
    })
}

pub fn write_trace_csv<W: Write>(trace: &[TraceSample], writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    let err = |e: csv::Error| Error::Numerical(format!("csv write failed: {e}"));
    w.write_record(["t", "R", "Rdot", "v_cav", "u"]).map_err(err)?;
    for s in trace {
        w.write_record([
            s.t.to_string(),
            s.range.to_string(),
            s.range_rate.to_string(),
            s.v_cav.to_string(),
            s.u.to_string(),
        ])
        .map_err(err)?;
    }
    w.flush()
        .map_err(|e| Error::Numerical(format!("csv flush failed: {e}")))?;
    Ok(())
}

/// Accident indicator (0 or 1) of every cell center.
pub fn outcome_field(
    policy: &dyn CarFollowingPolicy,
    space: &ScenarioSpace,
    cfg: &EpisodeConfig,
) -> Result<ScenarioField> {
    let values = (0..space.n_total())
        .into_par_iter()
        .map(|flat| {
            let (r, d) = space.scenario_of_flat(flat)?;
            let res = simulate_cutin(policy, r, d, cfg, false)?;
            Ok(if res.accident { 1.0 } else { 0.0 })
        })
        .collect::<Result<Vec<f64>>>()?;
    ScenarioField::new(*space, values)
}

/// Cells where enlarging the initial range at fixed range rate turns a safe
/// episode into an accident. Empty for well-behaved policies.
pub fn monotonicity_violations(outcome: &ScenarioField) -> Vec<usize> {
    let s = outcome.space();
    let mut bad = Vec::new();
    for i_rdot in 0..s.n_rdot() {
        for i_r in 1..s.n_r() {
            let lo = i_r - 1;
            let a = outcome.at(lo * s.n_rdot() + i_rdot);
            let b = outcome.at(i_r * s.n_rdot() + i_rdot);
            if a == 0.0 && b == 1.0 {
                bad.push(i_r * s.n_rdot() + i_rdot);
            }
        }
    }
    bad
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::space::GridConfig;

    #[test]
    fn fvdm_saturates_at_inflection() {
        let p = FvdmParams::default();
        let r = p.l + p.c2 / p.c1;
        assert!((fvdm_raw(&p, r, 0.0) - 5.7375).abs() < 1e-12);
        assert_eq!(fvdm_accel(&p, r, 0.0, 12.0), 2.0);
    }

    #[test]
    fn fvdm_brakes_hard_on_large_speed_difference() {
        let p = FvdmParams::default();
        assert!(fvdm_raw(&p, 5.0, 10.0) < -4.0);
        assert_eq!(fvdm_accel(&p, 5.0, 10.0, 30.0), -4.0);
        // closing at 10 m/s from 5 m: the policy sees dv = +10
        assert_eq!(p.accel(5.0, -10.0, 30.0), -4.0);
    }

    #[test]
    fn acc_examples() {
        let p = AccAebParams::default();
        assert_eq!(acc_aeb_accel(&p, 100.0, 0.0, 30.0), 2.0);
        assert_eq!(acc_aeb_accel(&p, 5.0, -10.0, 30.0), -4.0);
        let eq = p.standstill_gap + p.time_headway * 25.0;
        assert!(acc_aeb_accel(&p, eq, 0.0, 25.0).abs() < 1e-12);
    }

    #[test]
    fn opening_gap_is_safe() {
        let cfg = EpisodeConfig::default();
        for pol in [&FvdmParams::default() as &dyn CarFollowingPolicy, &AccAebParams::default()] {
            let res = simulate_cutin(pol, 90.0, 10.0, &cfg, false).unwrap();
            assert!(!res.accident);
        }
    }

    #[test]
    fn close_fast_cut_in_crashes_fvdm() {
        let res = simulate_cutin(&FvdmParams::default(), 2.0, -20.0, &EpisodeConfig::default(), false)
            .unwrap();
        assert!(res.accident);
        assert!(res.min_distance < 1.0);
    }

    #[test]
    fn non_positive_range_rejected() {
        assert!(matches!(
            simulate_cutin(&FvdmParams::default(), 0.0, 0.0, &EpisodeConfig::default(), false),
            Err(Error::Config { .. })
        ));
    }

    #[test]
    fn trace_respects_limits_and_matches_result() {
        let cfg = EpisodeConfig::default();
        let p = AccAebParams::default();
        let res = simulate_cutin(&p, 20.0, -8.0, &cfg, true).unwrap();
        let tr = res.trajectory.as_ref().unwrap();
        assert_eq!(tr.len(), cfg.steps() + 1);
        assert!(tr.iter().all(|s| s.v_cav >= 2.0 && s.v_cav <= 40.0));
        assert!(tr.iter().all(|s| s.u >= -4.0 && s.u <= 2.0));
        let min_r = tr.iter().map(|s| s.range).fold(f64::INFINITY, f64::min);
        assert_eq!(min_r, res.min_distance);
        let again = simulate_cutin(&p, 20.0, -8.0, &cfg, true).unwrap();
        assert_eq!(res, again);
    }

    #[test]
    fn acc_crashes_are_a_strict_subset_of_fvdm_crashes() {
        let space = ScenarioSpace::new(&GridConfig::default()).unwrap();
        let cfg = EpisodeConfig::default();
        let f = outcome_field(&FvdmParams::default(), &space, &cfg).unwrap();
        let a = outcome_field(&AccAebParams::default(), &space, &cfg).unwrap();
        let nf = f.values().iter().filter(|v| **v == 1.0).count();
        let na = a.values().iter().filter(|v| **v == 1.0).count();
        assert!(f.values().iter().zip(a.values()).all(|(x, y)| *y <= *x));
        assert!(na > 0 && na < nf);
    }

    #[test]
    fn acc_outcome_is_monotone_in_range() {
        let space = ScenarioSpace::new(&GridConfig::default()).unwrap();
        let cfg = EpisodeConfig::default();
        let a = outcome_field(&AccAebParams::default(), &space, &cfg).unwrap();
        assert!(monotonicity_violations(&a).is_empty());
        // the surrogate is not: its tanh term can close a larger gap harder
        let f = outcome_field(&FvdmParams::default(), &space, &cfg).unwrap();
        assert!(!monotonicity_violations(&f).is_empty());
    }
}
