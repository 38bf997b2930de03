//! Adaptive customization of the offline library to a specific vehicle under
//! test: learn where it disagrees with the surrogate, correct the surrogate,
//! and rebuild the library.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gp::{gated_fit, GatedHypers, GatedOptions, GatedPosterior, GpcPosterior};
use crate::library::{build_library, criticality, cumulative, sample_cdf, uniform_library, Library, OfflineArtifacts};
use crate::rng;
use crate::space::{ScenarioField, ScenarioIndex};
use crate::vehicle::{simulate_cutin, CarFollowingPolicy, EpisodeConfig};

/// Classification uncertainty used by the acquisition.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClassVariance {
    /// Predictive variance of the latent function.
    Latent,
    /// `p (1 - p)` of the predicted class probability.
    #[default]
    Bernoulli,
}

impl ClassVariance {
    pub fn field(self, gpc: &GpcPosterior) -> ScenarioField {
        match self {
            ClassVariance::Latent => gpc.latent_var.clone(),
            ClassVariance::Bernoulli => gpc.p_class1.map(|p| p * (1.0 - p)),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdaptiveConfig {
    pub n_initial: usize,
    pub n_adaptive: usize,
    /// Probability that an initial draw comes from outside the library.
    pub gamma: f64,
    /// Class-probability threshold below which a surrogate-safe cell is pinned safe.
    pub p_th: f64,
    pub w_acq: f64,
    pub class_variance: ClassVariance,
    /// Probability of a random pick among pinned-safe cells.
    pub beta_explore: f64,
    pub epsilon: f64,
    /// Stop once the importance function changes by less than
    /// `early_stop_tol` (total variation) for `early_stop_window` iterations.
    pub early_stop: bool,
    pub early_stop_tol: f64,
    pub early_stop_window: usize,
}

impl Default for AdaptiveConfig {
    fn default() -> Self {
        AdaptiveConfig {
            n_initial: 50,
            n_adaptive: 50,
            gamma: 0.5,
            p_th: 0.7,
            w_acq: 0.5,
            class_variance: ClassVariance::default(),
            beta_explore: 0.05,
            epsilon: 0.1,
            early_stop: false,
            early_stop_tol: 1e-4,
            early_stop_window: 5,
        }
    }
}

impl AdaptiveConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v, lo_open) in [
            ("gamma", self.gamma, false),
            ("p_th", self.p_th, true),
            ("beta_explore", self.beta_explore, false),
            ("epsilon", self.epsilon, true),
        ] {
            let ok = if lo_open { v > 0.0 && v < 1.0 } else { (0.0..=1.0).contains(&v) };
            if !ok {
                return Err(Error::config(format!("adaptive.{name}"), "must be a probability"));
            }
        }
        if self.n_initial == 0 {
            return Err(Error::config("adaptive.n_initial", "must be at least 1"));
        }
        if !(self.w_acq >= 0.0 && self.w_acq.is_finite()) {
            return Err(Error::config("adaptive.w_acq", "must be non-negative"));
        }
        if self.early_stop && self.early_stop_window == 0 {
            return Err(Error::config("adaptive.early_stop_window", "must be at least 1"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Observation {
    /// 0 for initial tests, otherwise the adaptive iteration that selected it.
    pub iter: usize,
    pub flat: usize,
    pub r: f64,
    pub rdot: f64,
    pub f: f64,
}

/// `P(A|x) - P(S|x)` for binary outcomes.
pub fn observe_dissimilarity(cav: f64, sm: f64) -> f64 {
    cav - sm
}

/// Draws `n_initial` distinct cells: from the library proportionally to
/// criticality with probability `1 - gamma`, otherwise uniformly outside it.
pub fn sample_initial<R: Rng + ?Sized>(
    lib: &Library,
    cfg: &AdaptiveConfig,
    rng: &mut R,
) -> Result<Vec<ScenarioIndex>> {
    let space = *lib.space();
    let n = space.n_total();
    if cfg.n_initial > n {
        return Err(Error::config(
            "adaptive.n_initial",
            format!("{} exceeds the {} grid cells", cfg.n_initial, n),
        ));
    }
    let phi_w: Vec<f64> = lib
        .v
        .values()
        .iter()
        .zip(&lib.in_phi)
        .map(|(&v, &m)| if m { v } else { 0.0 })
        .collect();
    let mut outside: Vec<usize> = (0..n).filter(|&k| !lib.in_phi[k]).collect();
    let mut inside_left = lib.phi_len();
    let mut phi_weights = phi_w;
    let mut taken = vec![false; n];
    let mut out = Vec::with_capacity(cfg.n_initial);
    while out.len() < cfg.n_initial {
        let want_outside = rng.random::<f64>() < cfg.gamma;
        let use_outside = if want_outside { !outside.is_empty() } else { inside_left == 0 };
        let flat = if use_outside {
            let k = rng.random_range(0..outside.len());
            outside.swap_remove(k)
        } else {
            let cdf = cumulative(&phi_weights);
            let k = sample_cdf(&cdf, rng);
            phi_weights[k] = 0.0;
            inside_left -= 1;
            k
        };
        debug_assert!(!taken[flat]);
        taken[flat] = true;
        out.push(space.from_flat(flat)?);
    }
    Ok(out)
}

/// Pinned-safe set and the compensated surrogate.
pub fn update_surrogate(
    gated: &GatedPosterior,
    p_s: &ScenarioField,
    cfg: &AdaptiveConfig,
) -> Result<(ScenarioField, Vec<bool>)> {
    p_s.ensure_same_space(&gated.mean)?;
    let p1 = gated.p_class1();
    let u_set: Vec<bool> = (0..p_s.len())
        .map(|k| p_s.at(k) == 0.0 && p1.at(k) <= cfg.p_th)
        .collect();
    let values = (0..p_s.len())
        .map(|k| {
            if u_set[k] {
                0.0
            } else {
                (p_s.at(k) + gated.mean.at(k)).clamp(0.0, 1.0)
            }
        })
        .collect();
    Ok((ScenarioField::new(*p_s.space(), values)?, u_set))
}

#[derive(Debug, Clone, PartialEq)]
pub struct Acquisition {
    /// Zero on excluded cells.
    pub value: ScenarioField,
    pub candidate: Vec<bool>,
    pub ei: ScenarioField,
    pub u_e: f64,
    pub u_c: f64,
}

/// Expected improvement of the estimation variance plus normalized class
/// uncertainty, over cells neither pinned safe nor already observed.
pub fn acquisition(
    gated: &GatedPosterior,
    q: &ScenarioField,
    p_x: &ScenarioField,
    u_set: &[bool],
    observed: &[bool],
    cfg: &AdaptiveConfig,
) -> Result<Acquisition> {
    let w = cfg.w_acq;
    q.ensure_same_space(p_x)?;
    let n = q.len();
    let p1 = gated.p_class1();
    let (m1, v1) = (&gated.gp_sub.mean, &gated.gp_sub.var);
    let (m2, v2) = (&gated.gp_opt.mean, &gated.gp_opt.var);
    let sc = cfg.class_variance.field(&gated.gpc);
    let candidate: Vec<bool> = (0..n).map(|k| !u_set[k] && !observed[k]).collect();
    if !candidate.iter().any(|c| *c) {
        return Err(Error::Exhausted("every cell is pinned safe or already tested".into()));
    }
    let ei: Vec<f64> = (0..n)
        .map(|k| {
            let p = p_x.at(k);
            let a = p1.at(k);
            p * p / q.at(k)
                * (a * (m1.at(k) * m1.at(k) + v1.at(k)) + (1.0 - a) * (m2.at(k) * m2.at(k) + v2.at(k)))
        })
        .collect();
    let u_e = (0..n).filter(|&k| candidate[k]).map(|k| ei[k]).fold(0.0, f64::max);
    let u_c = (0..n).filter(|&k| candidate[k]).map(|k| sc.at(k)).fold(0.0, f64::max);
    let value = (0..n)
        .map(|k| {
            if !candidate[k] {
                return 0.0;
            }
            let e = if u_e > 0.0 { w * ei[k] / u_e } else { 0.0 };
            let c = if u_c > 0.0 { sc.at(k) / u_c } else { 0.0 };
            e + c
        })
        .collect();
    Ok(Acquisition {
        value: ScenarioField::new(*q.space(), value)?,
        candidate,
        ei: ScenarioField::new(*q.space(), ei)?,
        u_e,
        u_c,
    })
}

/// Argmax of the acquisition (lowest index on ties) with probability
/// `1 - beta`, otherwise a uniform pick among untested pinned-safe cells.
pub fn select_next<R: Rng + ?Sized>(
    acq: &Acquisition,
    u_set: &[bool],
    observed: &[bool],
    beta: f64,
    rng: &mut R,
) -> Result<usize> {
    if beta > 0.0 && rng.random::<f64>() < beta {
        let pool: Vec<usize> = (0..u_set.len()).filter(|&k| u_set[k] && !observed[k]).collect();
        if !pool.is_empty() {
            return Ok(pool[rng.random_range(0..pool.len())]);
        }
    }
    let mut best: Option<usize> = None;
    for k in 0..acq.candidate.len() {
        if acq.candidate[k] && best.is_none_or(|b| acq.value.at(k) > acq.value.at(b)) {
            best = Some(k);
        }
    }
    best.ok_or_else(|| Error::Exhausted("no candidate cell left".into()))
}

pub fn total_variation(a: &ScenarioField, b: &ScenarioField) -> f64 {
    0.5 * a
        .values()
        .iter()
        .zip(b.values())
        .map(|(x, y)| (x - y).abs())
        .sum::<f64>()
}

/// Cells where the compensated surrogate is on the wrong side of 0.5
/// relative to the ground-truth indicator.
pub fn mismatch_count(sm: &ScenarioField, truth: &ScenarioField) -> usize {
    sm.values()
        .iter()
        .zip(truth.values())
        .filter(|(s, t)| (*s - *t).abs() >= 0.5)
        .count()
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdaptiveState {
    pub observations: Vec<Observation>,
    pub gated: GatedPosterior,
    pub u_set: Vec<bool>,
    pub sm_updated: ScenarioField,
    pub library: Library,
    pub acquisition: Acquisition,
}

impl AdaptiveState {
    pub fn observed_mask(&self) -> Vec<bool> {
        let mut m = vec![false; self.sm_updated.len()];
        for o in &self.observations {
            m[o.flat] = true;
        }
        m
    }
}

/// State after iteration `iter` (0 = after the initial tests).
pub struct Snapshot<'a> {
    pub iter: usize,
    pub state: &'a AdaptiveState,
    pub tv_change: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdaptiveOutcome {
    pub state: AdaptiveState,
    pub cav_tests: usize,
    pub iterations: usize,
    pub stopped_early: bool,
    pub hypers: GatedHypers,
}

impl AdaptiveOutcome {
    pub fn library(&self) -> &Library {
        &self.state.library
    }
}

fn rebuild(
    offline: &OfflineArtifacts,
    observations: Vec<Observation>,
    cfg: &AdaptiveConfig,
    gp: &GatedOptions,
    warm: Option<&GatedHypers>,
    rng_gp: &mut impl Rng,
) -> Result<AdaptiveState> {
    let space = *offline.p_x.space();
    let x: Vec<[f64; 2]> = observations.iter().map(|o| [o.r, o.rdot]).collect();
    let f: Vec<f64> = observations.iter().map(|o| o.f).collect();
    let gated = gated_fit(&space, &x, &f, gp, warm, rng_gp)?;
    let (sm_updated, u_set) = update_surrogate(&gated, &offline.p_s, cfg)?;
    let v = criticality(&sm_updated, &offline.p_x)?;
    let library = match build_library(&v, cfg.epsilon) {
        Err(Error::DegenerateLibrary(_)) => uniform_library(&v, cfg.epsilon)?,
        other => other?,
    };
    let mut observed = vec![false; space.n_total()];
    for o in &observations {
        observed[o.flat] = true;
    }
    let acquisition = acquisition(&gated, &library.q, &offline.p_x, &u_set, &observed, cfg)?;
    Ok(AdaptiveState {
        observations,
        gated,
        u_set,
        sm_updated,
        library,
        acquisition,
    })
}

/// Runs initial sampling and `n_adaptive` test-and-update iterations,
/// simulating the vehicle under test once per selected cell.
pub fn run_adaptive(
    offline: &OfflineArtifacts,
    cav: &dyn CarFollowingPolicy,
    episode: &EpisodeConfig,
    cfg: &AdaptiveConfig,
    gp: &GatedOptions,
    seed: u64,
    on_snapshot: &mut dyn FnMut(&Snapshot<'_>) -> Result<()>,
) -> Result<AdaptiveOutcome> {
    cfg.validate()?;
    let space = *offline.p_x.space();
    if cfg.n_initial + cfg.n_adaptive > space.n_total() {
        return Err(Error::config(
            "adaptive.n_adaptive",
            "test budget exceeds the number of grid cells",
        ));
    }
    let mut rng_init = rng::stream(seed, "initial");
    let mut rng_sel = rng::stream(seed, "adaptive");
    let mut rng_gp = rng::stream(seed, "gp");
    let mut cav_tests = 0usize;
    let mut test = |flat: usize, iter: usize| -> Result<Observation> {
        let (r, rdot) = space.scenario_of_flat(flat)?;
        let res = simulate_cutin(cav, r, rdot, episode, false)?;
        cav_tests += 1;
        let a = if res.accident { 1.0 } else { 0.0 };
        Ok(Observation {
            iter,
            flat,
            r,
            rdot,
            f: observe_dissimilarity(a, offline.p_s.at(flat)),
        })
    };

    let initial = sample_initial(&offline.library, cfg, &mut rng_init)?;
    let observations = initial
        .iter()
        .map(|idx| test(idx.flat, 0))
        .collect::<Result<Vec<_>>>()?;
    let mut state = rebuild(offline, observations, cfg, gp, None, &mut rng_gp)?;
    let mut hypers = merge_hypers(GatedHypers::default(), state.gated.hypers());
    on_snapshot(&Snapshot {
        iter: 0,
        state: &state,
        tv_change: None,
    })?;

    let mut quiet = 0usize;
    let mut stopped_early = false;
    let mut iterations = 0usize;
    for it in 1..=cfg.n_adaptive {
        let observed = state.observed_mask();
        let next = select_next(&state.acquisition, &state.u_set, &observed, cfg.beta_explore, &mut rng_sel)?;
        let obs = test(next, it)?;
        let mut observations = state.observations.clone();
        observations.push(obs);
        let new_state = rebuild(offline, observations, cfg, gp, Some(&hypers), &mut rng_gp)?;
        hypers = merge_hypers(hypers, new_state.gated.hypers());
        let tv = total_variation(&state.library.q, &new_state.library.q);
        state = new_state;
        iterations = it;
        on_snapshot(&Snapshot {
            iter: it,
            state: &state,
            tv_change: Some(tv),
        })?;
        if cfg.early_stop {
            quiet = if tv < cfg.early_stop_tol { quiet + 1 } else { 0 };
            if quiet >= cfg.early_stop_window {
                stopped_early = true;
                break;
            }
        }
    }
    Ok(AdaptiveOutcome {
        state,
        cav_tests,
        iterations,
        stopped_early,
        hypers,
    })
}

/// Keeps the last fitted hyperparameters of each component model.
fn merge_hypers(old: GatedHypers, new: GatedHypers) -> GatedHypers {
    GatedHypers {
        sub: new.sub.or(old.sub),
        opt: new.opt.or(old.opt),
        gpc: new.gpc.or(old.gpc),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::space::{GridConfig, ScenarioSpace};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn dissimilarity_values() {
        assert_eq!(observe_dissimilarity(0.0, 0.0), 0.0);
        assert_eq!(observe_dissimilarity(1.0, 0.0), 1.0);
        assert_eq!(observe_dissimilarity(0.0, 1.0), -1.0);
    }

    fn toy_library() -> Library {
        let s = ScenarioSpace::new(&GridConfig::default()).unwrap();
        let p = ScenarioField::constant(s, 1.0 / 3420.0);
        let ps = ScenarioField::from_fn(s, |i| if i.i_r < 4 && i.i_rdot < 20 { 1.0 } else { 0.0 });
        // bump exposure on the challenged cells so they pass the threshold
        let p = p
            .zip_with(&ps, |a, b| a * (1.0 + 3.0 * b))
            .unwrap()
            .normalized()
            .unwrap();
        build_library(&criticality(&ps, &p).unwrap(), 0.1).unwrap()
    }

    #[test]
    fn initial_sampling_branches() {
        let lib = toy_library();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let all_out = AdaptiveConfig {
            gamma: 1.0,
            ..AdaptiveConfig::default()
        };
        let xs = sample_initial(&lib, &all_out, &mut rng).unwrap();
        assert!(xs.iter().all(|i| !lib.in_phi[i.flat]));
        let all_in = AdaptiveConfig {
            gamma: 0.0,
            ..AdaptiveConfig::default()
        };
        let xs = sample_initial(&lib, &all_in, &mut rng).unwrap();
        assert!(xs.iter().all(|i| lib.in_phi[i.flat]));
        let mut flats: Vec<usize> = xs.iter().map(|i| i.flat).collect();
        flats.sort();
        flats.dedup();
        assert_eq!(flats.len(), 50);
    }

    #[test]
    fn too_many_initial_tests_is_a_config_error() {
        let lib = toy_library();
        let cfg = AdaptiveConfig {
            n_initial: 5000,
            ..AdaptiveConfig::default()
        };
        assert!(matches!(
            sample_initial(&lib, &cfg, &mut ChaCha8Rng::seed_from_u64(0)),
            Err(Error::Config { .. })
        ));
    }

    #[test]
    fn total_variation_basics() {
        let s = ScenarioSpace::new(&GridConfig::default()).unwrap();
        let a = ScenarioField::constant(s, 1.0 / 3420.0);
        assert_eq!(total_variation(&a, &a), 0.0);
        let mut v = vec![0.0; 3420];
        v[0] = 1.0;
        let b = ScenarioField::new(s, v).unwrap();
        assert!((total_variation(&a, &b) - (1.0 - 1.0 / 3420.0)).abs() < 1e-12);
    }

    #[test]
    fn class_variance_fields() {
        let s = ScenarioSpace::new(&GridConfig::default()).unwrap();
        let gpc = GpcPosterior {
            p_class1: ScenarioField::from_fn(s, |i| (i.flat % 5) as f64 / 4.0),
            latent_var: ScenarioField::constant(s, 7.0),
            kernel: Default::default(),
            degenerate: false,
        };
        assert_eq!(ClassVariance::Latent.field(&gpc), gpc.latent_var);
        let b = ClassVariance::Bernoulli.field(&gpc);
        for (v, p) in b.values().iter().zip(gpc.p_class1.values()) {
            assert_eq!(*v, p * (1.0 - p));
        }
        assert_eq!(b.at(2), 0.25);
        assert_eq!(b.at(4), 0.0);
        assert_eq!(ClassVariance::default(), ClassVariance::Bernoulli);
    }
}
