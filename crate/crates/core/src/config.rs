//! Run configuration, read from TOML with unknown keys rejected.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::adaptive::AdaptiveConfig;
use crate::error::{Error, Result};
use crate::evaluator::EvalConfig;
use crate::exposure::SyntheticNdd;
use crate::gp::{AscentOptions, FitOptions, GatedOptions};
use crate::space::{GridConfig, ScenarioSpace};
use crate::vehicle::{AccAebParams, CarFollowingPolicy, EpisodeConfig, FvdmParams};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum PolicyKind {
    Fvdm,
    #[value(name = "accaeb")]
    AccAeb,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExposureConfig {
    /// Recorded events (`range,range_rate`); when absent a synthetic set is drawn.
    pub csv: Option<PathBuf>,
    pub synthetic: SyntheticNdd,
}

impl Default for ExposureConfig {
    fn default() -> Self {
        ExposureConfig {
            csv: None,
            synthetic: SyntheticNdd::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct VehicleConfig {
    pub surrogate: PolicyKind,
    pub cav: PolicyKind,
    pub fvdm: FvdmParams,
    pub acc_aeb: AccAebParams,
    pub episode: EpisodeConfig,
}

impl Default for VehicleConfig {
    fn default() -> Self {
        VehicleConfig {
            surrogate: PolicyKind::Fvdm,
            cav: PolicyKind::AccAeb,
            fvdm: FvdmParams::default(),
            acc_aeb: AccAebParams::default(),
            episode: EpisodeConfig::default(),
        }
    }
}

impl VehicleConfig {
    pub fn policy(&self, kind: PolicyKind) -> &dyn CarFollowingPolicy {
        match kind {
            PolicyKind::Fvdm => &self.fvdm,
            PolicyKind::AccAeb => &self.acc_aeb,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.fvdm.validate()?;
        self.acc_aeb.validate()?;
        self.episode.validate()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OfflineConfig {
    pub epsilon: f64,
}

impl Default for OfflineConfig {
    fn default() -> Self {
        OfflineConfig { epsilon: 0.1 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GpConfig {
    pub jitter: f64,
    /// Starts of the first, cold hyperparameter fit.
    pub restarts: usize,
    pub max_iter: usize,
    /// Ascent iterations of later fits, warm-started from the previous ones.
    pub warm_max_iter: usize,
}

impl Default for GpConfig {
    fn default() -> Self {
        GpConfig {
            jitter: 1e-6,
            restarts: 5,
            max_iter: 100,
            warm_max_iter: 15,
        }
    }
}

impl GpConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.jitter > 0.0) {
            return Err(Error::config("gp.jitter", "must be positive"));
        }
        if self.restarts == 0 {
            return Err(Error::config("gp.restarts", "must be at least 1"));
        }
        Ok(())
    }

    pub fn options(&self, space: &ScenarioSpace) -> GatedOptions {
        let tune = |mut o: FitOptions| {
            o.jitter = self.jitter;
            o.restarts = self.restarts;
            o.ascent = AscentOptions {
                max_iter: self.max_iter,
                ..o.ascent
            };
            o.warm_ascent = AscentOptions {
                max_iter: self.warm_max_iter,
                ..o.warm_ascent
            };
            o
        };
        GatedOptions {
            gpr: tune(FitOptions::for_space(space)),
            gpc: tune(FitOptions::gpc_for_space(space)),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CompareConfig {
    pub reps: usize,
    /// Rerun the whole adaptive stage for each replication instead of
    /// reusing the single customized library.
    pub rerun_adaptive: bool,
    /// Empirical crude Monte Carlo replications (0 keeps only the analytic count).
    pub crude_reps: usize,
    /// Relative half-width targets for the precision sweep.
    pub targets: Vec<f64>,
}

impl Default for CompareConfig {
    fn default() -> Self {
        CompareConfig {
            reps: 20,
            rerun_adaptive: true,
            crude_reps: 0,
            targets: vec![0.3, 0.2, 0.1],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub grid: GridConfig,
    pub exposure: ExposureConfig,
    pub vehicle: VehicleConfig,
    pub offline: OfflineConfig,
    pub adaptive: AdaptiveConfig,
    pub gp: GpConfig,
    pub eval: EvalConfig,
    pub compare: CompareConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 2019,
            grid: GridConfig::default(),
            exposure: ExposureConfig::default(),
            vehicle: VehicleConfig::default(),
            offline: OfflineConfig::default(),
            adaptive: AdaptiveConfig::default(),
            gp: GpConfig::default(),
            eval: EvalConfig::default(),
            compare: CompareConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::config("config", e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::config("config", e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        ScenarioSpace::new(&self.grid)?;
        if self.exposure.csv.is_none() {
            self.exposure.synthetic.validate()?;
        }
        self.vehicle.validate()?;
        if !(self.offline.epsilon > 0.0 && self.offline.epsilon < 1.0) {
            return Err(Error::config("offline.epsilon", "must lie in (0, 1)"));
        }
        self.adaptive.validate()?;
        self.gp.validate()?;
        self.eval.validate()?;
        if self.compare.targets.iter().any(|t| !(*t > 0.0)) {
            return Err(Error::config("compare.targets", "half-width targets must be positive"));
        }
        Ok(())
    }

    /// SHA-256 of the canonical TOML rendering.
    pub fn hash(&self) -> Result<String> {
        let text = self.to_toml()?;
        Ok(hex_digest(text.as_bytes()))
    }
}

pub fn hex_digest(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip_through_toml() {
        let cfg = RunConfig::default();
        let text = cfg.to_toml().unwrap();
        let back = RunConfig::from_toml_str(&text).unwrap();
        assert_eq!(cfg, back);
    }

    #[test]
    fn defaults_carry_the_cut_in_parameters() {
        let cfg = RunConfig::default();
        assert_eq!(cfg.adaptive.p_th, 0.7);
        assert_eq!(cfg.adaptive.w_acq, 0.5);
        assert_eq!(cfg.adaptive.gamma, 0.5);
        assert_eq!(cfg.offline.epsilon, 0.1);
        assert_eq!(cfg.vehicle.fvdm.c0, 0.85);
        assert_eq!(cfg.vehicle.fvdm.v1, 6.75);
        assert_eq!(cfg.vehicle.fvdm.v2, 7.91);
        assert_eq!(cfg.vehicle.fvdm.c1, 0.13);
        assert_eq!(cfg.vehicle.fvdm.l, 5.0);
        assert_eq!(cfg.vehicle.fvdm.c2, 1.57);
        assert_eq!(cfg.vehicle.episode.d_min, 1.0);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let err = RunConfig::from_toml_str("seed = 1\n[adaptive]\ngama = 0.5\n").unwrap_err();
        assert_eq!(err.exit_code(), 2);
        let err = RunConfig::from_toml_str("sede = 1\n").unwrap_err();
        assert!(matches!(err, Error::Config { .. }));
    }

    #[test]
    fn partial_files_fill_defaults() {
        let cfg = RunConfig::from_toml_str("seed = 9\n[offline]\nepsilon = 0.2\n").unwrap();
        assert_eq!(cfg.seed, 9);
        assert_eq!(cfg.offline.epsilon, 0.2);
        assert_eq!(cfg.grid, GridConfig::default());
    }

    #[test]
    fn invalid_values_name_the_field() {
        match RunConfig::from_toml_str("[grid]\nr_min = 0.0\nr_max = 90.0\nr_step = -2.0\nrdot_min = -20.0\nrdot_max = 10.0\nrdot_step = 0.4\n") {
            Err(Error::Config { field, .. }) => assert_eq!(field, "r_step"),
            other => panic!("unexpected {other:?}"),
        }
    }
}
