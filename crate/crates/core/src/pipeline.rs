//! End-to-end orchestration: offline library, adaptive customization,
//! evaluation and method comparison, with run-directory persistence.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::adaptive::{mismatch_count, run_adaptive, AdaptiveOutcome, Snapshot};
use crate::config::{hex_digest, RunConfig};
use crate::error::{Error, Result};
use crate::evaluator::{compare_methods, evaluate_crude, evaluate_is, AdaptiveRun, CompareReport, EvalConfig, EvalTrace};
use crate::exposure::ExposureModel;
use crate::library::OfflineArtifacts;
use crate::rng;
use crate::space::{ScenarioField, ScenarioSpace};
use crate::vehicle::outcome_field;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Offline,
    Adapt,
    Eval,
    Compare,
    All,
}

impl Stage {
    fn includes(self, s: Stage) -> bool {
        self == Stage::All || s <= self
    }
}

/// An error annotated with the pipeline stage it came from.
#[derive(Debug)]
pub struct StageError {
    pub stage: &'static str,
    pub error: Error,
}

impl std::fmt::Display for StageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "stage `{}` failed: {}", self.stage, self.error)
    }
}

trait AtStage<T> {
    fn at(self, stage: &'static str) -> std::result::Result<T, StageError>;
}

impl<T> AtStage<T> for Result<T> {
    fn at(self, stage: &'static str) -> std::result::Result<T, StageError> {
        self.map_err(|error| StageError { stage, error })
    }
}

pub fn build_exposure(cfg: &RunConfig, space: &ScenarioSpace) -> Result<ExposureModel> {
    match &cfg.exposure.csv {
        Some(path) => {
            let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
            ExposureModel::ingest_csv(*space, std::io::BufReader::new(f))
        }
        None => cfg
            .exposure
            .synthetic
            .exposure(space, &mut rng::stream(cfg.seed, "exposure")),
    }
}

/// Exposure, surrogate outcomes and the offline library.
pub fn offline_stage(cfg: &RunConfig) -> Result<(OfflineArtifacts, ExposureModel)> {
    let space = ScenarioSpace::new(&cfg.grid)?;
    let exposure = build_exposure(cfg, &space)?;
    let p_s = outcome_field(cfg.vehicle.policy(cfg.vehicle.surrogate), &space, &cfg.vehicle.episode)?;
    let art = OfflineArtifacts::build(exposure.p_x.clone(), p_s, cfg.offline.epsilon)?;
    Ok((art, exposure))
}

/// Ground-truth accident indicator of the vehicle under test on every cell.
pub fn ground_truth(cfg: &RunConfig, space: &ScenarioSpace) -> Result<ScenarioField> {
    outcome_field(cfg.vehicle.policy(cfg.vehicle.cav), space, &cfg.vehicle.episode)
}

/// Seed of adaptive replication `k`; replication 0 uses the master seed.
pub fn replication_seed(master: u64, k: usize) -> u64 {
    if k == 0 {
        return master;
    }
    use rand::RngCore;
    rng::replication(master, "adaptive", k).next_u64()
}

/// Runs the adaptive stage, writing per-iteration snapshots below `dir` when given.
pub fn adaptive_stage(
    cfg: &RunConfig,
    offline: &OfflineArtifacts,
    seed: u64,
    dir: Option<&Path>,
) -> Result<AdaptiveOutcome> {
    let space = *offline.p_x.space();
    let gp = cfg.gp.options(&space);
    let cav = cfg.vehicle.policy(cfg.vehicle.cav);
    let mut sink = |snap: &Snapshot<'_>| -> Result<()> {
        match dir {
            Some(d) => write_snapshot(d, snap),
            None => Ok(()),
        }
    };
    run_adaptive(offline, cav, &cfg.vehicle.episode, &cfg.adaptive, &gp, seed, &mut sink)
}

#[derive(Debug, Serialize)]
struct SnapshotManifest {
    iter: usize,
    n_observations: usize,
    n_phi: usize,
    n_pinned_safe: usize,
    tv_change: Option<f64>,
    u_e: f64,
    u_c: f64,
    gpc_degenerate: bool,
    kernel_sub: crate::gp::ArdSeKernel,
    kernel_opt: crate::gp::ArdSeKernel,
    kernel_gpc: crate::gp::ArdSeKernel,
}

fn write_snapshot(dir: &Path, snap: &Snapshot<'_>) -> Result<()> {
    let d = dir.join(format!("iter_{:03}", snap.iter));
    std::fs::create_dir_all(&d).map_err(|e| Error::io(&d, e))?;
    let st = snap.state;
    let obs_path = d.join("observations.csv");
    let mut w = csv::Writer::from_path(&obs_path).map_err(|e| Error::Format {
        path: obs_path.clone(),
        reason: e.to_string(),
    })?;
    let csv_err = |e: csv::Error| Error::Format {
        path: obs_path.clone(),
        reason: e.to_string(),
    };
    w.write_record(["iter", "flat", "R", "Rdot", "f"]).map_err(csv_err)?;
    for o in &st.observations {
        w.write_record([
            o.iter.to_string(),
            o.flat.to_string(),
            o.r.to_string(),
            o.rdot.to_string(),
            o.f.to_string(),
        ])
        .map_err(csv_err)?;
    }
    w.flush().map_err(|e| Error::io(&obs_path, e))?;
    st.sm_updated.write_binary(&d.join("sm_updated.bin"))?;
    st.library.q.write_binary(&d.join("q.bin"))?;
    st.acquisition.value.write_binary(&d.join("acquisition.bin"))?;
    let man = SnapshotManifest {
        iter: snap.iter,
        n_observations: st.observations.len(),
        n_phi: st.library.phi_len(),
        n_pinned_safe: st.u_set.iter().filter(|u| **u).count(),
        tv_change: snap.tv_change,
        u_e: st.acquisition.u_e,
        u_c: st.acquisition.u_c,
        gpc_degenerate: st.gated.gpc.degenerate,
        kernel_sub: st.gated.gp_sub.kernel,
        kernel_opt: st.gated.gp_opt.kernel,
        kernel_gpc: st.gated.gpc.kernel,
    };
    write_json(&d.join("manifest.json"), &man)
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| Error::Format {
        path: path.into(),
        reason: e.to_string(),
    })?;
    std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

/// Customized library packaged like the offline one, with the compensated
/// surrogate in place of the surrogate outcomes.
pub fn customized_artifacts(offline: &OfflineArtifacts, outcome: &AdaptiveOutcome) -> Result<OfflineArtifacts> {
    if outcome.state.library.phi_len() == 0 {
        return Err(Error::DegenerateLibrary(
            "customized library has no cell above threshold".into(),
        ));
    }
    Ok(OfflineArtifacts {
        p_x: offline.p_x.clone(),
        p_s: outcome.state.sm_updated.clone(),
        library: outcome.state.library.clone(),
    })
}

/// Evaluation against cached ground truth, with full per-test records.
pub fn evaluation_traces(
    cfg: &RunConfig,
    offline: &OfflineArtifacts,
    customized: &OfflineArtifacts,
    p_a: &ScenarioField,
) -> Result<BTreeMap<&'static str, EvalTrace>> {
    let out = |i: crate::space::ScenarioIndex| Ok(p_a.get(i));
    let mut traces = BTreeMap::new();
    traces.insert(
        "crude",
        evaluate_crude(&offline.p_x, out, &cfg.eval, true, &mut rng::stream(cfg.seed, "eval.crude"))?,
    );
    traces.insert(
        "offline",
        evaluate_is(&offline.library.q, &offline.p_x, out, &cfg.eval, true, &mut rng::stream(cfg.seed, "eval.offline"))?,
    );
    traces.insert(
        "adaptive",
        evaluate_is(&customized.library.q, &offline.p_x, out, &cfg.eval, true, &mut rng::stream(cfg.seed, "eval.adaptive"))?,
    );
    Ok(traces)
}

/// Replicated comparison, one report per half-width target.
pub fn compare_stage(
    cfg: &RunConfig,
    offline: &OfflineArtifacts,
    p_a: &ScenarioField,
    runs: &[AdaptiveOutcome],
    targets: &[f64],
) -> Result<Vec<CompareReport>> {
    let adaptive: Vec<AdaptiveRun<'_>> = runs
        .iter()
        .map(|o| AdaptiveRun {
            library: o.library(),
            tests: o.cav_tests,
        })
        .collect();
    let reps = if runs.len() > 1 { runs.len() } else { cfg.compare.reps };
    targets
        .iter()
        .map(|&t| {
            let ecfg = EvalConfig {
                target_half_width: t,
                ..cfg.eval
            };
            compare_methods(&offline.p_x, p_a, &offline.library, &adaptive, &ecfg, reps, cfg.compare.crude_reps, cfg.seed)
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub tool: String,
    pub version: String,
    pub config_hash: String,
    pub seed: u64,
    pub stage: Stage,
    pub summary: BTreeMap<String, f64>,
    /// Relative path to SHA-256 of every file written by the run.
    pub files: BTreeMap<String, String>,
}

fn hash_tree(root: &Path) -> Result<BTreeMap<String, String>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        let entries = std::fs::read_dir(&dir).map_err(|e| Error::io(&dir, e))?;
        for entry in entries {
            let entry = entry.map_err(|e| Error::io(&dir, e))?;
            let path = entry.path();
            if path.is_dir() {
                stack.push(path);
                continue;
            }
            let rel = path
                .strip_prefix(root)
                .expect("walked below root")
                .to_string_lossy()
                .replace('\\', "/");
            if rel == "manifest.json" || rel == "timings.json" {
                continue;
            }
            let bytes = std::fs::read(&path).map_err(|e| Error::io(&path, e))?;
            out.insert(rel, hex_digest(&bytes));
        }
    }
    Ok(out)
}

pub struct PipelineResult {
    pub manifest: RunManifest,
    pub out_dir: PathBuf,
}

/// Runs every stage up to `stage` and persists the results in `out`.
///
/// All files except `timings.json` depend only on the configuration, so a
/// rerun with the same configuration reproduces them bit for bit.
pub fn run_pipeline(cfg: &RunConfig, out: &Path, stage: Stage) -> std::result::Result<PipelineResult, StageError> {
    cfg.validate().at("config")?;
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e)).at("config")?;
    let mut timings: BTreeMap<String, f64> = BTreeMap::new();
    let mut summary: BTreeMap<String, f64> = BTreeMap::new();
    std::fs::write(out.join("config.toml"), cfg.to_toml().at("config")?)
        .map_err(|e| Error::io(out.join("config.toml"), e))
        .at("config")?;

    let t = Instant::now();
    let (offline, exposure) = offline_stage(cfg).at("offline")?;
    offline.save(&out.join("library.bin")).at("offline")?;
    offline.p_x.write_csv_file(&out.join("exposure.csv")).at("offline")?;
    offline.p_s.write_csv_file(&out.join("surrogate_outcome.csv")).at("offline")?;
    summary.insert("exposure_events_used".into(), exposure.n_events_used as f64);
    summary.insert("exposure_events_rejected".into(), exposure.n_events_rejected as f64);
    summary.insert("offline_n_phi".into(), offline.library.phi_len() as f64);
    summary.insert("offline_w_norm".into(), offline.library.w_norm);
    timings.insert("offline".into(), t.elapsed().as_secs_f64());

    if stage.includes(Stage::Adapt) {
        let t = Instant::now();
        let space = *offline.p_x.space();
        let p_a = ground_truth(cfg, &space).at("adapt")?;
        p_a.write_csv_file(&out.join("cav_outcome.csv")).at("adapt")?;
        let run = adaptive_stage(cfg, &offline, cfg.seed, Some(&out.join("adaptive"))).at("adapt")?;
        let custom = customized_artifacts(&offline, &run).at("adapt")?;
        custom.save(&out.join("customized.bin")).at("adapt")?;
        summary.insert("adaptive_cav_tests".into(), run.cav_tests as f64);
        summary.insert("adaptive_iterations".into(), run.iterations as f64);
        summary.insert("customized_n_phi".into(), custom.library.phi_len() as f64);
        summary.insert("mismatch_surrogate".into(), mismatch_count(&offline.p_s, &p_a) as f64);
        summary.insert("mismatch_final".into(), mismatch_count(&run.state.sm_updated, &p_a) as f64);
        timings.insert("adapt".into(), t.elapsed().as_secs_f64());

        if stage.includes(Stage::Eval) {
            let t = Instant::now();
            let traces = evaluation_traces(cfg, &offline, &custom, &p_a).at("eval")?;
            let dir = out.join("eval");
            std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e)).at("eval")?;
            for (name, tr) in &traces {
                let p = dir.join(format!("{name}.csv"));
                let f = std::fs::File::create(&p).map_err(|e| Error::io(&p, e)).at("eval")?;
                tr.write_csv(std::io::BufWriter::new(f)).at("eval")?;
                summary.insert(format!("eval_{name}_tests"), tr.n_used as f64);
                summary.insert(format!("eval_{name}_mu_hat"), tr.mu_hat);
            }
            timings.insert("eval".into(), t.elapsed().as_secs_f64());
        }

        if stage.includes(Stage::Compare) {
            let t = Instant::now();
            let mut runs = vec![run];
            if cfg.compare.rerun_adaptive {
                for k in 1..cfg.compare.reps {
                    let seed = replication_seed(cfg.seed, k);
                    runs.push(adaptive_stage(cfg, &offline, seed, None).at("compare")?);
                }
            }
            let reports = compare_stage(cfg, &offline, &p_a, &runs, &cfg.compare.targets).at("compare")?;
            write_compare_outputs(&out.join("compare"), &reports).at("compare")?;
            if let Some(r) = reports.iter().find(|r| r.target_half_width == cfg.eval.target_half_width) {
                summary.insert("compare_crude_analytic".into(), r.crude_analytic);
                summary.insert("compare_offline_mean".into(), r.offline.mean);
                summary.insert("compare_adaptive_mean".into(), r.adaptive_total.mean);
                summary.insert("compare_adaptive_std".into(), r.adaptive_total.std);
            }
            timings.insert("compare".into(), t.elapsed().as_secs_f64());
        }
    }

    let manifest = RunManifest {
        tool: env!("CARGO_PKG_NAME").into(),
        version: env!("CARGO_PKG_VERSION").into(),
        config_hash: cfg.hash().at("config")?,
        seed: cfg.seed,
        stage,
        summary,
        files: hash_tree(out).at("manifest")?,
    };
    write_json(&out.join("manifest.json"), &manifest).at("manifest")?;
    write_json(&out.join("timings.json"), &timings).at("manifest")?;
    Ok(PipelineResult {
        manifest,
        out_dir: out.to_path_buf(),
    })
}

/// `report.json` plus plot-ready CSVs of the comparison.
pub fn write_compare_outputs(dir: &Path, reports: &[CompareReport]) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    write_json(&dir.join("report.json"), &reports)?;
    let path = dir.join("required_vs_target.csv");
    let mut w = csv::Writer::from_path(&path).map_err(|e| Error::Format {
        path: path.clone(),
        reason: e.to_string(),
    })?;
    let err = |e: csv::Error| Error::Format {
        path: path.clone(),
        reason: e.to_string(),
    };
    w.write_record([
        "target_half_width",
        "crude_analytic",
        "offline_mean",
        "offline_std",
        "adaptive_mean",
        "adaptive_std",
        "offline_over_adaptive",
    ])
    .map_err(err)?;
    for r in reports {
        w.write_record([
            r.target_half_width.to_string(),
            r.crude_analytic.to_string(),
            r.offline.mean.to_string(),
            r.offline.std.to_string(),
            r.adaptive_total.mean.to_string(),
            r.adaptive_total.std.to_string(),
            r.accel_offline_vs_adaptive.to_string(),
        ])
        .map_err(err)?;
    }
    w.flush().map_err(|e| Error::io(&path, e))?;
    let path = dir.join("replications.csv");
    let mut w = csv::Writer::from_path(&path).map_err(|e| Error::Format {
        path: path.clone(),
        reason: e.to_string(),
    })?;
    let err = |e: csv::Error| Error::Format {
        path: path.clone(),
        reason: e.to_string(),
    };
    w.write_record(["target_half_width", "rep", "offline_tests", "adaptive_total", "offline_mu_hat", "adaptive_mu_hat"])
        .map_err(err)?;
    for r in reports {
        for k in 0..r.n_reps {
            w.write_record([
                r.target_half_width.to_string(),
                k.to_string(),
                r.offline.per_replication[k].to_string(),
                r.adaptive_total.per_replication[k].to_string(),
                r.offline_estimates[k].to_string(),
                r.adaptive_estimates[k].to_string(),
            ])
            .map_err(err)?;
        }
    }
    w.flush().map_err(|e| Error::io(&path, e))
}
